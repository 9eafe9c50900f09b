use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use prefalign::clinician::{simulate, write_trajectories_csv, SelectionNoise};
use prefalign::experiments::{
    ablation_summary, alignment_panel, alignment_summary, efficiency_summary, run_ablation, run_alignment, run_efficiency,
    write_ablation_csv, write_alignment_csv, write_efficiency_csv, Benchmark, DataConfig, EfficiencyConfig, RunSummary,
};
use prefalign::model::{Checkpoint, ModelParams};
use prefalign::phantom::{annotate, ClinicianProfile, PhantomDataset};
use prefalign::session::{AdaptationMode, ImageSource, SessionConfig};
use prefalign::training::{train, write_losses_csv, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Parser)]
#[command(name = "prefalign", about = "Preference-aligned interactive segmentation on phantom data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run's primary seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Trained checkpoint; without one a fresh initialization is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with annotations.
    GenData(Common),
    /// Train a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Load a dataset written by gen-data instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run simulated clinicians and write their trajectories.
    Simulate(WithCheckpoint),
    /// Iterations needed to reach target Dice values.
    Efficiency(WithCheckpoint),
    /// Dice against included and excluded clinicians while aligning to a fused target.
    Alignment(WithCheckpoint),
    /// Train and compare the four adaptation variants.
    Ablation(Common),
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        persist: Option<PathBuf>,
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Static files (the web client) served next to the API.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainRun {
    data: DataConfig,
    train: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SimulateRun {
    bench: Benchmark,
    session: SessionConfig,
    clinicians: Vec<ClinicianProfile>,
    selection_noise: f64,
}

impl Default for SimulateRun {
    fn default() -> Self {
        Self { bench: Benchmark::default(), session: SessionConfig::default(), clinicians: ClinicianProfile::training_panel(), selection_noise: 0.0 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct EfficiencyRun {
    bench: Benchmark,
    session: SessionConfig,
    clinicians: Vec<ClinicianProfile>,
    efficiency: EfficiencyConfig,
    modes: Vec<AdaptationMode>,
}

impl Default for EfficiencyRun {
    fn default() -> Self {
        Self {
            bench: Benchmark::default(),
            session: SessionConfig::default(),
            clinicians: ClinicianProfile::training_panel(),
            efficiency: EfficiencyConfig::default(),
            modes: vec![AdaptationMode::Disabled, AdaptationMode::Full],
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct AlignmentRun {
    bench: Benchmark,
    session: SessionConfig,
    included: Vec<ClinicianProfile>,
    excluded: Vec<ClinicianProfile>,
    iterations: usize,
    fusion_weights: Option<Vec<f64>>,
}

impl Default for AlignmentRun {
    fn default() -> Self {
        let (included, excluded) = alignment_panel();
        Self { bench: Benchmark::default(), session: SessionConfig::default(), included, excluded, iterations: 6, fusion_weights: None }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct AblationRun {
    data: DataConfig,
    train: TrainConfig,
    bench: Benchmark,
    session: SessionConfig,
    clinicians: Vec<ClinicianProfile>,
    iterations: usize,
}

impl Default for AblationRun {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            bench: Benchmark::default(),
            session: SessionConfig::default(),
            clinicians: ClinicianProfile::training_panel(),
            iterations: 3,
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn load_model(path: Option<&Path>) -> Result<(ModelParams, Option<String>)> {
    match path {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            let hash = ck.hash();
            Ok((ck.params, Some(hash)))
        }
        None => {
            log::warn!("no --checkpoint given; using an untrained model");
            Ok((ModelParams::init(&Default::default(), 0), None))
        }
    }
}

/// Session shape follows the model; everything else comes from the config.
fn fit_session(session: &SessionConfig, model: &ModelParams) -> SessionConfig {
    SessionConfig { components: model.components(), latent_dim: model.latent_dim(), embed_dim: model.embed_dim(), ..session.clone() }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(summary)?).with_context(|| format!("writing {}", path.display()))?;
    println!("{}", serde_json::to_string_pretty(&summary.results)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData(c) => gen_data(c),
        Command::Train { common, data } => train_cmd(common, data),
        Command::Simulate(c) => simulate_cmd(c),
        Command::Efficiency(c) => efficiency_cmd(c),
        Command::Alignment(c) => alignment_cmd(c),
        Command::Ablation(c) => ablation_cmd(c),
        Command::Serve { addr, persist, deterministic, checkpoint, static_dir, config } => {
            serve(addr, persist, deterministic, checkpoint, static_dir, config)
        }
    }
}

fn gen_data(c: Common) -> Result<()> {
    let mut cfg: DataConfig = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let data = cfg.generate()?;
    data.export(&c.out)?;
    log::info!("wrote {} images to {}", data.len(), c.out.display());
    Ok(())
}

fn train_cmd(c: Common, data_dir: Option<PathBuf>) -> Result<()> {
    let mut run: TrainRun = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        run.train.seed = s;
    }
    let data = match &data_dir {
        Some(dir) => PhantomDataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?,
        None => run.data.generate()?,
    };
    create_out(&c.out)?;
    log::info!("training on {} images for {} epochs", data.len(), run.train.epochs);
    let report = train(&run.train, &data)?;
    report.checkpoint.save(&c.out.join("checkpoint.json"))?;
    write_losses_csv(File::create(c.out.join("losses.csv"))?, &report.losses)?;
    let results = json!({
        "pseg_ce_by_epoch": report.epoch_means(|r| r.pseg_ce),
        "paf_ce_by_epoch": report.epoch_means(|r| r.paf_ce),
        "paf_mse_by_epoch": report.epoch_means(|r| r.paf_mse),
        "steps": report.losses.len(),
    });
    write_summary(
        &c.out,
        &RunSummary { experiment: "train".into(), config: serde_json::to_value(&run)?, checkpoint_hash: Some(report.checkpoint.hash()), results },
    )
}

fn simulate_cmd(c: WithCheckpoint) -> Result<()> {
    let mut run: SimulateRun = load_config(c.common.config.as_deref())?;
    if let Some(s) = c.common.seed {
        run.bench.seeds = vec![s];
    }
    run.bench.validate()?;
    let (model, hash) = load_model(c.checkpoint.as_deref())?;
    let session = fit_session(&run.session, &model);
    create_out(&c.common.out)?;
    let mut rows = Vec::new();
    for i in 0..run.bench.images {
        let source = ImageSource::Phantom { seed: prefalign::rng::derive_seed(run.bench.data_seed, &[i as u64]), height: run.bench.height, width: run.bench.width };
        let image = source.load()?;
        for profile in &run.clinicians {
            let gt = annotate(profile, &image);
            for &seed in &run.bench.seeds {
                let cfg = SessionConfig { seed: prefalign::rng::derive_seed(seed, &[i as u64, profile.id as u64]), ..session.clone() };
                let (traj, _) = simulate(&cfg, &source, &model, profile, &gt, SelectionNoise(run.selection_noise))?;
                rows.push((format!("phantom-{i:04}"), profile.id, traj));
            }
        }
    }
    write_trajectories_csv(File::create(c.common.out.join("trajectories.csv"))?, &rows)?;
    let approved = rows.iter().filter(|r| r.2.status == prefalign::session::SessionStatus::Approved).count();
    let mean_iters = rows.iter().map(|r| r.2.iterations_used as f64).sum::<f64>() / rows.len() as f64;
    write_summary(
        &c.common.out,
        &RunSummary {
            experiment: "simulate".into(),
            config: serde_json::to_value(&run)?,
            checkpoint_hash: hash,
            results: json!({ "sessions": rows.len(), "approved": approved, "mean_iterations": mean_iters }),
        },
    )
}

fn efficiency_cmd(c: WithCheckpoint) -> Result<()> {
    let mut run: EfficiencyRun = load_config(c.common.config.as_deref())?;
    if let Some(s) = c.common.seed {
        run.bench.seeds = vec![s];
    }
    let (model, hash) = load_model(c.checkpoint.as_deref())?;
    create_out(&c.common.out)?;
    let mut results = serde_json::Map::new();
    for &mode in &run.modes {
        let session = SessionConfig { mode, ..fit_session(&run.session, &model) };
        let records = run_efficiency(&run.bench, &session, &model, &run.clinicians, &run.efficiency)?;
        write_efficiency_csv(File::create(c.common.out.join(format!("efficiency_{}.csv", mode.name())))?, &records)?;
        let summary: Vec<_> = efficiency_summary(&records).into_iter().map(|(t, it)| json!({"target_dice": t, "mean_iterations": it})).collect();
        results.insert(mode.name().into(), summary.into());
    }
    write_summary(
        &c.common.out,
        &RunSummary { experiment: "efficiency".into(), config: serde_json::to_value(&run)?, checkpoint_hash: hash, results: results.into() },
    )
}

fn alignment_cmd(c: WithCheckpoint) -> Result<()> {
    let mut run: AlignmentRun = load_config(c.common.config.as_deref())?;
    if let Some(s) = c.common.seed {
        run.bench.seeds = vec![s];
    }
    let (model, hash) = load_model(c.checkpoint.as_deref())?;
    create_out(&c.common.out)?;
    let session = fit_session(&run.session, &model);
    let rows = run_alignment(&run.bench, &session, &model, &run.included, &run.excluded, run.iterations, run.fusion_weights.as_deref())?;
    write_alignment_csv(File::create(c.common.out.join("alignment.csv"))?, &rows)?;
    let summary: Vec<_> = alignment_summary(&rows, run.iterations)
        .into_iter()
        .map(|(id, inc, d)| json!({"clinician_id": id, "included": inc, "mean_delta": d}))
        .collect();
    write_summary(
        &c.common.out,
        &RunSummary {
            experiment: "alignment".into(),
            config: serde_json::to_value(&run)?,
            checkpoint_hash: hash,
            results: json!({ "iteration": run.iterations, "clinicians": summary }),
        },
    )
}

fn ablation_cmd(c: Common) -> Result<()> {
    let mut run: AblationRun = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        run.train.seed = s;
    }
    create_out(&c.out)?;
    let data = run.data.generate()?;
    let mut variants = Vec::new();
    let mut hashes = serde_json::Map::new();
    for mode in AdaptationMode::ALL {
        let cfg = TrainConfig { mode, ..run.train.clone() };
        log::info!("training variant {}", mode.name());
        let report = train(&cfg, &data)?;
        let path = c.out.join(format!("checkpoint_{}.json", mode.name()));
        report.checkpoint.save(&path)?;
        hashes.insert(mode.name().into(), report.checkpoint.hash().into());
        variants.push((mode, report.checkpoint.params));
    }
    let session = fit_session(&run.session, &variants[0].1);
    let records = run_ablation(&run.bench, &session, &variants, &run.clinicians, run.iterations)?;
    write_ablation_csv(File::create(c.out.join("ablation.csv"))?, &records)?;
    let summary: serde_json::Map<_, _> = ablation_summary(&records).into_iter().map(|(m, d)| (m.name().to_string(), d.into())).collect();
    write_summary(
        &c.out,
        &RunSummary {
            experiment: "ablation".into(),
            config: serde_json::to_value(&run)?,
            checkpoint_hash: None,
            results: json!({ "iteration": run.iterations, "mean_dice": summary, "checkpoints": hashes }),
        },
    )
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct ServeConfig {
    session: SessionConfig,
    catalog_images: Option<usize>,
    catalog_size: Option<usize>,
    catalog_seed: Option<u64>,
}

fn serve(
    addr: String,
    persist: Option<PathBuf>,
    deterministic: bool,
    checkpoint: Option<PathBuf>,
    static_dir: Option<PathBuf>,
    config: Option<PathBuf>,
) -> Result<()> {
    let cfg: ServeConfig = load_config(config.as_deref())?;
    let (model, _) = load_model(checkpoint.as_deref())?;
    let mut catalog = prefalign_service::Catalog::default();
    if let Some(n) = cfg.catalog_images {
        catalog.count = n;
    }
    if let Some(s) = cfg.catalog_size {
        catalog.height = s;
        catalog.width = s;
    }
    if let Some(s) = cfg.catalog_seed {
        catalog.data_seed = s;
    }
    let service = prefalign_service::ServiceConfig { deterministic, persist, catalog, defaults: cfg.session };
    let state = Arc::new(prefalign_service::AppState::new(model, service)?);
    let restored = state.restore()?;
    if restored > 0 {
        log::info!("restored {restored} persisted sessions");
    }
    if let Some(dir) = &static_dir {
        if !dir.is_dir() {
            bail!("static directory {} does not exist", dir.display());
        }
    }
    let app = prefalign_service::router(state.clone(), static_dir.as_deref());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        log::info!("listening on http://{} (model {})", listener.local_addr()?, state.model_hash());
        axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
