//! Behavioral experiments on the phantom benchmark: iterations to a target
//! Dice, alignment with a fused panel, the adaptation ablation, and
//! convergence of a single-clinician session.
//!
//! Every driver fans out one job per (image, clinician, seed) and collects
//! results in job order, so outputs do not depend on thread count.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clinician::simulate;
use crate::clinician::SelectionNoise;
use crate::error::{invalid, Result};
use crate::mask::BinaryMask;
use crate::metrics::{dice, iterations_to_target, DEFAULT_CAP, DEFAULT_FAILURE_VALUE};
use crate::model::ModelParams;
use crate::phantom::{annotate, fuse_annotations, ClinicianProfile, PhantomDataset, PhantomImage};
use crate::rng::{derive_seed, stream};
use crate::segmenter::binarize;
use crate::training::responsibility_target;
use crate::session::{predict_step, AdaptationMode, ImageSource, SessionConfig};

/// Temperature of the responsibility diagnostic in convergence runs.
pub const RESPONSIBILITY_TEMPERATURE: f64 = 0.1;

/// Which phantoms and session seeds an experiment runs over. Image `i` is
/// the same phantom `PhantomDataset::generate` builds with `data_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Benchmark {
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
}

impl Default for Benchmark {
    fn default() -> Self {
        Self { images: 20, height: 64, width: 64, data_seed: 1000, seeds: vec![0, 1, 2] }
    }
}

/// Phantom training data: images plus the annotating panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub clinicians: Vec<ClinicianProfile>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { images: 200, height: 64, width: 64, seed: 7, clinicians: ClinicianProfile::training_panel() }
    }
}

impl DataConfig {
    pub fn generate(&self) -> Result<PhantomDataset> {
        PhantomDataset::generate(self.images, self.height, self.width, self.seed, &self.clinicians)
    }
}

/// Five annotators: three under-segmenting ones whose fused mask is the
/// session target, and two over-segmenting ones left out of it.
pub fn alignment_panel() -> (Vec<ClinicianProfile>, Vec<ClinicianProfile>) {
    let p = |id: u32, t: f64| ClinicianProfile { id, threshold: t, approval_dice: 0.9 };
    (vec![p(1, 0.30), p(2, 0.35), p(3, 0.40)], vec![p(4, 0.55), p(5, 0.65)])
}

struct BenchImage {
    id: String,
    source: ImageSource,
    image: PhantomImage,
}

impl Benchmark {
    pub fn validate(&self) -> Result<()> {
        if self.images == 0 || self.seeds.is_empty() {
            return Err(invalid("benchmark needs at least one image and one seed"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(invalid("image size must be positive"));
        }
        Ok(())
    }

    fn load(&self) -> Result<Vec<BenchImage>> {
        self.validate()?;
        (0..self.images)
            .map(|i| {
                let source = ImageSource::Phantom {
                    seed: derive_seed(self.data_seed, &[i as u64]),
                    height: self.height,
                    width: self.width,
                };
                Ok(BenchImage { id: format!("phantom-{i:04}"), image: source.load()?, source })
            })
            .collect()
    }
}

/// Session config for one job: same layout seed, per-job sampling seed.
fn job_config(base: &SessionConfig, seed: u64, image: usize, clinician: u32) -> SessionConfig {
    SessionConfig { seed: derive_seed(seed, &[image as u64, clinician as u64]), ..base.clone() }
}

/// A clinician who never approves before the cap (Dice must exceed 1).
fn tireless(profile: &ClinicianProfile) -> ClinicianProfile {
    ClinicianProfile { approval_dice: 1.0, ..profile.clone() }
}

/// `y_app` at each 1-based iteration up to `iterations`; sessions that stop
/// early keep their last mask.
fn y_app_sequence(history: &[crate::session::IterationRecord], iterations: usize) -> Result<Vec<BinaryMask>> {
    let decoded = history.iter().map(|r| r.y_app.decode()).collect::<Result<Vec<_>>>()?;
    let last = decoded.last().cloned().ok_or_else(|| invalid("empty session history"))?;
    Ok((0..iterations).map(|j| decoded.get(j).cloned().unwrap_or_else(|| last.clone())).collect())
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { f64::NAN } else { sum / n as f64 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRecord {
    pub image_id: String,
    pub clinician_id: u32,
    pub seed: u64,
    pub target_dice: f64,
    pub iterations: f64,
    /// Dice at each iteration of the underlying trajectory.
    pub dices: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EfficiencyConfig {
    pub targets: Vec<f64>,
    pub cap: usize,
    pub failure_value: f64,
}

impl Default for EfficiencyConfig {
    fn default() -> Self {
        Self { targets: vec![0.8, 0.85, 0.9], cap: DEFAULT_CAP, failure_value: DEFAULT_FAILURE_VALUE }
    }
}

/// Runs each clinician up to `cap` iterations per image and seed and counts
/// the iterations needed to reach each target.
pub fn run_efficiency(
    bench: &Benchmark,
    session: &SessionConfig,
    model: &ModelParams,
    profiles: &[ClinicianProfile],
    config: &EfficiencyConfig,
) -> Result<Vec<EfficiencyRecord>> {
    if config.cap == 0 || config.targets.is_empty() {
        return Err(invalid("efficiency needs a positive cap and at least one target"));
    }
    let images = bench.load()?;
    let jobs: Vec<(usize, &ClinicianProfile, u64)> = (0..images.len())
        .flat_map(|i| profiles.iter().flat_map(move |p| bench.seeds.iter().map(move |&s| (i, p, s))))
        .collect();
    let per_job = jobs
        .par_iter()
        .map(|&(i, profile, seed)| {
            let img = &images[i];
            let gt = annotate(profile, &img.image);
            let cfg = SessionConfig { max_iterations: config.cap, ..job_config(session, seed, i, profile.id) };
            let (traj, _) = simulate(&cfg, &img.source, model, &tireless(profile), &gt, SelectionNoise::default())?;
            let dices = traj.dices();
            config
                .targets
                .iter()
                .map(|&t| {
                    Ok(EfficiencyRecord {
                        image_id: img.id.clone(),
                        clinician_id: profile.id,
                        seed,
                        target_dice: t,
                        iterations: iterations_to_target(&dices, t, config.cap, config.failure_value)?,
                        dices: dices.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_job.into_iter().flatten().collect())
}

/// Mean iterations per target, in the order targets first appear.
pub fn efficiency_summary(records: &[EfficiencyRecord]) -> Vec<(f64, f64)> {
    let mut targets: Vec<f64> = Vec::new();
    for r in records {
        if !targets.contains(&r.target_dice) {
            targets.push(r.target_dice);
        }
    }
    targets
        .into_iter()
        .map(|t| (t, mean(records.iter().filter(|r| r.target_dice == t).map(|r| r.iterations))))
        .collect()
}

pub fn write_efficiency_csv<W: Write>(out: W, records: &[EfficiencyRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "clinician_id", "seed", "target_dice", "iterations"])?;
    for r in records {
        w.write_record([r.image_id.clone(), r.clinician_id.to_string(), r.seed.to_string(), r.target_dice.to_string(), r.iterations.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub image_id: String,
    pub seed: u64,
    pub iteration: usize,
    pub clinician_id: u32,
    pub included: bool,
    pub dice: f64,
    /// `dice` minus the same clinician's Dice at iteration 1.
    pub delta: f64,
}

/// Drives sessions toward the fused annotation of `included` and tracks
/// Dice against every individual clinician.
pub fn run_alignment(
    bench: &Benchmark,
    session: &SessionConfig,
    model: &ModelParams,
    included: &[ClinicianProfile],
    excluded: &[ClinicianProfile],
    iterations: usize,
    fusion_weights: Option<&[f64]>,
) -> Result<Vec<AlignmentRow>> {
    if included.is_empty() || iterations == 0 {
        return Err(invalid("alignment needs included clinicians and at least one iteration"));
    }
    if included.iter().any(|a| excluded.iter().any(|b| a.id == b.id)) {
        return Err(invalid("a clinician cannot be both included and excluded"));
    }
    let images = bench.load()?;
    let jobs: Vec<(usize, u64)> = (0..images.len()).flat_map(|i| bench.seeds.iter().map(move |&s| (i, s))).collect();
    let per_job = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let img = &images[i];
            let masks: Vec<BinaryMask> = included.iter().map(|p| annotate(p, &img.image)).collect();
            let target = fuse_annotations(&masks, fusion_weights)?;
            let panel: Vec<(&ClinicianProfile, bool, BinaryMask)> = included
                .iter()
                .map(|p| (p, true))
                .chain(excluded.iter().map(|p| (p, false)))
                .map(|(p, inc)| (p, inc, annotate(p, &img.image)))
                .collect();
            let cfg = SessionConfig { max_iterations: iterations, ..job_config(session, seed, i, 0) };
            let driver = ClinicianProfile::new(0, 0.5, 1.0)?;
            let (_, state) = simulate(&cfg, &img.source, model, &driver, &target, SelectionNoise::default())?;
            let masks = y_app_sequence(&state.history, iterations)?;
            let mut rows = Vec::new();
            for (p, inc, gt) in &panel {
                let first = dice(&masks[0], gt)?;
                for (j, m) in masks.iter().enumerate() {
                    let d = dice(m, gt)?;
                    rows.push(AlignmentRow {
                        image_id: img.id.clone(),
                        seed,
                        iteration: j + 1,
                        clinician_id: p.id,
                        included: *inc,
                        dice: d,
                        delta: d - first,
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_job.into_iter().flatten().collect())
}

/// Mean Dice change from iteration 1 to `iteration`, per clinician:
/// `(clinician_id, included, mean_delta)`.
pub fn alignment_summary(rows: &[AlignmentRow], iteration: usize) -> Vec<(u32, bool, f64)> {
    let mut ids: Vec<(u32, bool)> = Vec::new();
    for r in rows {
        if !ids.contains(&(r.clinician_id, r.included)) {
            ids.push((r.clinician_id, r.included));
        }
    }
    ids.into_iter()
        .map(|(id, inc)| {
            let d = mean(rows.iter().filter(|r| r.clinician_id == id && r.iteration == iteration).map(|r| r.delta));
            (id, inc, d)
        })
        .collect()
}

pub fn write_alignment_csv<W: Write>(out: W, rows: &[AlignmentRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "seed", "iteration", "clinician_id", "included", "dice", "delta"])?;
    for r in rows {
        w.write_record([
            r.image_id.clone(),
            r.seed.to_string(),
            r.iteration.to_string(),
            r.clinician_id.to_string(),
            r.included.to_string(),
            format!("{:.6}", r.dice),
            format!("{:.6}", r.delta),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub variant: AdaptationMode,
    pub image_id: String,
    pub clinician_id: u32,
    pub seed: u64,
    /// Dice of `y_app` at each iteration up to the evaluated one.
    pub dices: Vec<f64>,
}

impl AblationRecord {
    pub fn final_dice(&self) -> f64 {
        *self.dices.last().expect("at least one iteration")
    }
}

/// Evaluates each variant with its own model for `iterations` rounds.
pub fn run_ablation(
    bench: &Benchmark,
    session: &SessionConfig,
    variants: &[(AdaptationMode, ModelParams)],
    profiles: &[ClinicianProfile],
    iterations: usize,
) -> Result<Vec<AblationRecord>> {
    if iterations == 0 {
        return Err(invalid("ablation needs at least one iteration"));
    }
    let images = bench.load()?;
    let jobs: Vec<(usize, usize, &ClinicianProfile, u64)> = (0..variants.len())
        .flat_map(|v| {
            let images = &images;
            (0..images.len()).flat_map(move |i| profiles.iter().flat_map(move |p| bench.seeds.iter().map(move |&s| (v, i, p, s))))
        })
        .collect();
    jobs.par_iter()
        .map(|&(v, i, profile, seed)| {
            let (mode, model) = &variants[v];
            let img = &images[i];
            let gt = annotate(profile, &img.image);
            let cfg = SessionConfig { max_iterations: iterations, mode: *mode, ..job_config(session, seed, i, profile.id) };
            let (_, state) = simulate(&cfg, &img.source, model, &tireless(profile), &gt, SelectionNoise::default())?;
            let dices = y_app_sequence(&state.history, iterations)?.iter().map(|m| dice(m, &gt)).collect::<Result<Vec<_>>>()?;
            Ok(AblationRecord { variant: *mode, image_id: img.id.clone(), clinician_id: profile.id, seed, dices })
        })
        .collect()
}

/// Mean final-iteration Dice per variant, in variant order.
pub fn ablation_summary(records: &[AblationRecord]) -> Vec<(AdaptationMode, f64)> {
    let mut modes: Vec<AdaptationMode> = Vec::new();
    for r in records {
        if !modes.contains(&r.variant) {
            modes.push(r.variant);
        }
    }
    modes.into_iter().map(|m| (m, mean(records.iter().filter(|r| r.variant == m).map(|r| r.final_dice())))).collect()
}

pub fn write_ablation_csv<W: Write>(out: W, records: &[AblationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "image_id", "clinician_id", "seed", "iteration", "dice"])?;
    for r in records {
        for (j, d) in r.dices.iter().enumerate() {
            w.write_record([
                r.variant.name().to_string(),
                r.image_id.clone(),
                r.clinician_id.to_string(),
                r.seed.to_string(),
                (j + 1).to_string(),
                format!("{d:.6}"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub image_id: String,
    pub seed: u64,
    /// Component whose mean predicts the clinician's mask best at the end.
    pub nearest_component: usize,
    /// Its mixture weight at the end.
    pub mass: f64,
    /// Its posterior responsibility given the final aggregate.
    pub responsibility: f64,
    pub first_dice: f64,
    pub final_dice: f64,
}

/// One clinician drives `iterations` selections without approving; records
/// where the mixture's weight ends up.
pub fn run_convergence(
    bench: &Benchmark,
    session: &SessionConfig,
    model: &ModelParams,
    profile: &ClinicianProfile,
    iterations: usize,
) -> Result<Vec<ConvergenceRecord>> {
    if iterations == 0 {
        return Err(invalid("convergence needs at least one iteration"));
    }
    let images = bench.load()?;
    let jobs: Vec<(usize, u64)> = (0..images.len()).flat_map(|i| bench.seeds.iter().map(move |&s| (i, s))).collect();
    jobs.par_iter()
        .map(|&(i, seed)| {
            let img = &images[i];
            let gt = annotate(profile, &img.image);
            let cfg = SessionConfig { max_iterations: iterations, ..job_config(session, seed, i, profile.id) };
            let (traj, state) = simulate(&cfg, &img.source, model, &tireless(profile), &gt, SelectionNoise::default())?;
            let prepared = model.segmenter.prepare(&img.image);
            let mut best = (0, f64::NEG_INFINITY);
            for m in 0..state.gmm.components() {
                let d = dice(&binarize(&prepared.predict(state.gmm.mean(m), state.e_p.values())?, 0.5), &gt)?;
                if d > best.1 {
                    best = (m, d);
                }
            }
            let after = derive_seed(cfg.seed, &[stream::SAMPLE, iterations as u64 + 1]);
            let fin = predict_step(&state.gmm, model, &state.image, &state.e_p, cfg.candidates, cfg.proposals, after, after)?;
            let post = responsibility_target(&state.gmm, &fin.y_app, &model.segmenter, &img.image, &state.e_p, RESPONSIBILITY_TEMPERATURE)?;
            Ok(ConvergenceRecord {
                image_id: img.id.clone(),
                seed,
                nearest_component: best.0,
                mass: state.gmm.weights()[best.0],
                responsibility: post.values()[best.0],
                first_dice: traj.steps[0].dice,
                final_dice: dice(&fin.y_app, &gt)?,
            })
        })
        .collect()
}

/// `(mean mass, mean responsibility, mean first Dice, mean final Dice)`.
pub fn convergence_summary(records: &[ConvergenceRecord]) -> (f64, f64, f64, f64) {
    (
        mean(records.iter().map(|r| r.mass)),
        mean(records.iter().map(|r| r.responsibility)),
        mean(records.iter().map(|r| r.first_dice)),
        mean(records.iter().map(|r| r.final_dice)),
    )
}

pub fn write_convergence_csv<W: Write>(out: W, records: &[ConvergenceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "seed", "nearest_component", "mass", "responsibility", "first_dice", "final_dice"])?;
    for r in records {
        w.write_record([
            r.image_id.clone(),
            r.seed.to_string(),
            r.nearest_component.to_string(),
            format!("{:.6}", r.mass),
            format!("{:.6}", r.responsibility),
            format!("{:.6}", r.first_dice),
            format!("{:.6}", r.final_dice),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// JSON document written next to every experiment's CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: String,
    pub config: serde_json::Value,
    pub checkpoint_hash: Option<String>,
    pub results: serde_json::Value,
}
