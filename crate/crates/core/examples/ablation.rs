//! Which parts of the mixture update matter: trains one small model per
//! adaptation mode and compares Dice after three feedback iterations.
//!
//! ```text
//! cargo run -p prefalign --release --example ablation
//! ```

use prefalign::experiments::{ablation_summary, run_ablation, Benchmark, DataConfig};
use prefalign::phantom::ClinicianProfile;
use prefalign::session::{AdaptationMode, SessionConfig};
use prefalign::training::{train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let data = DataConfig { images: 16, height: 48, width: 48, ..DataConfig::default() }.generate()?;
    let base = TrainConfig { epochs: 2, learning_rate: 1e-3, rounds: 10, responsibility_temperature: 1.0, ..TrainConfig::default() };
    let mut variants = Vec::new();
    for mode in AdaptationMode::ALL {
        let report = train(&TrainConfig { mode, ..base.clone() }, &data)?;
        variants.push((mode, report.checkpoint.params));
    }
    let bench = Benchmark { images: 5, height: 48, width: 48, seeds: vec![0, 1], ..Benchmark::default() };
    let records = run_ablation(&bench, &SessionConfig::default(), &variants, &ClinicianProfile::training_panel(), 3)?;
    for (mode, d) in ablation_summary(&records) {
        println!("{:>16}: mean Dice at iteration 3 = {d:.4}", mode.name());
    }
    Ok(())
}
