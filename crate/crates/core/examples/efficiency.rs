//! How many feedback iterations a clinician needs to reach a target Dice,
//! with adaptation switched off and on. A target missed within the cap
//! counts as ten iterations.
//!
//! ```text
//! cargo run -p prefalign --release --example efficiency -- [checkpoint.json]
//! ```

use prefalign::experiments::{efficiency_summary, run_efficiency, Benchmark, EfficiencyConfig};
use prefalign::model::{Architecture, Checkpoint, ModelParams};
use prefalign::phantom::ClinicianProfile;
use prefalign::session::{AdaptationMode, SessionConfig};

fn main() -> anyhow::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => Checkpoint::load(path.as_ref())?.params,
        None => {
            eprintln!("no checkpoint given, using an untrained model");
            ModelParams::init(&Architecture::default(), 0)
        }
    };
    let bench = Benchmark { images: 5, seeds: vec![0], ..Benchmark::default() };
    for mode in [AdaptationMode::Disabled, AdaptationMode::Full] {
        let session = SessionConfig { mode, ..SessionConfig::default() };
        let records = run_efficiency(&bench, &session, &model, &ClinicianProfile::training_panel(), &EfficiencyConfig::default())?;
        for (target, iterations) in efficiency_summary(&records) {
            println!("{:>12}  target {target:.2}: {iterations:.2} iterations on average", mode.name());
        }
    }
    Ok(())
}
