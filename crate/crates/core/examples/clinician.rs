//! Simulated clinicians driving sessions to approval: each panel member
//! picks the proposal closest to their own labels and approves once the
//! aggregate is good enough.
//!
//! ```text
//! cargo run -p prefalign --release --example clinician -- [checkpoint.json]
//! ```

use prefalign::clinician::{simulate, SelectionNoise};
use prefalign::model::{Architecture, Checkpoint, ModelParams};
use prefalign::phantom::{annotate, ClinicianProfile};
use prefalign::session::{ImageSource, SessionConfig};

fn main() -> anyhow::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => Checkpoint::load(path.as_ref())?.params,
        None => ModelParams::init(&Architecture::default(), 0),
    };
    let source = ImageSource::Phantom { seed: 30, height: 64, width: 64 };
    let image = source.load()?;
    for profile in ClinicianProfile::training_panel() {
        let gt = annotate(&profile, &image);
        let config = SessionConfig { seed: profile.id as u64, ..SessionConfig::default() };
        let (trajectory, _) = simulate(&config, &source, &model, &profile, &gt, SelectionNoise::default())?;
        let dices: Vec<String> = trajectory.dices().iter().map(|d| format!("{d:.3}")).collect();
        println!("clinician {} ({:?} after {} iterations): {}", profile.id, trajectory.status, trajectory.iterations_used, dices.join(" "));
    }
    Ok(())
}
