//! One clinician, fifty feedback iterations: where does the mixture's mass
//! end up, and how much does the aggregate improve?
//!
//! ```text
//! cargo run -p prefalign --release --example convergence -- [checkpoint.json]
//! ```

use prefalign::experiments::{convergence_summary, run_convergence, Benchmark};
use prefalign::model::{Architecture, Checkpoint, ModelParams};
use prefalign::phantom::ClinicianProfile;
use prefalign::session::SessionConfig;

fn main() -> anyhow::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => Checkpoint::load(path.as_ref())?.params,
        None => {
            eprintln!("no checkpoint given, using an untrained model");
            ModelParams::init(&Architecture::default(), 0)
        }
    };
    let clinician = ClinicianProfile::new(1, 0.35, 1.0)?;
    let bench = Benchmark { images: 5, seeds: vec![0], ..Benchmark::default() };
    let records = run_convergence(&bench, &SessionConfig::default(), &model, &clinician, 50)?;
    for r in &records {
        println!(
            "{}: nearest component {:>2}, weight {:.3}, Dice {:.3} -> {:.3}",
            r.image_id, r.nearest_component, r.mass, r.first_dice, r.final_dice
        );
    }
    let (mass, resp, first, last) = convergence_summary(&records);
    println!("mean weight {mass:.3}, mean responsibility {resp:.3}, Dice {first:.3} -> {last:.3}");
    Ok(())
}
