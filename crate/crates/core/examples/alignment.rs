//! Aligning to a group: sessions are driven toward the fused labels of
//! three clinicians, and Dice is tracked against all five.
//!
//! ```text
//! cargo run -p prefalign --release --example alignment -- [checkpoint.json]
//! ```

use prefalign::experiments::{alignment_panel, alignment_summary, run_alignment, Benchmark};
use prefalign::model::{Architecture, Checkpoint, ModelParams};
use prefalign::session::SessionConfig;

fn main() -> anyhow::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => Checkpoint::load(path.as_ref())?.params,
        None => {
            eprintln!("no checkpoint given, using an untrained model");
            ModelParams::init(&Architecture::default(), 0)
        }
    };
    let (included, excluded) = alignment_panel();
    let bench = Benchmark { images: 5, seeds: vec![0], ..Benchmark::default() };
    let rows = run_alignment(&bench, &SessionConfig::default(), &model, &included, &excluded, 6, None)?;
    for (id, inc, delta) in alignment_summary(&rows, 6) {
        let role = if inc { "included" } else { "excluded" };
        println!("clinician {id} ({role}): Dice change after 6 iterations {delta:+.4}");
    }
    Ok(())
}
