//! A hand-driven interactive session: look at the proposals, pick one,
//! repeat, approve; then save the session and replay it bit-exactly.
//!
//! ```text
//! cargo run -p prefalign --example session
//! ```

use prefalign::metrics::dice;
use prefalign::model::{Architecture, ModelParams};
use prefalign::phantom::annotate_at;
use prefalign::session::{ImageSource, SessionConfig, SessionDoc, SessionState};

fn main() -> prefalign::Result<()> {
    let model = ModelParams::init(&Architecture::default(), 0);
    let source = ImageSource::Phantom { seed: 12, height: 64, width: 64 };
    let config = SessionConfig { seed: 5, ..SessionConfig::default() };
    let mut state = SessionState::start(config, source, None, &model)?;
    // stands in for what the person at the screen has in mind
    let wanted = annotate_at(0.4, &state.image);

    for _ in 0..3 {
        let iteration = state.iteration;
        let pred = state.step_segment(&model)?;
        let scores: Vec<f64> = pred.proposals.iter().map(|p| dice(&p.representative_binary, &wanted)).collect::<Result<_, _>>()?;
        let pick = scores.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
        println!(
            "iteration {}: current Dice {:.3}, proposals {:.3?} -> choose {pick}",
            iteration,
            dice(&pred.y_app, &wanted)?,
            scores
        );
        state.apply_selection(pick, &model)?;
    }
    state.step_segment(&model)?;
    let final_mask = state.approve()?;
    println!("approved at iteration {} with Dice {:.3}", state.iteration, dice(&final_mask, &wanted)?);

    let json = state.to_doc(&model.content_hash()).to_json()?;
    let replayed = SessionDoc::from_json(&json)?.replay(&model)?;
    assert_eq!(replayed.history, state.history);
    println!("saved {} bytes of history; replay reproduced all {} iterations", json.len(), replayed.history.len());
    Ok(())
}
