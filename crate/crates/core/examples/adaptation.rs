//! Feedback adaptation: encode a clicked point, let the adaptive blocks
//! propose a mixture update, and apply it under each adaptation mode.
//!
//! ```text
//! cargo run -p prefalign --example adaptation
//! ```

use prefalign::adapter::{adapt, encode_feedback};
use prefalign::mixture::GaussianMixture;
use prefalign::model::{Architecture, ModelParams};
use prefalign::proposals::{FeedbackSignal, Label};
use prefalign::session::AdaptationMode;

fn main() -> prefalign::Result<()> {
    let model = ModelParams::init(&Architecture::default(), 4);
    let gmm = GaussianMixture::init_uniform(16, 8, 0)?;
    let signal = FeedbackSignal { point: (20, 31), label: Label::Foreground };
    let e_p = encode_feedback(&signal, 64, 64, &model.encoder)?;
    println!("embedding ({} values): {:.3?}", e_p.len(), &e_p.values()[..4]);

    let delta = adapt(&gmm, &e_p, &model.adapter)?;
    for mode in AdaptationMode::ALL {
        let mut d = delta.clone();
        mode.mask(&mut d);
        let next = if d.is_zero() { gmm.clone() } else { gmm.apply_delta(&d, 0.1, 1e-6)? };
        let moved: f64 = next.means_flat().iter().zip(gmm.means_flat()).map(|(a, b)| (a - b).abs()).sum();
        let reweighted: f64 = next.weights().iter().zip(gmm.weights()).map(|(a, b)| (a - b).abs()).sum();
        println!("{:>16}: total mean shift {moved:.4}, total weight change {reweighted:.5}", mode.name());
    }
    Ok(())
}
