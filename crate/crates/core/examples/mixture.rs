//! The preference distribution on its own: build the uniform mixture, draw
//! latents, score them, and nudge the mixture with a hand-made update.
//!
//! ```text
//! cargo run -p prefalign --example mixture
//! ```

use prefalign::mixture::{GaussianMixture, GmmDelta};

fn main() -> prefalign::Result<()> {
    let gmm = GaussianMixture::init_uniform(16, 8, 0)?;
    println!("M = {}, D = {}, weights all {:.4}", gmm.components(), gmm.dim(), gmm.weights()[0]);

    let samples = gmm.sample(48, 42)?;
    for s in samples.iter().take(3) {
        let r = gmm.responsibilities(&s.z)?;
        let top = r.iter().cloned().fold(0.0, f64::max);
        println!(
            "sample from component {:?}: log p(z) = {:.3}, largest responsibility {:.3}",
            s.component,
            gmm.log_density(&s.z)?,
            top
        );
    }

    // favour component 3 and pull every mean half a unit along the first axis
    let mut delta = GmmDelta::zeros(16, 8);
    delta.d_weight_logits[3] = 2.0;
    for m in 0..16 {
        delta.d_means[m * 8] = 0.5;
    }
    let moved = gmm.apply_delta(&delta, 1.0, 1e-6)?;
    moved.check_invariants(1e-6)?;
    println!("after the update: weight of component 3 = {:.4}, mean[0][0] {:.3} -> {:.3}", moved.weights()[3], gmm.mean(0)[0], moved.mean(0)[0]);
    println!("{}", serde_json::to_string(&GaussianMixture::init_uniform(2, 2, 0)?).expect("mixture serializes"));
    Ok(())
}
