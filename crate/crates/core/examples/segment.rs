//! One preference-conditioned segmentation step: sample latents, segment
//! the image once per latent, then take the per-pixel majority.
//!
//! ```text
//! cargo run -p prefalign --example segment
//! ```

use prefalign::adapter::InteractionEmbedding;
use prefalign::mixture::GaussianMixture;
use prefalign::model::{Architecture, ModelParams};
use prefalign::phantom::generate_phantom;
use prefalign::segmenter::{aggregate_majority, predict_batch};

fn main() -> prefalign::Result<()> {
    let model = ModelParams::init(&Architecture::default(), 0);
    let image = generate_phantom(3, 64, 64)?;
    let gmm = GaussianMixture::init_uniform(16, 8, 0)?;
    let e_p = InteractionEmbedding::zeros(16);

    let samples = gmm.sample(48, 1)?;
    let candidates = predict_batch(&model.segmenter, &image, &samples, &e_p)?;
    let areas: Vec<f64> = candidates.iter().map(|c| c.data().iter().sum::<f64>()).collect();
    let (lo, hi) = areas.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!("48 candidates, soft foreground area from {lo:.0} to {hi:.0} pixels");

    let (mean_soft, y_app) = aggregate_majority(&candidates)?;
    println!("majority mask: {} pixels; mean soft area {:.0}", y_app.count_ones(), mean_soft.data().iter().sum::<f64>());
    println!("RLE: {}", serde_json::to_string(&y_app.to_rle()).expect("rle serializes"));
    Ok(())
}
