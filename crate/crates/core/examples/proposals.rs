//! From candidates to correction proposals: cluster the candidate masks,
//! build one representative per cluster, and turn a chosen proposal into a
//! feedback point drawn from where it diverges most.
//!
//! ```text
//! cargo run -p prefalign --example proposals
//! ```

use prefalign::adapter::InteractionEmbedding;
use prefalign::mixture::GaussianMixture;
use prefalign::model::{Architecture, ModelParams};
use prefalign::phantom::generate_phantom;
use prefalign::proposals::{build_proposals, diff_points, sample_feedback};
use prefalign::segmenter::{aggregate_majority, predict_batch};

fn main() -> prefalign::Result<()> {
    let model = ModelParams::init(&Architecture::default(), 0);
    let image = generate_phantom(5, 64, 64)?;
    let gmm = GaussianMixture::init_uniform(16, 8, 0)?;
    let candidates = predict_batch(&model.segmenter, &image, &gmm.sample(48, 2)?, &InteractionEmbedding::zeros(16))?;
    let (mean_soft, y_app) = aggregate_majority(&candidates)?;

    let proposals = build_proposals(&candidates, &y_app, 4, 9)?;
    for p in &proposals {
        println!(
            "cluster {}: {} members, adds {} pixels, removes {}",
            p.cluster_id,
            p.member_count,
            p.diff.additions().count_ones(),
            p.diff.removals().count_ones()
        );
    }

    let chosen = &proposals[0];
    let pdiff = diff_points(&chosen.representative_soft, &mean_soft, 0.9)?;
    let signal = sample_feedback(&pdiff, &chosen.representative_binary, 11)?;
    println!("{} divergence points; feedback at {:?} labelled {:?}", pdiff.len(), signal.point, signal.label);
    Ok(())
}
