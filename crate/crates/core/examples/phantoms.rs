//! Synthetic images and annotators: each simulated clinician labels the
//! same phantom at a different intensity boundary, and the labels can be
//! fused into one target.
//!
//! ```text
//! cargo run -p prefalign --example phantoms -- /tmp/phantoms
//! ```

use prefalign::metrics::dice;
use prefalign::phantom::{annotate, fuse_annotations, generate_phantom, ClinicianProfile, PhantomDataset};

fn main() -> anyhow::Result<()> {
    let image = generate_phantom(1, 64, 64)?;
    println!("phantom 64x64, mean intensity {:.4}", image.mean_intensity());

    let panel = ClinicianProfile::training_panel();
    let masks: Vec<_> = panel.iter().map(|p| annotate(p, &image)).collect();
    for (p, m) in panel.iter().zip(&masks) {
        println!("clinician {} (boundary {:.2}): {} foreground pixels", p.id, p.threshold, m.count_ones());
    }
    let fused = fuse_annotations(&masks, None)?;
    for (p, m) in panel.iter().zip(&masks) {
        println!("Dice(fused, clinician {}) = {:.3}", p.id, dice(&fused, m)?);
    }

    if let Some(dir) = std::env::args().nth(1) {
        let data = PhantomDataset::generate(8, 64, 64, 7, &panel)?;
        data.export(std::path::Path::new(&dir))?;
        println!("wrote {} images with annotations to {dir}", data.len());
    }
    Ok(())
}
