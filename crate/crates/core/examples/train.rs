//! Two-stage training on a small phantom set, written out as a checkpoint
//! and a per-step loss table.
//!
//! ```text
//! cargo run -p prefalign --release --example train -- /tmp/prefalign-train
//! ```

use std::fs::File;
use std::path::PathBuf;

use prefalign::experiments::DataConfig;
use prefalign::model::Architecture;
use prefalign::training::{train, write_losses_csv, TrainConfig};

fn main() -> anyhow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "train-out".into()));
    std::fs::create_dir_all(&out)?;
    let data = DataConfig { images: 24, height: 32, width: 32, ..DataConfig::default() }.generate()?;
    let config = TrainConfig {
        epochs: 3,
        learning_rate: 1e-3,
        candidates: 16,
        arch: Architecture { trainable_segmenter: true, ..Architecture::default() },
        ..TrainConfig::default()
    };
    let report = train(&config, &data)?;
    for (epoch, (pseg, paf)) in report.epoch_means(|r| r.pseg_ce).iter().zip(report.epoch_means(|r| r.paf_ce)).enumerate() {
        println!("epoch {epoch}: segmentation CE {pseg:.4}, adaptation CE {paf:.4}");
    }
    report.checkpoint.save(&out.join("checkpoint.json"))?;
    write_losses_csv(File::create(out.join("losses.csv"))?, &report.losses)?;
    println!("checkpoint {} written to {}", report.checkpoint.hash(), out.display());
    Ok(())
}
