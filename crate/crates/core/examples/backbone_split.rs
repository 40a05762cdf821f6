//! Lists the layers of the default backbone and splits it at each
//! separating stage, printing the feature-map extent the keypoint head
//! would see.

use aknet::backbone::{build_backbone, split_at, BackboneConfig, Stage};
use aknet::model::ModelConfig;

fn main() -> aknet::Result<()> {
    let cfg = BackboneConfig::default();
    let layers = build_backbone(&cfg)?;
    for l in &layers {
        println!("{:<14} {:?}  {}→{}  stride {}", l.name, l.kind, l.in_channels, l.out_channels, l.stride);
    }
    println!();
    for stage in Stage::SPLITTABLE {
        let split = split_at(&layers, stage)?;
        let model = ModelConfig {
            split: stage,
            ..ModelConfig::default()
        };
        let (c, t, h, w) = model.split_extent()?;
        println!(
            "split {stage}: {} front layers, {} back layers, map {c}×{t}×{h}×{w}, tau {}",
            split.front.len(),
            split.back.len(),
            model.effective_tau()?
        );
    }
    Ok(())
}
