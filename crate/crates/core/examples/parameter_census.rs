//! Builds the full ViT-L/14 detector with random weights and prints which
//! arrays train and how large they are.
//!
//! cargo run --release --example parameter_census

use deeclip::backbone::BackboneConfig;
use deeclip::config::{BackboneSection, BackboneSource, TrainConfig};
use deeclip::detector::Detector;

fn main() -> deeclip::Result<()> {
    let cfg = TrainConfig {
        backbone: BackboneSection::from_geometry(BackboneSource::Random, &BackboneConfig::vit_l14()),
        ..TrainConfig::default()
    };
    let census = Detector::build(&cfg)?.census();
    println!("{}", census.to_table());
    println!(
        "LoRA adapters: {:.3}% of all parameters",
        100.0 * census.adapter_numel() as f64 / census.total as f64
    );
    Ok(())
}
