//! Loads a CLIP vision tower from a safetensors file (canonical or
//! Hugging Face `vision_model.*` names) and builds a detector on it.
//!
//! cargo run --release --example load_clip -- path/to/model.safetensors
//!
//! Without an argument a small random encoder is saved and reloaded.

use candle::{DType, Device};
use deeclip::backbone::{Activation, Backbone, BackboneConfig};
use deeclip::config::{BackboneSection, BackboneSource, TrainConfig};
use deeclip::detector::Detector;
use deeclip::nn::{self, Mode};
use rand::SeedableRng;

fn main() -> deeclip::Result<()> {
    let tmp = tempfile::tempdir()?;
    let path = match std::env::args().nth(1) {
        Some(p) => p.into(),
        None => {
            let small = BackboneConfig {
                image_size: 56,
                patch_size: 14,
                depth: 4,
                width: 64,
                heads: 2,
                activation: Activation::QuickGelu,
                ..BackboneConfig::vit_l14()
            };
            let p = tmp.path().join("small.safetensors");
            Backbone::random_init(&small, 0, DType::F32, &Device::Cpu)?.save(&p)?;
            p
        }
    };

    let backbone = Backbone::load_pretrained(&path)?;
    let g = backbone.config().clone();
    println!("loaded {}: {} blocks, width {}, {}px / patch {}", path.display(), g.depth, g.width, g.image_size, g.patch_size);

    let mut cfg = TrainConfig::default();
    cfg.backbone = BackboneSection::from_geometry(BackboneSource::Pretrained, &g);
    cfg.fusion.taps = (0..g.depth).collect();
    cfg.fusion.heads = g.heads;
    let detector = Detector::assemble(backbone, &cfg, DType::F32)?;
    let census = detector.census();
    println!("trainable {} of {} ({:.2}%)", census.trainable, census.total, 100.0 * census.trainable_fraction());

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let x = nn::normal(&mut rng, (1, 3, g.image_size, g.image_size), 1.0, DType::F32, &Device::Cpu)?;
    let out = detector.forward(&x, &mut Mode::Eval)?;
    println!("F_visual {:?}, embedding {:?}", out.fused.visual.dims(), out.embeddings.dims());
    Ok(())
}
