//! Runs the toy encoder and prints the shape of every tapped block output.
//!
//! cargo run --example feature_taps

use candle::{DType, Device};
use deeclip::backbone::{Backbone, BackboneConfig};
use deeclip::nn::{self, Mode};
use rand::SeedableRng;

fn main() -> deeclip::Result<()> {
    let cfg = BackboneConfig::toy();
    let backbone = Backbone::build_toy(&cfg, 0)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let images = nn::normal(&mut rng, (2, 3, cfg.image_size, cfg.image_size), 1.0, DType::F32, &Device::Cpu)?;

    let stack = backbone.forward_with_taps(&images, &[0, 1], &mut Mode::Eval)?;
    println!("grid {}x{}, {} patch tokens of width {}", cfg.grid(), cfg.grid(), cfg.num_patches(), cfg.width);
    for (block, t) in stack.tap_indices.iter().zip(&stack.layers) {
        println!("block {block}: {:?}", t.dims());
    }
    println!("deep feature is block {}", stack.tap_indices.last().unwrap());
    Ok(())
}
