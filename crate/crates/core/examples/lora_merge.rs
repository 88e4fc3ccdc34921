//! Injects LoRA adapters, perturbs them as training would, then folds them
//! into the base weights and checks the merged encoder agrees.
//!
//! cargo run --example lora_merge

use candle::{DType, Device};
use deeclip::backbone::{Backbone, BackboneConfig};
use deeclip::lora::{adapter_params, inject, merge_adapters, LoraConfig};
use deeclip::nn::{self, Mode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> deeclip::Result<()> {
    let cfg = BackboneConfig::toy();
    let mut backbone = Backbone::build_toy(&cfg, 0)?;
    let lora = LoraConfig { rank: 4, alpha: 8.0, ..LoraConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = inject(&mut backbone, &lora, &mut rng)?;
    println!("injected {n} adapters (rank {}, scaling {})", lora.rank, lora.scaling());

    for (name, p) in adapter_params(&backbone) {
        if name.ends_with(".B") {
            let dims = p.var().dims().to_vec();
            p.set(&nn::normal(&mut rng, dims.as_slice(), 0.05, DType::F32, &Device::Cpu)?)?;
        }
    }

    let mut merged = backbone.clone();
    merge_adapters(&mut merged)?;
    let x = nn::normal(&mut rng, (1, 3, cfg.image_size, cfg.image_size), 1.0, DType::F32, &Device::Cpu)?;
    let a = backbone.forward_with_taps(&x, &[1], &mut Mode::Eval)?;
    let b = merged.forward_with_taps(&x, &[1], &mut Mode::Eval)?;
    let diff = (a.deep().unwrap() - b.deep().unwrap())?.abs()?.max_all()?.to_scalar::<f32>()?;
    println!("adapter vs merged forward: max |diff| = {diff:.2e}");
    Ok(())
}
