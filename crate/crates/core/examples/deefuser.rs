//! Fuses a random feature stack. At init the gate is zero and the output is
//! the deep feature; opening the gate mixes in the shallow layers.
//!
//! cargo run --example deefuser

use candle::{DType, Device, Tensor};
use deeclip::backbone::FeatureStack;
use deeclip::deefuser::{fuse, DeeFuserConfig, DeeFuserParams};
use deeclip::nn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> deeclip::Result<()> {
    let (layers, tokens, width) = (3, 4, 16);
    let cfg = DeeFuserConfig { width, heads: 4, ..DeeFuserConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = DeeFuserParams::init(&cfg, &mut rng, DType::F32, &Device::Cpu)?;
    let taps = (0..layers)
        .map(|_| nn::normal(&mut rng, (1, tokens, width), 1.0, DType::F32, &Device::Cpu))
        .collect::<deeclip::Result<Vec<_>>>()?;
    let stack = FeatureStack::new(taps, (0..layers).collect())?;

    let out = fuse(&stack, &params)?;
    let gap = (&out.visual - stack.deep().unwrap())?.abs()?.max_all()?.to_scalar::<f32>()?;
    println!("gate closed: max |F_visual - F_L| = {gap}");

    params.alpha1.set(&Tensor::full(0.5f32, width, &Device::Cpu)?)?;
    let out = fuse(&stack, &params)?;
    let gap = (&out.visual - stack.deep().unwrap())?.abs()?.max_all()?.to_scalar::<f32>()?;
    println!("alpha1 = 0.5: max |F_visual - F_L| = {gap:.4}");
    println!("shapes: cross {:?}, mlp {:?}, refined {:?}", out.cross.dims(), out.mlp.dims(), out.refined.dims());
    Ok(())
}
