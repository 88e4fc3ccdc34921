//! Builds triplets for a labeled batch and evaluates the combined objective.
//!
//! cargo run --example triplet_losses

use candle::{DType, Device, Tensor};
use deeclip::data::Label;
use deeclip::losses::{bce_with_logits, total_loss, triplet_loss_indexed, LossConfig};
use deeclip::nn;
use deeclip::sampling::build_triplets;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> deeclip::Result<()> {
    let labels = [Label::Real, Label::Fake, Label::Real, Label::Fake, Label::Fake, Label::Real];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = build_triplets(&labels, &mut rng);
    for t in &batch.triples {
        println!("anchor {} positive {} negative {}", t.anchor, t.positive, t.negative);
    }

    let embeddings = nn::normal(&mut rng, (labels.len(), 4), 1.0, DType::F64, &Device::Cpu)?;
    let logits = nn::normal(&mut rng, labels.len(), 1.0, DType::F64, &Device::Cpu)?;
    let y: Vec<f64> = labels.iter().map(|l| l.as_f64()).collect();
    let cfg = LossConfig::default();
    let l_triplet = triplet_loss_indexed(&embeddings, &batch, &cfg)?;
    let l_bce = bce_with_logits(&logits, &Tensor::new(y.as_slice(), &Device::Cpu)?)?;
    let l_final = total_loss(&l_triplet, &l_bce, &cfg)?;
    let v = |t: &Tensor| t.to_scalar::<f64>();
    println!(
        "triplet {:.4} + {} x bce {:.4} = {:.4}",
        v(&l_triplet)?,
        cfg.lambda,
        v(&l_bce)?,
        v(&l_final)?
    );
    Ok(())
}
