//! Writes per-image embeddings to CSV and reports class separation.
//!
//! cargo run --example export_embeddings -- [out.csv]

use deeclip::config::TrainConfig;
use deeclip::detector::Detector;
use deeclip::eval::{class_distances, export_embeddings};
use deeclip::fixtures::PlantedBias;

fn main() -> deeclip::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "embeddings.csv".into());
    let dir = tempfile::tempdir()?;
    let manifest = PlantedBias { per_class: 8, ..Default::default() }.write(dir.path())?;
    let model = Detector::build(&TrainConfig::toy())?;
    let rows = export_embeddings(&model, &manifest, &out)?;
    println!("{} rows of width {} -> {out}", rows.len(), rows[0].embedding.len());
    let pairs: Vec<_> = rows.iter().map(|r| (r.label, r.embedding.clone())).collect();
    let (intra, inter) = class_distances(&pairs);
    println!("untrained model: intra {intra:.4}, inter {inter:.4}");
    Ok(())
}
