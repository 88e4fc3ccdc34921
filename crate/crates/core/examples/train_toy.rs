//! Trains the toy detector on the planted-bias fixture and reports accuracy
//! and the embedding-space class separation.
//!
//! cargo run --example train_toy -- [section.key=value ...]

use deeclip::config::TrainConfig;
use deeclip::data::Label;
use deeclip::eval::class_distances;
use deeclip::fixtures::PlantedBias;
use deeclip::train::{moving_average, TensorSource, Trainer};

fn main() -> deeclip::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let base = TrainConfig::toy().to_toml_string()?;
    let mut cfg = TrainConfig::from_toml_str(&base, &overrides)?;
    cfg.train.max_steps.get_or_insert(200);

    let dir = tempfile::tempdir()?;
    let manifest = PlantedBias::default().write(dir.path())?;
    let mut trainer = Trainer::new(cfg)?;
    let source = TensorSource::from_manifest(&manifest, trainer.detector.image_size())?;

    let start = std::time::Instant::now();
    trainer.run(&source)?;
    let losses: Vec<f64> = trainer.history().iter().map(|m| m.l_final).collect();
    let ma = moving_average(&losses, 20);
    if std::env::var_os("DUMP").is_some() {
        for (i, l) in losses.iter().enumerate() {
            let m = i.checked_sub(19).map_or(f64::NAN, |j| ma[j]);
            println!("{i} {l:.4} {m:.4}");
        }
    }
    let rises = ma.windows(2).filter(|w| w[1] > w[0]).count();
    let worst = ma.windows(2).map(|w| w[1] - w[0]).fold(f64::MIN, f64::max);
    println!("{} steps in {:.1}s", losses.len(), start.elapsed().as_secs_f64());
    println!("loss {:.4} -> {:.4}; MA20 rises {rises}, largest {worst:.5}", losses[0], losses[losses.len() - 1]);
    println!("train accuracy {:.3}", trainer.accuracy(&source)?);

    let emb = trainer.detector.embeddings(&source.images)?;
    let rows: Vec<(Label, Vec<f64>)> = source.labels.iter().copied().zip(emb).collect();
    let (intra, inter) = class_distances(&rows);
    println!("mean distance intra {intra:.4} inter {inter:.4}");
    Ok(())
}
