//! Trains the toy detector briefly, then evaluates it under the standard
//! JPEG and blur sweep.
//!
//! cargo run --release --example robustness_sweep

use deeclip::config::TrainConfig;
use deeclip::data::Degradation;
use deeclip::eval::{robustness_sweep, standard_sweep};
use deeclip::fixtures::PlantedBias;
use deeclip::train::{TensorSource, Trainer};

fn main() -> deeclip::Result<()> {
    let dir = tempfile::tempdir()?;
    let manifest = PlantedBias { subsets: vec!["left".into(), "right".into()], ..Default::default() }.write(dir.path())?;

    let mut cfg = TrainConfig::toy();
    cfg.train.lr = 1e-3;
    cfg.train.batch_size = 64;
    cfg.train.max_steps = Some(100);
    let mut trainer = Trainer::new(cfg)?;
    trainer.run(&TensorSource::from_manifest(&manifest, trainer.detector.image_size())?)?;

    let mut sweep = vec![Degradation::None];
    sweep.extend(standard_sweep());
    let report = robustness_sweep(&trainer.detector, &manifest, &sweep)?;
    for r in &report.reports {
        let subsets: Vec<String> = r.per_subset.iter().map(|(k, s)| format!("{k} {:.1}", s.accuracy)).collect();
        println!("{:<8} mAcc {:5.1}  ({})", r.degradation.to_string(), r.macc, subsets.join(", "));
    }
    if let Some(avg) = &report.average {
        println!("average over {} degraded settings: {:.2}", avg.settings.len(), avg.overall);
    }
    Ok(())
}
