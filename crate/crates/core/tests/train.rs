mod common;

use common::{max_abs_diff, vec1};

use std::collections::BTreeMap;

use candle::Tensor;
use deeclip::config::TrainConfig;
use deeclip::data::{Label, Manifest};
use deeclip::detector::Detector;
use deeclip::fixtures::PlantedBias;
use deeclip::nn::Parameterized;
use deeclip::train::*;
use deeclip::Error;

fn fixture(per_class: usize) -> (tempfile::TempDir, Manifest, TensorSource) {
    let dir = tempfile::tempdir().unwrap();
    let m = PlantedBias { per_class, ..Default::default() }.write(dir.path()).unwrap();
    let src = TensorSource::from_manifest(&m, 32).unwrap();
    (dir, m, src)
}

fn cfg(steps: u64) -> TrainConfig {
    let mut c = TrainConfig::toy();
    c.train.max_steps = Some(steps);
    c.train.lr = 1e-3;
    c
}

fn snapshot(d: &Detector) -> BTreeMap<String, Vec<f32>> {
    d.named_params()
        .into_iter()
        .map(|(k, p)| (k, p.tensor().flatten_all().unwrap().to_dtype(candle::DType::F32).unwrap().to_vec1().unwrap()))
        .collect()
}

fn frozen(d: &Detector) -> Vec<(String, Vec<f32>)> {
    d.backbone
        .frozen_tensors()
        .into_iter()
        .map(|(k, t)| (k, t.flatten_all().unwrap().to_vec1().unwrap()))
        .collect()
}

fn losses(t: &Trainer) -> Vec<f64> {
    t.history().iter().map(|m| m.l_final).collect()
}

#[test]
fn same_seed_same_trajectory() {
    let (_d, _m, src) = fixture(8);
    let run = || {
        let mut t = Trainer::new(cfg(6)).unwrap();
        t.run(&src).unwrap();
        losses(&t)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 6);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-6);
    }
}

#[test]
fn resume_matches_straight_through() {
    let (dir, _m, src) = fixture(8);
    let mut c = cfg(10);
    c.lora.dropout = 0.1;
    let mut straight = Trainer::new(c.clone()).unwrap();
    let end = straight.run(&src).unwrap();

    let mut first = Trainer::new(TrainConfig { train: deeclip::config::TrainSection { max_steps: Some(4), ..c.train.clone() }, ..c.clone() }).unwrap();
    first.run(&src).unwrap();
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&first.checkpoint().unwrap(), &path).unwrap();
    let ckpt = load_checkpoint_for(&path, &c).unwrap();
    let mut resumed = Trainer::resume(c, &ckpt).unwrap();
    let resumed_end = resumed.run(&src).unwrap();

    let mut joined = losses(&first);
    joined.extend(losses(&resumed));
    let whole = losses(&straight);
    assert_eq!(joined.len(), whole.len());
    for (i, (x, y)) in joined.iter().zip(&whole).enumerate() {
        assert!((x - y).abs() <= 1e-6, "step {i}: {x} vs {y}");
    }
    assert_eq!(resumed_end.step, end.step);
    for (k, t) in &end.params {
        let d = max_abs_diff(&vec1(t), &vec1(&resumed_end.params[k]));
        assert!(d <= 1e-6, "{k}: {d}");
    }
}

#[test]
fn only_trainable_params_move() {
    let (_d, _m, src) = fixture(8);
    let mut t = Trainer::new(cfg(3)).unwrap();
    let before = snapshot(&t.detector);
    let backbone = frozen(&t.detector);
    t.run(&src).unwrap();
    let after = snapshot(&t.detector);
    assert_eq!(frozen(&t.detector), backbone);
    let moved = before.iter().filter(|(k, v)| after[*k] != **v).count();
    assert!(moved > before.len() / 2, "{moved} of {}", before.len());
}

#[test]
fn frozen_adapters_stay_fixed() {
    let (_d, _m, src) = fixture(8);
    let mut c = cfg(3);
    c.train.freeze_backbone_adapters = true;
    let mut t = Trainer::new(c).unwrap();
    assert!(t.optimizer().param_names().all(|n| !n.starts_with("lora.")));
    let before = snapshot(&t.detector);
    t.run(&src).unwrap();
    let after = snapshot(&t.detector);
    let lora: Vec<_> = before.keys().filter(|k| k.starts_with("lora.")).collect();
    assert!(!lora.is_empty());
    for k in lora {
        assert_eq!(before[k], after[k], "{k}");
    }
    assert_ne!(before["head.projection.weight"], after["head.projection.weight"]);
}

#[test]
fn zero_lambda_leaves_classifier_untouched() {
    let (_d, _m, src) = fixture(8);
    let mut c = cfg(4);
    c.loss.lambda = 0.0;
    c.train.weight_decay = 0.0;
    let mut t = Trainer::new(c).unwrap();
    let before = snapshot(&t.detector);
    t.run(&src).unwrap();
    let after = snapshot(&t.detector);
    for k in ["head.classifier.weight", "head.classifier.bias"] {
        assert_eq!(before[k], after[k], "{k}");
    }
    assert_ne!(before["head.projection.weight"], after["head.projection.weight"]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (dir, _m, src) = fixture(8);
    let mut t = Trainer::new(cfg(2)).unwrap();
    let ckpt = t.run(&src).unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, ckpt.config);
    assert_eq!(back.step, 2);
    assert_eq!(back.rng, ckpt.rng);
    assert_eq!(back.optimizer_steps, ckpt.optimizer_steps);
    for (a, b) in [(&ckpt.params, &back.params), (&ckpt.optim_m, &back.optim_m), (&ckpt.optim_v, &back.optim_v)] {
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
        for (k, x) in a {
            assert_eq!(vec1(x), vec1(&b[k]), "{k}");
        }
    }
    let model = Detector::from_checkpoint(&back).unwrap();
    let imgs = src.load(&[0, 1, 2]).unwrap();
    assert_eq!(model.probabilities(&imgs).unwrap(), t.detector.probabilities(&imgs).unwrap());
}

#[test]
fn incompatible_config_is_a_conflict() {
    let (dir, _m, src) = fixture(8);
    let mut t = Trainer::new(cfg(1)).unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&t.run(&src).unwrap(), &path).unwrap();
    let mut other = cfg(1);
    other.fusion.taps = vec![1, 0];
    assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::ConfigConflict(_))));
    let mut rank = cfg(1);
    rank.lora.rank = 2;
    assert!(matches!(load_checkpoint_for(&path, &rank), Err(Error::ConfigConflict(_))));
    let mut longer = cfg(50);
    longer.train.lr = 1e-4;
    assert!(load_checkpoint_for(&path, &longer).is_ok());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (dir, _m, src) = fixture(8);
    let mut t = Trainer::new(cfg(1)).unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&t.run(&src).unwrap(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::Checkpoint(_))));
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"\x08\x00\x00\x00\x00\x00\x00\x00{garbage").unwrap();
    assert!(matches!(load_checkpoint(&junk), Err(Error::Checkpoint(_))));
    assert!(matches!(load_checkpoint(dir.path().join("absent.ckpt")), Err(Error::Checkpoint(_) | Error::Io(_))));
}

#[test]
fn nan_weights_report_divergence() {
    let (dir, _m, src) = fixture(8);
    let mut c = cfg(6);
    c.train.checkpoint_dir = Some(dir.path().join("ck"));
    c.train.checkpoint_every = 2;
    let mut t = Trainer::new(c).unwrap();
    t.train_step(&src).unwrap();
    t.train_step(&src).unwrap();
    // Trigger the periodic save through run() on a short horizon.
    t.cfg.train.max_steps = Some(3);
    t.run(&src).unwrap();
    let (_, p) = t.detector.named_params().into_iter().find(|(k, _)| k == "head.classifier.bias").unwrap();
    p.set(&Tensor::new(&[f32::NAN], &candle::Device::Cpu).unwrap()).unwrap();
    match t.train_step(&src) {
        Err(Error::Divergence { step, last_good, .. }) => {
            assert_eq!(step, 3);
            assert!(last_good.unwrap().ends_with("final.ckpt"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn single_class_data_is_rejected() {
    let (_d, m, _src) = fixture(4);
    let real = Manifest { entries: m.entries.iter().filter(|e| e.label == Label::Real).cloned().collect() };
    assert!(matches!(train(&cfg(1), &real), Err(Error::Config(_))));
}

#[test]
fn metrics_log_has_one_line_per_step() {
    let (dir, m, _src) = fixture(4);
    let mut c = cfg(3);
    c.train.checkpoint_dir = Some(dir.path().join("ck"));
    let ckpt = train(&c, &m).unwrap();
    assert_eq!(ckpt.step, 3);
    let log = std::fs::read_to_string(dir.path().join("ck/metrics.jsonl")).unwrap();
    let lines: Vec<StepMetrics> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().map(|m| m.step).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(dir.path().join("ck/final.ckpt").exists());
}

#[test]
fn run_length_follows_epochs() {
    let (_d, _m, src) = fixture(8);
    let mut c = cfg(0);
    c.train.max_steps = None;
    c.train.epochs = 2;
    let t = Trainer::new(c).unwrap();
    assert_eq!(t.steps_per_epoch(src.len()), 2);
    assert_eq!(t.total_steps(src.len()), 4);
}
