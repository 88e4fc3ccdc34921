//! Acceptance run: one PASS/FAIL line per criterion, each against its time
//! budget. Exits nonzero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use candle::{DType, Tensor};
use common::*;
use deeclip::backbone::{Backbone, BackboneConfig};
use deeclip::config::{BackboneSection, BackboneSource, TrainConfig};
use deeclip::data::{degrade_blur, degrade_jpeg, gaussian_kernel, Degradation, Label, Manifest, ManifestEntry};
use deeclip::deefuser::fuse;
use deeclip::detector::Detector;
use deeclip::eval::{class_distances, evaluate, robustness_sweep, standard_sweep, Scorer};
use deeclip::fixtures::{natural_image, PlantedBias};
use deeclip::head::{classify, embed, pool, HeadConfig, HeadParams, Pooling};
use deeclip::losses::{bce_with_logits, triplet_loss, triplet_loss_indexed, triplet_terms, LossConfig};
use deeclip::lora::{adapter_params, inject, merge_adapters, LoraConfig, LoraTarget};
use deeclip::nn::{self, Mode, Param, Parameterized};
use deeclip::sampling::build_triplets;
use deeclip::train::{moving_average, TensorSource, Trainer};
use image::{DynamicImage, Rgb32FImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn identity_at_init() -> Outcome {
    for seed in 0..100u64 {
        let (l, n, d, heads) = [(2, 4, 8, 2), (3, 4, 8, 2), (4, 5, 16, 4)][seed as usize % 3];
        let p = fuser(d, heads, seed, DType::F32);
        ensure!(vec1(&p.alpha1.tensor()).iter().all(|&a| a == 0.0), "alpha1 not zero at init");
        let stack = random_stack(l, 2, n, d, 1000 + seed, DType::F32);
        let out = fuse(&stack, &p).map_err(|e| e.to_string())?;
        ensure!(vec1(&out.visual) == vec1(stack.deep().unwrap()), "stack {seed} differs from F_L");
    }
    Ok("100 stacks bit-identical".into())
}

fn lora_neutral_and_merge() -> Outcome {
    let toy = || Backbone::build_toy(&BackboneConfig::toy(), 7).unwrap();
    let images = |seed, b| nn::normal(&mut rng(seed), (b, 3, 32, 32), 1.0, DType::F32, &cpu()).unwrap();
    let base = toy();
    let mut fresh = base.clone();
    let all = LoraConfig {
        targets: vec![LoraTarget::Query, LoraTarget::Key, LoraTarget::Value, LoraTarget::Output, LoraTarget::Fc1, LoraTarget::Fc2],
        ..LoraConfig::default()
    };
    inject(&mut fresh, &all, &mut rng(1)).unwrap();
    for seed in 0..100 {
        let x = images(seed, 1);
        let a = base.forward_with_taps(&x, &[0, 1], &mut Mode::Eval).unwrap();
        let b = fresh.forward_with_taps(&x, &[0, 1], &mut Mode::Eval).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            ensure!(vec1(la) == vec1(lb), "fresh adapters changed the output (input {seed})");
        }
    }
    let mut adapted = toy();
    inject(&mut adapted, &LoraConfig::default(), &mut rng(2)).unwrap();
    let mut r = rng(3);
    for (name, p) in adapter_params(&adapted) {
        if name.ends_with(".B") {
            let dims = p.var().dims().to_vec();
            p.set(&nn::normal(&mut r, dims.as_slice(), 0.05, DType::F32, &cpu()).unwrap()).unwrap();
        }
    }
    let mut merged = adapted.clone();
    merge_adapters(&mut merged).unwrap();
    let mut worst: f64 = 0.0;
    let mut visible: f64 = 0.0;
    for seed in 0..100 {
        let x = images(100 + seed, 1);
        let a = adapted.forward_with_taps(&x, &[1], &mut Mode::Eval).unwrap();
        let m = merged.forward_with_taps(&x, &[1], &mut Mode::Eval).unwrap();
        let p = base.forward_with_taps(&x, &[1], &mut Mode::Eval).unwrap();
        worst = worst.max(max_abs_diff(&vec1(a.deep().unwrap()), &vec1(m.deep().unwrap())));
        visible = visible.max(max_abs_diff(&vec1(a.deep().unwrap()), &vec1(p.deep().unwrap())));
    }
    ensure!(worst <= 1e-5, "merged vs adapter max diff {worst:e}");
    ensure!(visible > 1e-3, "adapter perturbation invisible ({visible:e})");
    Ok(format!("merge max diff {worst:.2e} over 100 inputs"))
}

fn gradient_suite() -> Outcome {
    const H: f64 = 1e-4;
    let mut report = Vec::new();
    let (n, d, l, heads, d_proj) = (4, 8, 3, 2, 4);

    let p = fuser(d, heads, 1, DType::F64);
    randomize(&p, 2, 0.4);
    let stack = random_stack(l, 1, n, d, 3, DType::F64);
    let probe = nn::normal(&mut rng(4), (1, n, d), 1.0, DType::F64, &cpu()).unwrap();
    let loss = || (fuse(&stack, &p).unwrap().visual * &probe).unwrap().sum_all().unwrap();
    report.extend(grad_check(&p.named_params(), &loss, H));

    let cfg = HeadConfig { width: d, proj_dim: d_proj, pooling: Pooling::Mean, normalize: false };
    let h = HeadParams::init(&cfg, &mut rng(10), DType::F64, &cpu()).unwrap();
    randomize(&h, 11, 0.5);
    let tokens = nn::normal(&mut rng(12), (3, n, d), 1.0, DType::F64, &cpu()).unwrap();
    let probe = nn::normal(&mut rng(13), (3, d_proj), 1.0, DType::F64, &cpu()).unwrap();
    let labels = Tensor::new(&[0.0f64, 1.0, 1.0], &cpu()).unwrap();
    let loss = || {
        let e = embed(&pool(&tokens, Pooling::Mean).unwrap(), &h).unwrap();
        let z = classify(&e, &h).unwrap();
        ((e * &probe).unwrap().sum_all().unwrap() + bce_with_logits(&z, &labels).unwrap()).unwrap()
    };
    report.extend(grad_check(&h.named_params(), &loss, H).into_iter().map(|(k, v)| (format!("head:{k}"), v)));

    let lcfg = LossConfig { margin: 0.5, ..LossConfig::default() };
    let mut r = rng(21);
    let mk = |r: &mut ChaCha8Rng| Param::new(nn::normal(r, (6, d_proj), 1.0, DType::F64, &cpu()).unwrap(), true, false).unwrap();
    let (a, pos, neg) = (mk(&mut r), mk(&mut r), mk(&mut r));
    let raw = triplet_terms(&a.tensor(), &pos.tensor(), &neg.tensor(), &LossConfig { hinge: false, ..lcfg.clone() }).unwrap();
    ensure!(vec1(&raw).iter().all(|t| t.abs() > 1e-3), "triplet fixture too close to the hinge");
    let loss = || triplet_loss(&a.tensor(), &pos.tensor(), &neg.tensor(), &lcfg).unwrap();
    let trip = vec![("triplet:anchor".to_string(), a.clone()), ("triplet:positive".into(), pos.clone()), ("triplet:negative".into(), neg.clone())];
    report.extend(grad_check(&trip, &loss, H));

    let z = Param::new(Tensor::new(&[-12.0f64, -2.5, -0.3, 0.0, 0.7, 3.0, 14.0], &cpu()).unwrap(), true, false).unwrap();
    let y = Tensor::new(&[0.0f64, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0], &cpu()).unwrap();
    let loss = || bce_with_logits(&z.tensor(), &y).unwrap();
    report.extend(grad_check(&[("bce:logits".into(), z.clone())], &loss, H));

    let (name, worst) = report.iter().cloned().fold((String::new(), 0.0), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
    ensure!(worst <= 1e-4, "{name}: relative error {worst:e}");
    Ok(format!("{} arrays, worst {worst:.2e} ({name})", report.len()))
}

fn loss_oracles() -> Outcome {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(2..12);
        let labels: Vec<Label> = (0..n).map(|_| if r.random_bool(0.5) { Label::Fake } else { Label::Real }).collect();
        let dim = r.random_range(1..6);
        let e = nn::normal(&mut r, (n, dim), 1.0, DType::F64, &cpu()).unwrap();
        let batch = build_triplets(&labels, &mut r);
        let cfg = LossConfig { margin: r.random_range(0.0..2.0), hinge: r.random_bool(0.5), ..LossConfig::default() };
        let got = scalar(&triplet_loss_indexed(&e, &batch, &cfg).unwrap());
        let triples: Vec<_> = batch.triples.iter().map(|t| (t.anchor, t.positive, t.negative)).collect();
        let want = ref_triplet(&mat(&e), &triples, cfg.margin, cfg.hinge);
        worst = worst.max((got - want).abs());
        if cfg.hinge {
            ensure!(got >= 0.0, "hinged triplet negative: {got}");
        }
    }
    ensure!(worst == 0.0, "triplet vs loop: {worst:e}");
    for y in [0.0f64, 1.0] {
        let l = scalar(&bce_with_logits(&Tensor::new(&[0.0f64], &cpu()).unwrap(), &Tensor::new(&[y], &cpu()).unwrap()).unwrap());
        ensure!((l - std::f64::consts::LN_2).abs() <= 1e-9, "BCE(0) = {l}");
    }
    let mut bce_worst: f64 = 0.0;
    for i in 0..=3000 {
        let z = -15.0 + 30.0 * i as f64 / 3000.0;
        for y in [0.0, 1.0] {
            let got = scalar(&bce_with_logits(&Tensor::new(&[z], &cpu()).unwrap(), &Tensor::new(&[y], &cpu()).unwrap()).unwrap());
            bce_worst = bce_worst.max((got - naive_bce(z, y)).abs());
        }
    }
    ensure!(bce_worst <= 1e-6, "stable vs naive BCE: {bce_worst:e}");
    Ok(format!("triplet equal to the loop on 1000 batches, BCE diff {bce_worst:.1e}"))
}

fn sampling_properties() -> Outcome {
    let mut r = rng(7);
    let mut triples = 0usize;
    for _ in 0..10_000 {
        let n = r.random_range(0..24);
        let labels: Vec<Label> = (0..n).map(|_| if r.random_bool(0.5) { Label::Fake } else { Label::Real }).collect();
        let seed: u64 = r.random();
        let batch = build_triplets(&labels, &mut ChaCha8Rng::seed_from_u64(seed));
        for t in &batch.triples {
            ensure!(
                t.anchor != t.positive
                    && labels[t.anchor] == labels[t.positive]
                    && labels[t.anchor] != labels[t.negative],
                "bad triple {t:?} for {labels:?}"
            );
        }
        ensure!(batch.is_valid_for(&labels), "invalid batch");
        ensure!(batch == build_triplets(&labels, &mut ChaCha8Rng::seed_from_u64(seed)), "not deterministic");
        let single = labels.iter().all(|&l| l == labels.first().copied().unwrap_or(Label::Real));
        if single {
            ensure!(batch.is_empty(), "single-class batch produced triples");
        }
        triples += batch.len();
    }
    Ok(format!("10000 label vectors, {triples} triples checked"))
}

struct OverfitRun {
    intra: f64,
    inter: f64,
}

static OVERFIT: Mutex<Option<OverfitRun>> = Mutex::new(None);

fn overfit_sanity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = PlantedBias::default().write(dir.path()).map_err(|e| e.to_string())?;
    ensure!(manifest.len() == 64, "fixture has {} images", manifest.len());
    let mut cfg = TrainConfig::toy();
    cfg.train.lr = 1e-3;
    cfg.train.batch_size = 64;
    cfg.train.max_steps = Some(200);
    let mut t = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let source = TensorSource::from_manifest(&manifest, t.detector.image_size()).map_err(|e| e.to_string())?;
    t.run(&source).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = t.history().iter().map(|m| m.l_final).collect();
    let ma = moving_average(&losses, 20);
    let rises = ma.windows(2).filter(|w| w[1] > w[0]).count();
    let accuracy = t.accuracy(&source).map_err(|e| e.to_string())?;
    let emb = t.detector.embeddings(&source.images).map_err(|e| e.to_string())?;
    let rows: Vec<(Label, Vec<f64>)> = source.labels.iter().copied().zip(emb).collect();
    let (intra, inter) = class_distances(&rows);
    *OVERFIT.lock().unwrap() = Some(OverfitRun { intra, inter });
    ensure!(losses.len() == 200, "ran {} steps", losses.len());
    ensure!(accuracy >= 0.95, "train accuracy {accuracy:.3}");
    ensure!(rises == 0, "MA20 rose at {rises} windows");
    Ok(format!("accuracy {:.1}%, loss {:.3} -> {:.3}, MA20 non-increasing", 100.0 * accuracy, losses[0], losses[199]))
}

fn metric_space_effect() -> Outcome {
    let guard = OVERFIT.lock().unwrap();
    let run = guard.as_ref().ok_or("overfit run did not complete")?;
    ensure!(run.intra < run.inter, "intra {:.4} >= inter {:.4}", run.intra, run.inter);
    Ok(format!("intra {:.4} < inter {:.4}", run.intra, run.inter))
}

fn degradation_determinism() -> Outcome {
    let img = natural_image(128, 96, 0);
    let mut png = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(img.clone()).write_to(&mut png, image::ImageFormat::Png).unwrap();
    let png = png.into_inner();
    for q in [80, 70, 60] {
        ensure!(degrade_jpeg(&png, q).unwrap() == degrade_jpeg(&png, q).unwrap(), "jpeg q{q} not byte-identical");
    }
    let float = DynamicImage::ImageRgb8(img).to_rgb32f();
    let mean = |im: &Rgb32FImage| im.as_raw().iter().map(|&v| v as f64).sum::<f64>() / im.as_raw().len() as f64;
    let mut worst_mean: f64 = 0.0;
    let mut worst_kernel: f64 = 0.0;
    for sigma in [1.0, 2.0, 3.0] {
        let constant = Rgb32FImage::from_pixel(33, 21, image::Rgb([0.2, 0.6, 0.9]));
        ensure!(degrade_blur(&constant, sigma).unwrap().as_raw() == constant.as_raw(), "σ{sigma} changed a constant image");
        worst_mean = worst_mean.max((mean(&degrade_blur(&float, sigma).unwrap()) - mean(&float)).abs());
        let k = gaussian_kernel(sigma).unwrap();
        let rad = k.len() / 2;
        let size = 2 * rad as u32 + 5;
        let c = size / 2;
        let mut impulse = Rgb32FImage::new(size, size);
        impulse.put_pixel(c, c, image::Rgb([1.0, 1.0, 1.0]));
        let out = degrade_blur(&impulse, sigma).unwrap();
        // Independent kernel: sampled Gaussian, normalized.
        let raw: Vec<f64> = (0..k.len()).map(|i| (-((i as f64 - rad as f64).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
        let z: f64 = raw.iter().sum();
        for dy in 0..k.len() {
            for dx in 0..k.len() {
                let v = out.get_pixel(c - rad as u32 + dx as u32, c - rad as u32 + dy as u32).0[0] as f64;
                worst_kernel = worst_kernel.max((v - raw[dy] * raw[dx] / (z * z)).abs());
            }
        }
    }
    ensure!(worst_mean <= 1e-4, "blur mean drift {worst_mean:e}");
    ensure!(worst_kernel <= 1e-6, "impulse response off by {worst_kernel:e}");
    Ok(format!("mean drift {worst_mean:.1e}, kernel error {worst_kernel:.1e}"))
}

/// Scores each image by a fixed table keyed on (setting, index within subset).
struct Fixed(Box<dyn Fn(Degradation, &ManifestEntry) -> f64>);

impl Scorer for Fixed {
    fn probabilities(&self, entries: &[ManifestEntry], d: Degradation) -> deeclip::Result<Vec<f64>> {
        Ok(entries.iter().map(|e| (self.0)(d, e)).collect())
    }
}

fn index_of(e: &ManifestEntry) -> usize {
    e.path.file_stem().unwrap().to_str().unwrap().parse().unwrap()
}

fn protocol_arithmetic() -> Outcome {
    // Subset a: 5 images, 4 right (80%). Subset b: 5 images, all right.
    let entries: Vec<ManifestEntry> = ["a", "b"]
        .iter()
        .flat_map(|s| (0..5).map(move |i| ManifestEntry { path: format!("{s}/{i}.png").into(), label: Label::Fake, subset: s.to_string() }))
        .collect();
    let m = Manifest { entries };
    let scorer = Fixed(Box::new(|_, e| if e.subset == "a" && index_of(e) == 0 { 0.2 } else { 0.8 }));
    let r = evaluate(&scorer, &m, Degradation::None).map_err(|e| e.to_string())?;
    ensure!(r.per_subset["a"].accuracy == 80.0 && r.per_subset["b"].accuracy == 100.0, "per-subset {:?}", r.per_subset);
    ensure!(r.macc == 90.0, "mAcc {}", r.macc);

    // Wrong counts per setting for (a, b), standard order jpeg80,70,60, blur1,2,3:
    // a: 0 1 1 2 3 5 -> 100 80 80 60 40 0 -> mean 60
    // b: 1 0 2 0 1 4 -> 80 100 60 100 80 20 -> mean 440/6
    let wrong = [(0, 1), (1, 0), (1, 2), (2, 0), (3, 1), (5, 4)];
    let settings = standard_sweep();
    let table = settings.clone();
    let scorer = Fixed(Box::new(move |d, e| {
        let Some(k) = table.iter().position(|s| *s == d) else { return 0.9 };
        let w = if e.subset == "a" { wrong[k].0 } else { wrong[k].1 };
        if index_of(e) < w {
            0.1
        } else {
            0.9
        }
    }));
    let rob = robustness_sweep(&scorer, &m, &settings).map_err(|e| e.to_string())?;
    let avg = rob.average.ok_or("no average")?;
    let want_b = 440.0 / 6.0;
    ensure!((avg.per_subset["a"] - 60.0).abs() < 1e-9, "a average {}", avg.per_subset["a"]);
    ensure!((avg.per_subset["b"] - want_b).abs() < 1e-9, "b average {}", avg.per_subset["b"]);
    let want = (60.0 + want_b) / 2.0;
    ensure!((avg.overall - want).abs() < 1e-9, "overall {} vs {want}", avg.overall);
    Ok(format!("mAcc {}, six-setting average {:.4}", r.macc, avg.overall))
}

fn shape_law() -> Outcome {
    let g = BackboneConfig::vit_l14();
    let cfg = TrainConfig {
        backbone: BackboneSection::from_geometry(BackboneSource::Random, &g),
        ..TrainConfig::default()
    };
    let model = Detector::build(&cfg).map_err(|e| e.to_string())?;
    let x = nn::normal(&mut rng(0), (1, 3, 224, 224), 1.0, DType::F32, &cpu()).unwrap();
    let out = model.forward(&x, &mut Mode::Eval).map_err(|e| e.to_string())?;
    ensure!(out.stack.layers.len() == 12, "{} taps", out.stack.layers.len());
    for t in &out.stack.layers {
        ensure!(t.dims() == [1, 256, 1024], "tap shape {:?}", t.dims());
    }
    ensure!(out.fused.visual.dims() == [1, 256, 1024], "F_visual {:?}", out.fused.visual.dims());
    ensure!(out.embeddings.dims() == [1, 512], "embedding {:?}", out.embeddings.dims());
    ensure!(out.logits.dims() == [1], "logit {:?}", out.logits.dims());
    let z = out.logits.to_vec1::<f32>().unwrap()[0];
    ensure!(z.is_finite(), "logit {z}");
    let census = model.census();
    ensure!(census.adapters() == 48, "{} adapters", census.adapters());
    let adapter_fraction = census.adapter_numel() as f64 / census.total as f64;
    ensure!(adapter_fraction < 0.03, "adapter fraction {adapter_fraction:.4}");
    Ok(format!(
        "12x(256x1024) taps, 512-d embedding; adapters {:.2}% of {} params, all trainable {:.2}%",
        100.0 * adapter_fraction,
        census.total,
        100.0 * census.trainable_fraction()
    ))
}

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 10] = [
        ("identity-at-init", 5, identity_at_init),
        ("lora-neutrality-and-merge", 10, lora_neutral_and_merge),
        ("gradient-suite", 60, gradient_suite),
        ("loss-oracles", 30, loss_oracles),
        ("sampling-properties", 30, sampling_properties),
        ("overfit-sanity", 300, overfit_sanity),
        ("metric-space-effect", 1, metric_space_effect),
        ("degradation-determinism", 10, degradation_determinism),
        ("protocol-arithmetic", 10, protocol_arithmetic),
        ("shape-law", 120, shape_law),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, limit, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(d) if elapsed > Duration::from_secs(limit) => Err(format!("{d}; over the {limit}s budget")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS {name} ({:.2}s / {limit}s): {detail}", elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({:.2}s / {limit}s): {detail}", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
