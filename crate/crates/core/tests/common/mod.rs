//! Independent oracles shared by the integration tests and the acceptance
//! runner: plain-loop reference math and a finite-difference checker.
#![allow(dead_code)]

use candle::{DType, Device, Tensor};
use deeclip::backbone::FeatureStack;
use deeclip::deefuser::{AttentionParams, DeeFuserConfig, DeeFuserParams};
use deeclip::nn::{self, Linear, LayerNorm, Param, Parameterized};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn cpu() -> Device {
    Device::Cpu
}

pub fn vec1(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn mat(t: &Tensor) -> Mat {
    t.to_dtype(DType::F64).unwrap().to_vec2().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

pub fn tensor2(m: &Mat) -> Tensor {
    let rows = m.len();
    let cols = m.first().map_or(0, |r| r.len());
    Tensor::from_vec(m.concat(), (rows, cols), &cpu()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- reference math on nested vectors ----

pub fn ref_linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            w.iter()
                .zip(b)
                .map(|(wr, bi)| wr.iter().zip(row).map(|(a, c)| a * c).sum::<f64>() + bi)
                .collect()
        })
        .collect()
}

pub fn ref_layer_norm(x: &Mat, w: &[f64], b: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) * inv * w[i] + b[i])
                .collect()
        })
        .collect()
}

pub fn ref_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

pub fn ref_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Plain linear-layer weights.
#[derive(Clone)]
pub struct RefLinear {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl RefLinear {
    pub fn of(l: &Linear) -> Self {
        Self { w: mat(&l.weight.tensor()), b: vec1(&l.bias.tensor()) }
    }
    pub fn apply(&self, x: &Mat) -> Mat {
        ref_linear(x, &self.w, &self.b)
    }
}

pub struct RefNorm {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub eps: f64,
}

impl RefNorm {
    pub fn of(n: &LayerNorm) -> Self {
        Self { w: vec1(&n.weight.tensor()), b: vec1(&n.bias.tensor()), eps: n.eps }
    }
    pub fn apply(&self, x: &Mat) -> Mat {
        ref_layer_norm(x, &self.w, &self.b, self.eps)
    }
}

pub struct RefAttention {
    pub q: RefLinear,
    pub k: RefLinear,
    pub v: RefLinear,
    pub out: RefLinear,
    pub heads: usize,
}

impl RefAttention {
    pub fn of(a: &AttentionParams) -> Self {
        Self {
            q: RefLinear::of(&a.q),
            k: RefLinear::of(&a.k),
            v: RefLinear::of(&a.v),
            out: RefLinear::of(&a.out),
            heads: a.heads,
        }
    }

    /// Per-head loops over query and key tokens.
    pub fn apply(&self, query: &Mat, context: &Mat) -> Mat {
        let (q, k, v) = (self.q.apply(query), self.k.apply(context), self.v.apply(context));
        let d = q[0].len();
        let hd = d / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut concat = vec![vec![0.0; d]; q.len()];
        for h in 0..self.heads {
            let r = h * hd..(h + 1) * hd;
            for (i, qi) in q.iter().enumerate() {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kj| qi[r.clone()].iter().zip(&kj[r.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let w = ref_softmax(&scores);
                for c in r.clone() {
                    concat[i][c] = w.iter().zip(&v).map(|(wj, vj)| wj * vj[c]).sum();
                }
            }
        }
        self.out.apply(&concat)
    }
}

/// Scalar reimplementation of the fusion equations for one batch element.
pub fn ref_fuse(layers: &[Mat], p: &DeeFuserParams) -> Mat {
    let deep = layers.last().unwrap();
    let shallow: Mat = layers[..layers.len() - 1].iter().flatten().cloned().collect();
    let norm_cross = RefNorm::of(&p.norm_cross);
    let cross = RefAttention::of(&p.cross_attn).apply(&norm_cross.apply(deep), &norm_cross.apply(&shallow));
    let hidden: Mat = RefLinear::of(&p.mlp.fc1)
        .apply(&RefNorm::of(&p.norm_mlp).apply(&cross))
        .into_iter()
        .map(|r| r.into_iter().map(ref_gelu).collect())
        .collect();
    let mlp = RefLinear::of(&p.mlp.fc2).apply(&hidden);
    let normed = RefNorm::of(&p.norm_self).apply(&mlp);
    let sa = RefAttention::of(&p.self_attn).apply(&normed, &normed);
    let a1 = vec1(&p.alpha1.tensor());
    let a2 = vec1(&p.alpha2.tensor());
    deep.iter()
        .zip(mlp.iter().zip(&sa))
        .map(|(f, (m, s))| {
            (0..f.len())
                .map(|c| f[c] + a1[c] * (m[c] + a2[c] * s[c]))
                .collect()
        })
        .collect()
}

/// Triplet loss as a loop over triples, mean reduction.
pub fn ref_triplet(e: &Mat, triples: &[(usize, usize, usize)], margin: f64, hinge: bool) -> f64 {
    if triples.is_empty() {
        return 0.0;
    }
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let total: f64 = triples
        .iter()
        .map(|&(a, p, n)| {
            let t = sq(&e[a], &e[p]) - sq(&e[a], &e[n]) + margin;
            if hinge { t.max(0.0) } else { t }
        })
        .sum();
    total / triples.len() as f64
}

/// Textbook BCE through the sigmoid; only accurate for moderate logits.
pub fn naive_bce(z: f64, y: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
}

// ---- fixtures ----

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fuser(d: usize, heads: usize, seed: u64, dtype: DType) -> DeeFuserParams {
    let cfg = DeeFuserConfig { width: d, heads, ..DeeFuserConfig::default() };
    DeeFuserParams::init(&cfg, &mut rng(seed), dtype, &cpu()).unwrap()
}

/// Sets every fusion array (norms and biases included) to random values so
/// no gradient path is trivially zero.
pub fn randomize(params: &impl Parameterized, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (name, p) in params.named_params() {
        let dims = p.var().dims().to_vec();
        let mut t = nn::normal(&mut r, dims.as_slice(), scale, p.var().dtype(), &cpu()).unwrap();
        if name.ends_with("norm_cross.weight") || name.ends_with("norm_mlp.weight") || name.ends_with("norm_self.weight") {
            t = (t + 1.0).unwrap();
        }
        p.set(&t).unwrap();
    }
}

pub fn random_stack(l: usize, b: usize, n: usize, d: usize, seed: u64, dtype: DType) -> FeatureStack {
    let mut r = rng(seed);
    let layers = (0..l)
        .map(|_| nn::normal(&mut r, (b, n, d), 1.0, dtype, &cpu()).unwrap())
        .collect();
    FeatureStack::new(layers, (0..l).collect()).unwrap()
}

// ---- finite differences ----

/// Relative error with a floor on the denominator.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between backprop gradients of `loss` and
/// fourth-order central differences, per param. `loss` must recompute from the params' current
/// values.
pub fn grad_check(params: &[(String, Param)], loss: &dyn Fn() -> Tensor, h: f64) -> Vec<(String, f64)> {
    let l = loss();
    let grads = l.backward().unwrap();
    let mut report = Vec::new();
    for (name, p) in params {
        let var = p.var();
        let base = vec1(var.as_tensor());
        let analytic = grads.get(var).map_or_else(|| vec![0.0; base.len()], vec1);
        let dims = var.dims().to_vec();
        let set = |v: &[f64]| {
            var.set(&Tensor::from_vec(v.to_vec(), dims.as_slice(), &cpu()).unwrap()).unwrap();
        };
        let mut worst: f64 = 0.0;
        let mut probe = base.clone();
        for i in 0..base.len() {
            let mut at = |offset: f64| {
                probe[i] = base[i] + offset;
                set(&probe);
                scalar(&loss())
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            probe[i] = base[i];
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            if std::env::var_os("FD_TRACE").is_some() && rel_err(analytic[i], numeric) > 1e-5 { eprintln!("  {name}[{i}] a={:e} n={:e}", analytic[i], numeric); }
            worst = worst.max(rel_err(analytic[i], numeric));
        }
        set(&base);
        report.push((name.clone(), worst));
    }
    report
}
