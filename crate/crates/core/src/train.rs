//! Training loop, checkpoints and resume.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::container::Container;
use crate::data::{preprocess, Label, Manifest};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::losses::{bce_with_logits, total_loss, triplet_loss_indexed};
use crate::nn::{Mode, Parameterized};
use crate::optim::{AdamW, AdamWConfig};
use crate::sampling::build_triplets;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Stream of the training rng (dropout, triplet sampling).
const TRAIN_STREAM: u64 = 1;
/// Batch order of epoch `e` uses stream `ORDER_STREAM + e`.
const ORDER_STREAM: u64 = 1 << 32;

/// Source of labelled, preprocessed training images.
pub trait BatchSource {
    fn labels(&self) -> &[Label];
    /// `(B, 3, S, S)` tensor for the given sample indices.
    fn load(&self, indices: &[usize]) -> Result<Tensor>;

    fn len(&self) -> usize {
        self.labels().len()
    }

    fn is_empty(&self) -> bool {
        self.labels().is_empty()
    }
}

/// Images held in memory as one `(N, 3, S, S)` tensor.
#[derive(Debug, Clone)]
pub struct TensorSource {
    pub images: Tensor,
    pub labels: Vec<Label>,
}

impl TensorSource {
    pub fn new(images: Tensor, labels: Vec<Label>) -> Result<Self> {
        if images.dims().len() != 4 || images.dim(0)? != labels.len() {
            return Err(Error::RejectedInput(format!(
                "expected (N,3,S,S) images for {} labels, got {:?}",
                labels.len(),
                images.dims()
            )));
        }
        Ok(Self { images, labels })
    }

    /// Preprocesses every manifest entry up front.
    pub fn from_manifest(manifest: &Manifest, size: usize) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.len());
        for e in &manifest.entries {
            images.push(preprocess(&e.path, size as u32)?.into_tensor());
        }
        let labels = manifest.entries.iter().map(|e| e.label).collect();
        Self::new(Tensor::stack(&images, 0)?, labels)
    }
}

impl BatchSource for TensorSource {
    fn labels(&self) -> &[Label] {
        &self.labels
    }

    fn load(&self, indices: &[usize]) -> Result<Tensor> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::new(idx.as_slice(), self.images.device())?;
        Ok(self.images.index_select(&idx, 0)?)
    }
}

/// Reads and preprocesses images from disk per batch.
#[derive(Debug, Clone)]
pub struct ManifestSource {
    manifest: Manifest,
    labels: Vec<Label>,
    size: u32,
}

impl ManifestSource {
    pub fn new(manifest: Manifest, size: usize) -> Self {
        let labels = manifest.entries.iter().map(|e| e.label).collect();
        Self { manifest, labels, size: size as u32 }
    }
}

impl BatchSource for ManifestSource {
    fn labels(&self) -> &[Label] {
        &self.labels
    }

    fn load(&self, indices: &[usize]) -> Result<Tensor> {
        let images = indices
            .iter()
            .map(|&i| preprocess(&self.manifest.entries[i].path, self.size).map(|t| t.into_tensor()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&images, 0)?)
    }
}

/// One line of the JSONL loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_triplet: f64,
    pub l_bce: f64,
    pub l_final: f64,
}

/// Serializable position of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, hex-encoded.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    schema_version: u32,
    config: TrainConfig,
    step: u64,
    rng: RngState,
    optimizer_steps: u64,
}

/// Trainable state plus everything needed to resume.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    /// Model params keyed as in [`Parameterized::named_params`].
    pub params: BTreeMap<String, Tensor>,
    pub optim_m: BTreeMap<String, Tensor>,
    pub optim_v: BTreeMap<String, Tensor>,
    pub optimizer_steps: u64,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        for (k, t) in &self.params {
            c.insert(format!("param.{k}"), t.clone());
        }
        for (k, t) in &self.optim_m {
            c.insert(format!("optim.m.{k}"), t.clone());
        }
        for (k, t) in &self.optim_v {
            c.insert(format!("optim.v.{k}"), t.clone());
        }
        let meta = CheckpointMeta {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: self.config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            optimizer_steps: self.optimizer_steps,
        };
        c.metadata = Some(serde_json::to_string(&meta)?);
        Ok(c)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let meta = c
            .metadata
            .as_deref()
            .ok_or_else(|| Error::Checkpoint("container has no checkpoint metadata".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_str(meta).map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
        if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint schema {}",
                meta.schema_version
            )));
        }
        let mut params = BTreeMap::new();
        let mut optim_m = BTreeMap::new();
        let mut optim_v = BTreeMap::new();
        for (k, t) in c.tensors {
            if let Some(rest) = k.strip_prefix("param.") {
                params.insert(rest.to_string(), t);
            } else if let Some(rest) = k.strip_prefix("optim.m.") {
                optim_m.insert(rest.to_string(), t);
            } else if let Some(rest) = k.strip_prefix("optim.v.") {
                optim_v.insert(rest.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected key `{k}`")));
            }
        }
        Ok(Self {
            config: meta.config,
            step: meta.step,
            rng: meta.rng,
            params,
            optim_m,
            optim_v,
            optimizer_steps: meta.optimizer_steps,
        })
    }

    /// Fails with a config conflict when `cfg` describes a different model.
    pub fn check_compatible(&self, cfg: &TrainConfig) -> Result<()> {
        let mut diffs = Vec::new();
        let ours = &self.config;
        if ours.fusion.taps != cfg.fusion.taps {
            diffs.push(format!("fusion.taps: checkpoint {:?}, config {:?}", ours.fusion.taps, cfg.fusion.taps));
        }
        if ours.fusion != cfg.fusion && ours.fusion.taps == cfg.fusion.taps {
            diffs.push("fusion".to_string());
        }
        if ours.lora != cfg.lora {
            diffs.push("lora".to_string());
        }
        if ours.head != cfg.head {
            diffs.push("head".to_string());
        }
        let (mut a, mut b) = (ours.backbone.clone(), cfg.backbone.clone());
        a.checkpoint = None;
        b.checkpoint = None;
        if a != b {
            diffs.push("backbone".to_string());
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigConflict(diffs.join("; ")))
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.to_container()?.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_container(Container::load(path, &Device::Cpu)?)
}

/// Loads a checkpoint and checks it against a run configuration.
pub fn load_checkpoint_for(path: impl AsRef<Path>, cfg: &TrainConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.check_compatible(cfg)?;
    Ok(ckpt)
}

impl Detector {
    /// Rebuilds the model described by the checkpoint config and loads its params.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let det = Detector::build(&ckpt.config)?;
        det.load_params(&ckpt.params)?;
        Ok(det)
    }

    pub fn load_params(&self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        let named = self.named_params();
        for (name, p) in &named {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{name}`")))?;
            p.set(t).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        }
        if params.len() != named.len() {
            let known: std::collections::BTreeSet<_> = named.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<_> = params.keys().filter(|k| !known.contains(k.as_str())).cloned().collect();
            return Err(Error::Checkpoint(format!("unexpected params: {}", extra.join(", "))));
        }
        Ok(())
    }
}

/// Owns the model, optimizer and rng of one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub detector: Detector,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    step: u64,
    history: Vec<StepMetrics>,
    metrics: Option<BufWriter<File>>,
    last_good: Option<PathBuf>,
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let detector = Detector::build(&cfg)?;
        Self::with_detector(cfg, detector)
    }

    pub fn with_detector(cfg: TrainConfig, detector: Detector) -> Result<Self> {
        let t = &cfg.train;
        let opt_cfg = AdamWConfig {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
        };
        let optimizer = AdamW::new(detector.named_params(), opt_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            cfg,
            detector,
            optimizer,
            rng,
            step: 0,
            history: Vec::new(),
            metrics: None,
            last_good: None,
            order: None,
        })
    }

    /// Restores a run. Only the run-length and logging parts of `cfg` may
    /// differ from the checkpoint's config.
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.check_compatible(&cfg)?;
        let detector = Detector::build(&cfg)?;
        detector.load_params(&ckpt.params)?;
        let mut trainer = Self::with_detector(cfg, detector)?;
        trainer.optimizer.restore(&ckpt.optim_m, &ckpt.optim_v, ckpt.optimizer_steps)?;
        trainer.rng = ckpt.rng.restore()?;
        trainer.step = ckpt.step;
        Ok(trainer)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[StepMetrics] {
        &self.history
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    /// Appends loss lines to `path` from now on.
    pub fn log_to(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.metrics = Some(BufWriter::new(f));
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        (n / self.cfg.train.batch_size).max(1) as u64
    }

    /// Steps the configured run lasts on `n` samples.
    pub fn total_steps(&self, n: usize) -> u64 {
        let full = self.cfg.train.epochs as u64 * self.steps_per_epoch(n);
        self.cfg.train.max_steps.unwrap_or(full)
    }

    fn batch_indices(&mut self, n: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch(n);
        let epoch = self.step / spe;
        let pos = (self.step % spe) as usize;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed);
            rng.set_stream(ORDER_STREAM + epoch);
            order.shuffle(&mut rng);
            self.order = Some((epoch, order));
        }
        let order = &self.order.as_ref().expect("just set").1;
        let b = self.cfg.train.batch_size.min(n);
        order[pos * b..(pos + 1) * b].to_vec()
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self, source: &dyn BatchSource) -> Result<StepMetrics> {
        let indices = self.batch_indices(source.len());
        let images = source.load(&indices)?.to_dtype(self.detector.backbone.dtype())?;
        let labels: Vec<Label> = indices.iter().map(|&i| source.labels()[i]).collect();
        let out = self.detector.forward(&images, &mut Mode::Train(&mut self.rng))?;
        let triplets = build_triplets(&labels, &mut self.rng);
        let l_triplet = triplet_loss_indexed(&out.embeddings, &triplets, &self.cfg.loss)?;
        let y: Vec<f64> = labels.iter().map(|l| l.as_f64()).collect();
        let y = Tensor::new(y.as_slice(), &Device::Cpu)?.to_dtype(out.logits.dtype())?;
        let l_bce = bce_with_logits(&out.logits, &y)?;
        let step = self.step;
        let l_final = total_loss(&l_triplet, &l_bce, &self.cfg.loss).map_err(|e| match e {
            Error::Divergence { message, .. } => Error::Divergence {
                step,
                message,
                last_good: self.last_good.clone(),
            },
            other => other,
        })?;
        let grads = l_final.backward()?;
        self.optimizer.step(&grads)?;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let m = StepMetrics {
            step,
            l_triplet: scalar(&l_triplet)?,
            l_bce: scalar(&l_bce)?,
            l_final: scalar(&l_final)?,
        };
        self.step += 1;
        self.history.push(m);
        if let Some(w) = self.metrics.as_mut() {
            serde_json::to_writer(&mut *w, &m)?;
            w.write_all(b"\n")?;
        }
        Ok(m)
    }

    /// Runs until `total_steps`, saving periodic and final checkpoints when a
    /// checkpoint directory is configured. Returns the final checkpoint.
    pub fn run(&mut self, source: &dyn BatchSource) -> Result<Checkpoint> {
        check_classes(source.labels())?;
        let total = self.total_steps(source.len());
        let every = self.cfg.train.checkpoint_every;
        while self.step < total {
            let m = self.train_step(source)?;
            log::debug!("step {} l_final {:.6}", m.step, m.l_final);
            if every > 0 && self.step % every == 0 && self.step < total {
                self.save_to_dir(&format!("step_{:06}.ckpt", self.step))?;
            }
        }
        if let Some(w) = self.metrics.as_mut() {
            w.flush()?;
        }
        self.save_to_dir("final.ckpt")?;
        self.checkpoint()
    }

    fn save_to_dir(&mut self, name: &str) -> Result<()> {
        if let Some(dir) = self.cfg.train.checkpoint_dir.clone() {
            let path = dir.join(name);
            save_checkpoint(&self.checkpoint()?, &path)?;
            log::info!("saved {}", path.display());
            self.last_good = Some(path);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let params = self
            .detector
            .named_params()
            .into_iter()
            .map(|(k, p)| (k, p.var().as_tensor().detach()))
            .collect();
        let (optim_m, optim_v) = self.optimizer.state();
        Ok(Checkpoint {
            config: self.cfg.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            params,
            optim_m,
            optim_v,
            optimizer_steps: self.optimizer.steps(),
        })
    }

    /// Eval-mode accuracy on a source, in [0, 1].
    pub fn accuracy(&self, source: &dyn BatchSource) -> Result<f64> {
        let n = source.len();
        let mut correct = 0usize;
        for chunk in (0..n).collect::<Vec<_>>().chunks(32) {
            let probs = self.detector.probabilities(&source.load(chunk)?)?;
            for (&i, p) in chunk.iter().zip(probs) {
                let pred = if p >= 0.5 { Label::Fake } else { Label::Real };
                correct += (pred == source.labels()[i]) as usize;
            }
        }
        Ok(correct as f64 / n.max(1) as f64)
    }
}

fn check_classes(labels: &[Label]) -> Result<()> {
    let fake = labels.iter().filter(|&&l| l == Label::Fake).count();
    if fake == 0 || fake == labels.len() {
        return Err(Error::Config("training data must contain both real and fake images".into()));
    }
    Ok(())
}

/// Trains on a manifest per `cfg` and returns the final checkpoint. Small
/// manifests are preprocessed once and kept in memory.
pub fn train(cfg: &TrainConfig, manifest: &Manifest) -> Result<Checkpoint> {
    if !manifest.has_both_classes() {
        return Err(Error::Config("training manifest must contain both real and fake images".into()));
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let size = trainer.detector.image_size();
    if let Some(path) = cfg.train.metrics.clone().or_else(|| cfg.train.checkpoint_dir.as_ref().map(|d| d.join("metrics.jsonl"))) {
        trainer.log_to(path)?;
    }
    let bytes = manifest.len() * 3 * size * size * 4;
    if bytes <= 256 << 20 {
        let source = TensorSource::from_manifest(manifest, size)?;
        trainer.run(&source)
    } else {
        trainer.run(&ManifestSource::new(manifest.clone(), size))
    }
}

/// 20-step (or `window`) trailing moving average of a loss series.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}
