//! Manifests, CLIP-style preprocessing and image degradations.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle::{Device, Tensor};
use image::imageops::{self, FilterType};
use image::{DynamicImage, Rgb32FImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel normalization statistics of the CLIP image pipeline.
pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// Encoder and decoder used for the JPEG sweep; recorded in reports because
/// quality settings are codec-dependent.
pub const CODEC_INFO: &str = "jpeg-encoder 0.7.1 (baseline, 4:2:0) / image 0.25 decoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        self as i64 as f64
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }
}

impl TryFrom<i64> for Label {
    type Error = String;
    fn try_from(v: i64) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(format!("label must be 0 (real) or 1 (fake), got {other}")),
        }
    }
}

impl From<Label> for i64 {
    fn from(l: Label) -> i64 {
        l as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    pub subset: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    path: String,
    label: i64,
    subset: String,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn subset_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.subset.clone()).or_insert(0) += 1;
        }
        m
    }

    pub fn has_both_classes(&self) -> bool {
        let real = self.entries.iter().any(|e| e.label == Label::Real);
        let fake = self.entries.iter().any(|e| e.label == Label::Fake);
        real && fake
    }

    /// Parses JSONL text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawEntry = serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: line_no,
                message: e.to_string(),
            })?;
            let label = Label::try_from(raw.label).map_err(|message| Error::Manifest { line: line_no, message })?;
            let path = PathBuf::from(raw.path);
            let path = match base {
                Some(b) if path.is_relative() => b.join(path),
                _ => path,
            };
            entries.push(ManifestEntry { path, label, subset: raw.subset });
        }
        Ok(Self { entries })
    }

    /// Errors listing the first ten missing files, if any.
    pub fn check_files(&self) -> Result<()> {
        let missing: Vec<&ManifestEntry> = self.entries.iter().filter(|e| !e.path.exists()).collect();
        if missing.is_empty() {
            return Ok(());
        }
        Err(Error::MissingFiles {
            count: missing.len(),
            paths: missing.iter().take(10).map(|e| e.path.clone()).collect(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            let line = serde_json::json!({
                "path": e.path.to_string_lossy(),
                "label": i64::from(e.label),
                "subset": e.subset,
            });
            writeln!(f, "{line}")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Loads and validates a JSONL manifest (`path`, `label`, `subset`).
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e))?;
    let manifest = Manifest::parse(&text, path.parent())?;
    if manifest.is_empty() {
        log::warn!("manifest {} is empty", path.display());
    }
    manifest.check_files()?;
    for (subset, n) in manifest.subset_counts() {
        log::info!("subset {subset}: {n} images");
    }
    Ok(manifest)
}

fn class_dir(name: &str) -> Option<Label> {
    match name {
        "real" | "0_real" => Some(Label::Real),
        "fake" | "1_fake" => Some(Label::Fake),
        _ => None,
    }
}

/// Scans a tree whose leaf directories are `real/` and `fake/` (or
/// `0_real/`, `1_fake/`). The subset tag joins the directories between
/// `root` and the class directory with `_`, e.g. `progan/horse/1_fake/x.png`
/// lands in subset `progan_horse`.
pub fn scan_directory(root: impl AsRef<Path>) -> Result<Manifest> {
    let root = root.as_ref();
    let root_name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "default".into());
    let mut entries = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::data(root, e))?;
        if !entry.file_type().is_file() || !is_image_file(entry.path()) {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let dirs: Vec<String> = rel
            .parent()
            .map(|p| p.iter().map(|c| c.to_string_lossy().into_owned()).collect())
            .unwrap_or_default();
        let Some(pos) = dirs.iter().rposition(|d| class_dir(d).is_some()) else {
            continue;
        };
        let label = class_dir(&dirs[pos]).expect("matched");
        let subset = if pos == 0 { root_name.clone() } else { dirs[..pos].join("_") };
        entries.push(ManifestEntry { path: entry.path().to_path_buf(), label, subset });
    }
    Ok(Manifest { entries })
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp" | "webp")
    )
}

/// A preprocessed `3 × S × S` single-precision image.
#[derive(Debug, Clone)]
pub struct ImageTensor(pub Tensor);

impl ImageTensor {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Size after scaling the shorter side to `size`; the long side is rounded
/// half-up.
pub fn resize_dims(width: u32, height: u32, size: u32) -> (u32, u32) {
    let scale = |long: u32, short: u32| ((long as f64 * size as f64 / short as f64) + 0.5).floor() as u32;
    if width <= height {
        (size, scale(height, width))
    } else {
        (scale(width, height), size)
    }
}

/// Bicubic shorter-side resize, center crop, then CLIP normalization.
pub fn preprocess_pixels(img: &Rgb32FImage, size: u32) -> Result<ImageTensor> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::RejectedInput("empty image".into()));
    }
    let (rw, rh) = resize_dims(w, h, size);
    let resized;
    let src = if (rw, rh) == (w, h) {
        img
    } else {
        resized = imageops::resize(img, rw, rh, FilterType::CatmullRom);
        &resized
    };
    let left = (rw - size).div_ceil(2);
    let top = (rh - size).div_ceil(2);
    let s = size as usize;
    let mut values = vec![0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let p = src.get_pixel(left + x as u32, top + y as u32);
            for c in 0..3 {
                values[c * s * s + y * s + x] = (p.0[c] - CLIP_MEAN[c]) / CLIP_STD[c];
            }
        }
    }
    Ok(ImageTensor(Tensor::from_vec(values, (3, s, s), &Device::Cpu)?))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<DynamicImage> {
    image::load_from_memory(bytes).map_err(|e| Error::data(path, format!("cannot decode image: {e}")))
}

pub fn preprocess(path: impl AsRef<Path>, size: u32) -> Result<ImageTensor> {
    load_degraded(path, Degradation::None, size)
}

/// Degrades the file at `path` (bytes for JPEG, pixels for blur) and then
/// preprocesses it.
pub fn load_degraded(path: impl AsRef<Path>, degradation: Degradation, size: u32) -> Result<ImageTensor> {
    let path = path.as_ref();
    let pixels = degraded_pixels(path, degradation)?;
    preprocess_pixels(&pixels, size)
}

pub fn degraded_pixels(path: &Path, degradation: Degradation) -> Result<Rgb32FImage> {
    degradation.validate()?;
    let bytes = std::fs::read(path).map_err(|e| Error::data(path, e))?;
    Ok(match degradation {
        Degradation::None => decode(&bytes, path)?.to_rgb32f(),
        Degradation::Jpeg { quality } => {
            let jpeg = degrade_jpeg(&bytes, quality).map_err(|e| match e {
                Error::RejectedInput(m) => Error::data(path, m),
                other => other,
            })?;
            decode(&jpeg, path)?.to_rgb32f()
        }
        Degradation::Blur { sigma } => degrade_blur(&decode(&bytes, path)?.to_rgb32f(), sigma)?,
    })
}

/// Post-hoc degradation applied before preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degradation {
    #[default]
    None,
    Jpeg { quality: u8 },
    Blur { sigma: f64 },
}

impl Degradation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Degradation::None => Ok(()),
            Degradation::Jpeg { quality } if (1..=100).contains(&quality) => Ok(()),
            Degradation::Jpeg { quality } => Err(Error::Config(format!("JPEG quality {quality} outside 1..=100"))),
            Degradation::Blur { sigma } if sigma > 0.0 && sigma.is_finite() => Ok(()),
            Degradation::Blur { sigma } => Err(Error::Config(format!("blur sigma must be positive, got {sigma}"))),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Degradation::None)
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Degradation::None => f.write_str("none"),
            Degradation::Jpeg { quality } => write!(f, "jpeg:{quality}"),
            Degradation::Blur { sigma } => write!(f, "blur:{sigma}"),
        }
    }
}

impl FromStr for Degradation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut all = parse_sweep(s)?;
        if all.len() != 1 {
            return Err(Error::Config(format!("expected a single degradation, got `{s}`")));
        }
        Ok(all.remove(0))
    }
}

/// Parses `none`, `jpeg:80,70,60` or `blur:1,2,3`.
pub fn parse_sweep(spec: &str) -> Result<Vec<Degradation>> {
    let spec = spec.trim();
    if spec == "none" {
        return Ok(vec![Degradation::None]);
    }
    let (kind, params) = spec
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("degradation `{spec}` is not `kind:values`")))?;
    let bad = |v: &str| Error::Config(format!("bad {kind} parameter `{v}`"));
    let out = params
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            let d = match kind {
                "jpeg" => Degradation::Jpeg { quality: v.parse().map_err(|_| bad(v))? },
                "blur" => Degradation::Blur { sigma: v.parse().map_err(|_| bad(v))? },
                other => return Err(Error::Config(format!("unknown degradation kind `{other}`"))),
            };
            d.validate()?;
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    if out.is_empty() {
        return Err(Error::Config(format!("degradation `{spec}` lists no values")));
    }
    Ok(out)
}

/// Decodes an image and re-encodes it as a baseline JPEG at `quality`
/// with 4:2:0 chroma subsampling. Deterministic for a fixed input.
pub fn degrade_jpeg(bytes: &[u8], quality: u8) -> Result<Vec<u8>> {
    Degradation::Jpeg { quality }.validate()?;
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::RejectedInput(format!("cannot decode image: {e}")))?
        .to_rgb8();
    encode_jpeg(&img, quality)
}

pub fn encode_jpeg(img: &image::RgbImage, quality: u8) -> Result<Vec<u8>> {
    let (w, h) = img.dimensions();
    if w > u16::MAX as u32 || h > u16::MAX as u32 {
        return Err(Error::RejectedInput(format!("{w}×{h} exceeds the JPEG size limit")));
    }
    let mut out = Vec::new();
    let mut encoder = jpeg_encoder::Encoder::new(&mut out, quality);
    encoder.set_sampling_factor(jpeg_encoder::SamplingFactor::R_4_2_0);
    encoder
        .encode(img.as_raw(), w as u16, h as u16, jpeg_encoder::ColorType::Rgb)
        .map_err(|e| Error::RejectedInput(format!("JPEG encoding failed: {e}")))?;
    Ok(out)
}

/// Normalized 1-D Gaussian of radius `⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    Degradation::Blur { sigma }.validate()?;
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    Ok(k)
}

/// Mirror index with the edge sample repeated (`cba|abcd|dcb`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable per-channel Gaussian blur with mirrored borders.
pub fn degrade_blur(img: &Rgb32FImage, sigma: f64) -> Result<Rgb32FImage> {
    let kernel = gaussian_kernel(sigma)?;
    let r = (kernel.len() / 2) as i64;
    let (w, h) = img.dimensions();
    let (wu, hu) = (w as usize, h as usize);
    let src = img.as_raw();
    let mut tmp = vec![0f64; src.len()];
    for y in 0..hu {
        for x in 0..wu {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wk) in kernel.iter().enumerate() {
                    let sx = reflect(x as i64 + k as i64 - r, wu);
                    acc += wk * src[(y * wu + sx) * 3 + c] as f64;
                }
                tmp[(y * wu + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0f32; src.len()];
    for y in 0..hu {
        for x in 0..wu {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wk) in kernel.iter().enumerate() {
                    let sy = reflect(y as i64 + k as i64 - r, hu);
                    acc += wk * tmp[(sy * wu + x) * 3 + c];
                }
                out[(y * wu + x) * 3 + c] = acc as f32;
            }
        }
    }
    Ok(Rgb32FImage::from_raw(w, h, out).expect("buffer sized from input"))
}
