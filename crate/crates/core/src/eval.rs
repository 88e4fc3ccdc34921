//! Inference, per-subset accuracy, degradation sweeps and embedding export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{load_degraded, Degradation, Label, Manifest, ManifestEntry, CODEC_INFO};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::head::sigmoid_scalar;
use crate::nn::Mode;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const EMBEDDING_SCHEMA_VERSION: u32 = 1;
/// Probabilities at or above the threshold are labelled fake.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

const EVAL_BATCH: usize = 16;

/// Anything that maps manifest images to fake probabilities.
pub trait Scorer {
    fn probabilities(&self, entries: &[ManifestEntry], degradation: Degradation) -> Result<Vec<f64>>;
}

impl Scorer for Detector {
    fn probabilities(&self, entries: &[ManifestEntry], degradation: Degradation) -> Result<Vec<f64>> {
        let size = self.image_size() as u32;
        let mut out = Vec::with_capacity(entries.len());
        for chunk in entries.chunks(EVAL_BATCH) {
            let images = chunk
                .iter()
                .map(|e| load_degraded(&e.path, degradation, size).map(|t| t.into_tensor()))
                .collect::<Result<Vec<_>>>()?;
            let batch = Tensor::stack(&images, 0)?.to_dtype(self.backbone.dtype())?;
            out.extend(Detector::probabilities(self, &batch)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probability: f64,
    pub label: Label,
}

impl Prediction {
    pub fn from_probability(probability: f64, threshold: f64) -> Self {
        let label = if probability >= threshold { Label::Fake } else { Label::Real };
        Self { probability, label }
    }

    pub fn from_logit(z: f64, threshold: f64) -> Self {
        Self::from_probability(sigmoid_scalar(z), threshold)
    }
}

/// Scores one image file.
pub fn predict(model: &Detector, path: impl AsRef<Path>, degradation: Degradation) -> Result<Prediction> {
    let image = load_degraded(path, degradation, model.image_size() as u32)?
        .into_tensor()
        .unsqueeze(0)?
        .to_dtype(model.backbone.dtype())?;
    let p = model.probabilities(&image)?[0];
    Ok(Prediction::from_probability(p, DEFAULT_THRESHOLD))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub n: usize,
    pub correct: usize,
    /// Percent, 0 to 100.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub per_subset: BTreeMap<String, SubsetStats>,
    /// Unweighted mean of the subset accuracies.
    #[serde(rename = "mAcc")]
    pub macc: f64,
    pub degradation: Degradation,
    pub codec_info: String,
    pub threshold: f64,
}

impl EvalReport {
    /// Builds a report from `(subset, label, probability)` rows.
    pub fn from_rows<'a>(
        rows: impl IntoIterator<Item = (&'a str, Label, f64)>,
        degradation: Degradation,
        threshold: f64,
    ) -> Self {
        let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (subset, label, p) in rows {
            let e = counts.entry(subset.to_string()).or_default();
            e.0 += 1;
            e.1 += (Prediction::from_probability(p, threshold).label == label) as usize;
        }
        let per_subset: BTreeMap<_, _> = counts
            .into_iter()
            .map(|(k, (n, correct))| {
                let accuracy = 100.0 * correct as f64 / n as f64;
                (k, SubsetStats { n, correct, accuracy })
            })
            .collect();
        let macc = mean(per_subset.values().map(|s| s.accuracy));
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            per_subset,
            macc,
            degradation,
            codec_info: CODEC_INFO.to_string(),
            threshold,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn evaluate(model: &dyn Scorer, manifest: &Manifest, degradation: Degradation) -> Result<EvalReport> {
    evaluate_with_threshold(model, manifest, degradation, DEFAULT_THRESHOLD)
}

pub fn evaluate_with_threshold(
    model: &dyn Scorer,
    manifest: &Manifest,
    degradation: Degradation,
    threshold: f64,
) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::RejectedInput("cannot evaluate an empty manifest".into()));
    }
    degradation.validate()?;
    let probs = model.probabilities(&manifest.entries, degradation)?;
    if probs.len() != manifest.len() {
        return Err(Error::RejectedInput(format!(
            "scorer returned {} probabilities for {} images",
            probs.len(),
            manifest.len()
        )));
    }
    let rows = manifest
        .entries
        .iter()
        .zip(probs)
        .map(|(e, p)| (e.subset.as_str(), e.label, p));
    Ok(EvalReport::from_rows(rows, degradation, threshold))
}

/// Mean over degraded settings per subset, then over subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationAverage {
    pub settings: Vec<Degradation>,
    pub per_subset: BTreeMap<String, f64>,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub schema_version: u32,
    pub reports: Vec<EvalReport>,
    /// Absent when the sweep holds no degraded setting.
    pub average: Option<DegradationAverage>,
}

/// Averages degraded reports; `none` settings do not count.
pub fn degradation_average(reports: &[EvalReport]) -> Option<DegradationAverage> {
    let degraded: Vec<&EvalReport> = reports.iter().filter(|r| !r.degradation.is_none()).collect();
    if degraded.is_empty() {
        return None;
    }
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &degraded {
        for (k, s) in &r.per_subset {
            acc.entry(k.clone()).or_default().push(s.accuracy);
        }
    }
    let per_subset: BTreeMap<String, f64> = acc
        .into_iter()
        .map(|(k, v)| (k, mean(v.into_iter())))
        .collect();
    let overall = mean(per_subset.values().copied());
    Some(DegradationAverage {
        settings: degraded.iter().map(|r| r.degradation).collect(),
        per_subset,
        overall,
    })
}

pub fn robustness_sweep(model: &dyn Scorer, manifest: &Manifest, sweeps: &[Degradation]) -> Result<RobustnessReport> {
    for d in sweeps {
        if !is_standard_setting(d) {
            log::warn!("non-standard degradation setting {d}");
        }
    }
    let reports = sweeps
        .iter()
        .map(|&d| evaluate(model, manifest, d))
        .collect::<Result<Vec<_>>>()?;
    let average = degradation_average(&reports);
    Ok(RobustnessReport {
        schema_version: REPORT_SCHEMA_VERSION,
        reports,
        average,
    })
}

/// The reference sweep: JPEG q ∈ {80, 70, 60} and blur σ ∈ {1, 2, 3}.
pub fn standard_sweep() -> Vec<Degradation> {
    let mut v: Vec<Degradation> = [80, 70, 60].into_iter().map(|quality| Degradation::Jpeg { quality }).collect();
    v.extend([1.0, 2.0, 3.0].into_iter().map(|sigma| Degradation::Blur { sigma }));
    v
}

fn is_standard_setting(d: &Degradation) -> bool {
    d.is_none() || standard_sweep().contains(d)
}

/// One exported embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub path: String,
    pub subset: String,
    pub label: Label,
    pub embedding: Vec<f64>,
}

impl Detector {
    /// Eval-mode `(B, D_proj)` embeddings as nested rows.
    pub fn embeddings(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let out = self.forward(images, &mut Mode::Eval)?;
        Ok(out.embeddings.to_dtype(DType::F64)?.to_vec2()?)
    }
}

/// Embeds every manifest image and writes a CSV with a leading
/// `# schema_version=N` line, then `path,subset,label,e0..e{D-1}`.
pub fn export_embeddings(model: &Detector, manifest: &Manifest, out: impl AsRef<Path>) -> Result<Vec<EmbeddingRow>> {
    let size = model.image_size() as u32;
    let mut rows = Vec::with_capacity(manifest.len());
    for chunk in manifest.entries.chunks(EVAL_BATCH) {
        let images = chunk
            .iter()
            .map(|e| load_degraded(&e.path, Degradation::None, size).map(|t| t.into_tensor()))
            .collect::<Result<Vec<_>>>()?;
        let batch = Tensor::stack(&images, 0)?.to_dtype(model.backbone.dtype())?;
        for (e, embedding) in chunk.iter().zip(model.embeddings(&batch)?) {
            rows.push(EmbeddingRow {
                path: e.path.display().to_string(),
                subset: e.subset.clone(),
                label: e.label,
                embedding,
            });
        }
    }
    write_embeddings(&rows, out)?;
    Ok(rows)
}

pub fn write_embeddings(rows: &[EmbeddingRow], out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    let dim = rows.first().map_or(0, |r| r.embedding.len());
    let mut file = std::fs::File::create(out).map_err(|e| Error::data(out, e))?;
    writeln!(file, "# schema_version={EMBEDDING_SCHEMA_VERSION}")?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["path".to_string(), "subset".into(), "label".into()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.path.clone(), r.subset.clone(), i64::from(r.label).to_string()];
        rec.extend(r.embedding.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_embeddings`].
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e))?;
    let body = text
        .strip_prefix(&format!("# schema_version={EMBEDDING_SCHEMA_VERSION}\n"))
        .ok_or_else(|| Error::data(path, "missing or unsupported schema_version line"))?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let label: i64 = rec[2].parse().map_err(|_| Error::data(path, "bad label"))?;
        let label = Label::try_from(label).map_err(|m| Error::data(path, m))?;
        let embedding = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>().map_err(|_| Error::data(path, "bad embedding value")))
            .collect::<Result<Vec<_>>>()?;
        rows.push(EmbeddingRow { path: rec[0].to_string(), subset: rec[1].to_string(), label, embedding });
    }
    Ok(rows)
}

/// Mean pairwise Euclidean distance within classes and across classes.
pub fn class_distances(rows: &[(Label, Vec<f64>)]) -> (f64, f64) {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d = rows[i]
                .1
                .iter()
                .zip(&rows[j].1)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if rows[i].0 == rows[j].0 {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_is_fake() {
        assert_eq!(Prediction::from_logit(0.0, 0.5).label, Label::Fake);
        assert_eq!(Prediction::from_probability(0.499, 0.5).label, Label::Real);
    }

    #[test]
    fn macc_is_unweighted() {
        let mut rows = Vec::new();
        for i in 0..10 {
            rows.push(("a", Label::Fake, if i < 8 { 0.9 } else { 0.1 }));
        }
        rows.push(("b", Label::Real, 0.2));
        let r = EvalReport::from_rows(rows, Degradation::None, 0.5);
        assert_eq!(r.per_subset["a"].accuracy, 80.0);
        assert_eq!(r.per_subset["b"].accuracy, 100.0);
        assert_eq!(r.macc, 90.0);
    }

    #[test]
    fn none_only_sweep_has_no_average() {
        let r = EvalReport::from_rows([("a", Label::Real, 0.1)], Degradation::None, 0.5);
        assert!(degradation_average(&[r]).is_none());
    }
}
