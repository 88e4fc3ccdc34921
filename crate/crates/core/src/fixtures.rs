//! Synthetic image sets for tests, examples and the desk-scale recipe.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Label, Manifest, ManifestEntry};
use crate::error::{Error, Result};

/// Two classes separated by a per-channel color offset under uniform noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedBias {
    /// Images per class.
    pub per_class: usize,
    pub size: u32,
    /// Offset added to red and subtracted from blue for fakes, in [0, 1] units.
    pub bias: f32,
    /// Half-width of the per-pixel uniform noise.
    pub noise: f32,
    pub seed: u64,
    /// Subset tags assigned round-robin.
    pub subsets: Vec<String>,
}

impl Default for PlantedBias {
    fn default() -> Self {
        Self {
            per_class: 32,
            size: 32,
            bias: 0.15,
            noise: 0.2,
            seed: 0,
            subsets: vec!["planted".into()],
        }
    }
}

impl PlantedBias {
    /// Images in order real₀, fake₀, real₁, fake₁, …
    pub fn images(&self) -> Vec<(RgbImage, Label, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(2 * self.per_class);
        for i in 0..self.per_class {
            for label in [Label::Real, Label::Fake] {
                let shift = if label == Label::Fake { self.bias } else { 0.0 };
                let base: f32 = rng.random_range(0.35..0.65);
                let img = RgbImage::from_fn(self.size, self.size, |_, _| {
                    let mut px = [0u8; 3];
                    for (c, v) in px.iter_mut().enumerate() {
                        let offset = match c {
                            0 => shift,
                            2 => -shift,
                            _ => 0.0,
                        };
                        let x = base + offset + rng.random_range(-self.noise..=self.noise);
                        *v = (x.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                    Rgb(px)
                });
                let subset = self.subsets[i % self.subsets.len()].clone();
                out.push((img, label, subset));
            }
        }
        out
    }

    /// Writes PNGs plus `manifest.jsonl` into `dir` and returns the manifest.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, (img, label, subset)) in self.images().into_iter().enumerate() {
            let name = format!("{i:04}_{}.png", if label == Label::Fake { "fake" } else { "real" });
            let path = dir.join(&name);
            img.save(&path).map_err(|e| Error::data(&path, e))?;
            entries.push(ManifestEntry { path, label, subset });
        }
        let manifest = Manifest::new(entries);
        manifest.write(dir.join("manifest.jsonl"))?;
        Ok(manifest)
    }
}

/// Smooth gradients, a few edges and fine texture: enough structure for a
/// JPEG encoder to make nontrivial decisions.
pub fn natural_image(width: u32, height: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    let cx = rng.random_range(0.3..0.7) * width as f32;
    let cy = rng.random_range(0.3..0.7) * height as f32;
    let r = 0.25 * width.min(height) as f32;
    RgbImage::from_fn(width, height, |x, y| {
        let (fx, fy) = (x as f32 / width as f32, y as f32 / height as f32);
        let inside = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt() < r;
        let mut px = [0u8; 3];
        for (c, v) in px.iter_mut().enumerate() {
            let wave = (6.28 * (fx * (c as f32 + 1.0) + fy * 0.7 + phase[c])).sin();
            let tex = ((x * 7 + y * 13 + c as u32 * 5) % 11) as f32 / 11.0 - 0.5;
            let mut val = 0.5 + 0.3 * wave + 0.08 * tex;
            if inside {
                val = 1.0 - 0.6 * val;
            }
            *v = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(px)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_set_is_balanced_and_deterministic() {
        let spec = PlantedBias { per_class: 4, size: 8, ..PlantedBias::default() };
        let a = spec.images();
        let b = spec.images();
        assert_eq!(a.len(), 8);
        assert_eq!(a.iter().filter(|x| x.1 == Label::Fake).count(), 4);
        assert!(a.iter().zip(&b).all(|(x, y)| x.0 == y.0));
    }

    #[test]
    fn fakes_are_redder() {
        let spec = PlantedBias { per_class: 8, size: 16, ..PlantedBias::default() };
        let mean_rb = |img: &RgbImage| {
            img.pixels().map(|p| p.0[0] as f64 - p.0[2] as f64).sum::<f64>() / img.len() as f64 * 3.0
        };
        for (img, label, _) in spec.images() {
            let d = mean_rb(&img);
            if label == Label::Fake {
                assert!(d > 40.0, "{d}");
            } else {
                assert!(d.abs() < 20.0, "{d}");
            }
        }
    }
}
