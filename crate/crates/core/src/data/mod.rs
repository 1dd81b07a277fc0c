//! Images, preprocessing, noise models, the synthetic fundus-like generator
//! and the on-disk dataset format (`manifest.csv` plus binary PPM files).

mod io;
mod noise;
mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Tensor;

pub use io::{load_dataset, read_ppm, write_dataset, write_pgm, write_ppm, DatasetReader, ManifestRow, MANIFEST};
pub use noise::{add_gaussian, add_salt_pepper, add_speckle, apply_noise, apply_noise_normalized, NoiseKind, NoiseSpec};
pub use synthetic::{generate_synthetic, render_sample, OodShift, SplitCounts, SyntheticConfig, SyntheticDataset, CLASS_NAMES};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("{path}: missing image file")]
    MissingFile { path: PathBuf },
    #[error("{path}: bad PPM/PGM: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("image {id} is {h}×{w}, smaller than crop {crop}")]
    TooSmall { id: String, h: usize, w: usize, crop: usize },
    #[error("bad noise spec `{0}`")]
    Noise(String),
}

/// An `H × W × 3` image in `[0, 1]`, stored row-major with interleaved
/// channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub id: String,
    pub label: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, label: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, DataError> {
        let id = id.into();
        if pixels.len() != height * width * 3 {
            return Err(DataError::Config(format!(
                "image {id}: {} values for {height}×{width}×3",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::Config(format!("image {id}: pixel {v} outside [0, 1]")));
        }
        Ok(Self {
            id,
            label,
            height,
            width,
            pixels,
        })
    }

    pub fn constant(id: &str, height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            id: id.into(),
            label: 0,
            height,
            width,
            pixels,
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub crop: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            crop: 32,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.crop == 0 {
            return Err(DataError::Config("crop must be positive".into()));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(DataError::Config(format!("std {:?} must be positive", self.std)));
        }
        Ok(())
    }

    /// Per-channel `[(0 − μ)/σ, (1 − μ)/σ]`: where `[0, 1]` pixels land
    /// after normalization.
    pub fn normalized_bounds(&self) -> ([f64; 3], [f64; 3]) {
        let lo = std::array::from_fn(|c| (0.0 - self.mean[c]) / self.std[c]);
        let hi = std::array::from_fn(|c| (1.0 - self.mean[c]) / self.std[c]);
        (lo, hi)
    }

    /// Undo normalization (used to display what the network saw).
    pub fn denormalize(&self, t: &Tensor, id: &str) -> Result<ImageSample, DataError> {
        let [c, h, w] = t.shape() else {
            return Err(DataError::Config(format!("expected a [3, h, w] tensor, got {:?}", t.shape())));
        };
        if *c != 3 {
            return Err(DataError::Config(format!("expected 3 channels, got {c}")));
        }
        let (h, w) = (*h, *w);
        let mut pixels = vec![0.0; h * w * 3];
        for ch in 0..3 {
            for i in 0..h * w {
                let v = t.data()[ch * h * w + i] * self.std[ch] + self.mean[ch];
                pixels[i * 3 + ch] = v.clamp(0.0, 1.0);
            }
        }
        ImageSample::new(id, 0, h, w, pixels)
    }
}

/// Center crop (offsets `⌊(H − crop)/2⌋`, `⌊(W − crop)/2⌋`) then per-channel
/// `(x − μ_c)/σ_c`, returned channel-first.
pub fn preprocess(img: &ImageSample, cfg: &PreprocessConfig) -> Result<Tensor, DataError> {
    cfg.validate()?;
    let k = cfg.crop;
    if img.height < k || img.width < k {
        return Err(DataError::TooSmall {
            id: img.id.clone(),
            h: img.height,
            w: img.width,
            crop: k,
        });
    }
    let (oy, ox) = ((img.height - k) / 2, (img.width - k) / 2);
    let mut data = vec![0.0; 3 * k * k];
    for c in 0..3 {
        for y in 0..k {
            for x in 0..k {
                data[(c * k + y) * k + x] = (img.at(oy + y, ox + x, c) - cfg.mean[c]) / cfg.std[c];
            }
        }
    }
    Tensor::new(&[3, k, k], data).map_err(|e| DataError::Config(e.to_string()))
}
