use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, ImageSample, PreprocessConfig};
use crate::nn::Tensor;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    SaltPepper,
    Speckle,
}

/// A noise model and its strength: σ for gaussian/speckle, density for
/// salt-and-pepper. Textual form `kind:value`, e.g. `gaussian:0.1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub param: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let ok = match self.kind {
            NoiseKind::Gaussian | NoiseKind::Speckle => self.param >= 0.0 && self.param.is_finite(),
            NoiseKind::SaltPepper => (0.0..=1.0).contains(&self.param),
        };
        if ok {
            Ok(())
        } else {
            Err(DataError::Noise(self.to_string()))
        }
    }

    pub fn is_identity(&self) -> bool {
        self.param == 0.0
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::SaltPepper => "salt_pepper",
            NoiseKind::Speckle => "speckle",
        };
        write!(f, "{k}:{}", self.param)
    }
}

impl FromStr for NoiseSpec {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DataError::Noise(s.to_string());
        let (k, v) = s.split_once(':').ok_or_else(bad)?;
        let kind = match k.trim() {
            "gaussian" => NoiseKind::Gaussian,
            "salt_pepper" | "salt-pepper" | "saltpepper" => NoiseKind::SaltPepper,
            "speckle" => NoiseKind::Speckle,
            _ => return Err(bad()),
        };
        let param = v.trim().parse().map_err(|_| bad())?;
        let spec = Self { kind, param };
        spec.validate()?;
        Ok(spec)
    }
}

/// Core noise routine over `n_pixels` pixels of `channels` channels;
/// `index(c, p)` locates channel `c` of pixel `p` in `data`. Values are
/// clipped to `[lo[c], hi[c]]`; salt-and-pepper sets whole pixels.
fn corrupt(
    data: &mut [f64],
    channels: usize,
    n_pixels: usize,
    index: impl Fn(usize, usize) -> usize,
    lo: &[f64],
    hi: &[f64],
    spec: NoiseSpec,
    rng: &mut Rng,
) {
    if spec.is_identity() {
        return;
    }
    match spec.kind {
        NoiseKind::Gaussian | NoiseKind::Speckle => {
            let n = Normal::new(0.0, spec.param).expect("validated sigma");
            for p in 0..n_pixels {
                for c in 0..channels {
                    let i = index(c, p);
                    let e: f64 = n.sample(rng);
                    let v = match spec.kind {
                        NoiseKind::Gaussian => data[i] + e,
                        _ => data[i] * (1.0 + e),
                    };
                    data[i] = v.clamp(lo[c], hi[c]);
                }
            }
        }
        NoiseKind::SaltPepper => {
            let half = spec.param / 2.0;
            for p in 0..n_pixels {
                let u: f64 = rng.random();
                let bound = if u < half {
                    hi
                } else if u < spec.param {
                    lo
                } else {
                    continue;
                };
                for c in 0..channels {
                    data[index(c, p)] = bound[c];
                }
            }
        }
    }
}

/// Noise on a `[0, 1]` image.
pub fn apply_noise(img: &ImageSample, spec: NoiseSpec, rng: &mut Rng) -> Result<ImageSample, DataError> {
    spec.validate()?;
    let mut out = img.clone();
    let n = img.height * img.width;
    corrupt(&mut out.pixels, 3, n, |c, p| p * 3 + c, &[0.0; 3], &[1.0; 3], spec, rng);
    Ok(out)
}

pub fn add_gaussian(img: &ImageSample, sigma: f64, rng: &mut Rng) -> Result<ImageSample, DataError> {
    apply_noise(img, NoiseSpec { kind: NoiseKind::Gaussian, param: sigma }, rng)
}

pub fn add_salt_pepper(img: &ImageSample, density: f64, rng: &mut Rng) -> Result<ImageSample, DataError> {
    apply_noise(img, NoiseSpec { kind: NoiseKind::SaltPepper, param: density }, rng)
}

pub fn add_speckle(img: &ImageSample, sigma: f64, rng: &mut Rng) -> Result<ImageSample, DataError> {
    apply_noise(img, NoiseSpec { kind: NoiseKind::Speckle, param: sigma }, rng)
}

/// Noise on a preprocessed `[3, h, w]` tensor. Sigma is in normalized units
/// and clipping uses the per-channel normalized image of `[0, 1]`.
pub fn apply_noise_normalized(t: &Tensor, spec: NoiseSpec, cfg: &PreprocessConfig, rng: &mut Rng) -> Result<Tensor, DataError> {
    spec.validate()?;
    let [3, h, w] = *t.shape() else {
        return Err(DataError::Config(format!("expected a [3, h, w] tensor, got {:?}", t.shape())));
    };
    let (lo, hi) = cfg.normalized_bounds();
    let mut out = t.clone();
    let plane = h * w;
    corrupt(out.data_mut(), 3, plane, |c, p| c * plane + p, &lo, &hi, spec, rng);
    Ok(out)
}
