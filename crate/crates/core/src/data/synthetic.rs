use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_dataset, DataError, ImageSample};
use crate::rng::{stream, substream, Rng, Stream};

pub const CLASS_NAMES: [&str; 3] = ["normal disc+vessels", "lesion blobs", "hemorrhage streaks"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OodShift {
    /// Add `amount` to every pixel, clipped to `[0, 1]`.
    BrightnessShift { amount: f64 },
    /// Dark vessels on a bright background instead of the reverse.
    TextureSwap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    /// Images generated per class, before splitting.
    pub per_class_counts: Vec<usize>,
    /// Side of the square images (pre-crop).
    pub image_size: usize,
    pub test_fraction: f64,
    pub ood_fraction: f64,
    pub ood_shift: OodShift,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_classes: 3,
            per_class_counts: vec![334, 333, 333],
            image_size: 40,
            test_fraction: 0.2,
            ood_fraction: 0.2,
            ood_shift: OodShift::TextureSwap,
            seed: 0,
        }
    }
}

/// Per-class sizes of the three splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub ood: Vec<usize>,
}

/// Stratified allocation of `round(total·fraction)` items by largest
/// remainder; ties go to the lower class index.
fn allocate(counts: &[usize], available: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let want = (total as f64 * fraction).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&n| n as f64 * fraction).collect();
    let mut out: Vec<usize> = exact.iter().zip(available).map(|(e, &a)| (e.floor() as usize).min(a)).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = want.saturating_sub(out.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if out[c] < available[c] {
            out[c] += 1;
            missing -= 1;
        }
    }
    out
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.n_classes == 0 || self.n_classes > CLASS_NAMES.len() {
            return bad(format!("n_classes must be in 1..={}", CLASS_NAMES.len()));
        }
        if self.per_class_counts.len() != self.n_classes {
            return bad(format!(
                "{} per-class counts for {} classes",
                self.per_class_counts.len(),
                self.n_classes
            ));
        }
        if self.per_class_counts.contains(&0) {
            return bad("every class needs at least one image".into());
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} is too small", self.image_size));
        }
        let f = [self.test_fraction, self.ood_fraction];
        if f.iter().any(|x| !(0.0..1.0).contains(x)) || f.iter().sum::<f64>() >= 1.0 {
            return bad(format!("split fractions {f:?} must be in [0, 1) and sum below 1"));
        }
        if let OodShift::BrightnessShift { amount } = self.ood_shift {
            if !amount.is_finite() || amount.abs() > 1.0 {
                return bad(format!("brightness shift {amount} outside [-1, 1]"));
            }
        }
        Ok(())
    }

    pub fn split_counts(&self) -> SplitCounts {
        let n = &self.per_class_counts;
        let test = allocate(n, n, self.test_fraction);
        let left: Vec<usize> = n.iter().zip(&test).map(|(a, b)| a - b).collect();
        let ood = allocate(n, &left, self.ood_fraction);
        let train = left.iter().zip(&ood).map(|(a, b)| a - b).collect();
        SplitCounts { train, test, ood }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    pub ood: Vec<ImageSample>,
}

impl SyntheticDataset {
    /// Writes `train/`, `test/` and `ood/` dataset directories under `root`.
    pub fn write(&self, root: &Path) -> Result<(), DataError> {
        fs::create_dir_all(root).map_err(|source| DataError::Io {
            path: root.to_path_buf(),
            source,
        })?;
        write_dataset(&root.join("train"), &self.train)?;
        write_dataset(&root.join("test"), &self.test)?;
        write_dataset(&root.join("ood"), &self.ood)
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn dist_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
    (qx * qx + qy * qy).sqrt()
}

/// One fundus-like image. Every image has a dark disc crossed by curved
/// vessels; class 1 adds bright blobs, class 2 dark elongated streaks.
/// Values are quantized to multiples of 1/255 so they survive 8-bit storage.
pub fn render_sample(id: &str, label: usize, size: usize, swap_texture: bool, rng: &mut Rng) -> ImageSample {
    let s = size as f64;
    let c0 = (s - 1.0) / 2.0;
    let (cx, cy) = (c0 + rng.random_range(-1.0..1.0), c0 + rng.random_range(-1.0..1.0));
    let radius = 0.47 * s;
    let inner = 0.28 * s;
    let tint_scale = rng.random_range(0.85..1.15);
    let mut tint = [0.42 * tint_scale, 0.17 * tint_scale, 0.07 * tint_scale];
    if swap_texture {
        tint.iter_mut().for_each(|t| *t *= 1.8);
    }

    let polar = |rng: &mut Rng, r_lo: f64, r_hi: f64| {
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r: f64 = rng.random_range(r_lo..r_hi);
        (cx + r * a.cos(), cy + r * a.sin(), a)
    };

    // vessel polylines sampled from quadratic Bézier curves
    let n_vessels = rng.random_range(3..=5);
    let mut vessels = Vec::with_capacity(n_vessels);
    for _ in 0..n_vessels {
        let (x0, y0, a) = polar(rng, 0.05 * s, 0.1 * s);
        let a1 = a + rng.random_range(-0.6..0.6);
        let (x2, y2) = (cx + 0.85 * radius * a1.cos(), cy + 0.85 * radius * a1.sin());
        let bend = rng.random_range(-0.12 * s..0.12 * s);
        let (mx, my) = ((x0 + x2) / 2.0, (y0 + y2) / 2.0);
        let (nx, ny) = (-(y2 - y0), x2 - x0);
        let nl = (nx * nx + ny * ny).sqrt().max(1e-9);
        let (x1, y1) = (mx + bend * nx / nl, my + bend * ny / nl);
        let pts: Vec<(f64, f64)> = (0..=16)
            .map(|k| {
                let t = k as f64 / 16.0;
                let u = 1.0 - t;
                (u * u * x0 + 2.0 * u * t * x1 + t * t * x2, u * u * y0 + 2.0 * u * t * y1 + t * t * y2)
            })
            .collect();
        vessels.push((pts, rng.random_range(0.25..0.4)));
    }

    let blobs: Vec<(f64, f64, f64, f64)> = if label == 1 {
        (0..rng.random_range(2..=5))
            .map(|_| {
                let (x, y, _) = polar(rng, 0.0, inner);
                (x, y, rng.random_range(1.2..2.0), rng.random_range(0.45..0.65))
            })
            .collect()
    } else {
        Vec::new()
    };

    let streaks: Vec<(f64, f64, f64, f64, f64, f64)> = if label == 2 {
        (0..rng.random_range(2..=4))
            .map(|_| {
                let (x, y, _) = polar(rng, 0.0, inner);
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                (x, y, theta, rng.random_range(4.0..6.0), rng.random_range(0.8..1.1), rng.random_range(0.75..0.95))
            })
            .collect()
    } else {
        Vec::new()
    };

    let grain = Normal::new(0.0, 0.015).expect("valid sigma");
    let mut pixels = vec![0.0; size * size * 3];
    for py in 0..size {
        for px in 0..size {
            let (x, y) = (px as f64, py as f64);
            let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            let inside = (radius + 0.5 - r).clamp(0.0, 1.0);
            let shade = 1.0 - 0.35 * (r / radius).powi(2).min(1.0);
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = inside * tint[c] * shade + (1.0 - inside) * 0.03;
            }
            for (pts, amp) in &vessels {
                let d = pts
                    .windows(2)
                    .map(|w| dist_to_segment(x, y, w[0], w[1]))
                    .fold(f64::INFINITY, f64::min);
                let v = amp * (-d * d / (2.0 * 0.6 * 0.6)).exp() * inside;
                if swap_texture {
                    for (c, k) in [0.9, 0.5, 0.3].iter().enumerate() {
                        rgb[c] -= k * v;
                    }
                } else {
                    for (c, k) in [1.0, 0.55, 0.35].iter().enumerate() {
                        rgb[c] += k * v;
                    }
                }
            }
            for &(bx, by, sigma, amp) in &blobs {
                let g = amp * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * sigma * sigma)).exp();
                for (c, k) in [1.0, 0.9, 0.4].iter().enumerate() {
                    rgb[c] += k * g;
                }
            }
            for &(sx, sy, theta, half, width, depth) in &streaks {
                let (dx, dy) = (x - sx, y - sy);
                let along = dx * theta.cos() + dy * theta.sin();
                let across = -dx * theta.sin() + dy * theta.cos();
                let over = (along.abs() - half).max(0.0);
                let p = (-over * over / (2.0 * 0.8 * 0.8) - across * across / (2.0 * width * width)).exp();
                for v in rgb.iter_mut() {
                    *v *= 1.0 - depth * p;
                }
            }
            let base = (py * size + px) * 3;
            for c in 0..3 {
                let g: f64 = grain.sample(rng);
                pixels[base + c] = quantize(rgb[c] + g);
            }
        }
    }
    ImageSample {
        id: id.to_string(),
        label,
        height: size,
        width: size,
        pixels,
    }
}

fn brighten(img: &mut ImageSample, amount: f64) {
    img.pixels.iter_mut().for_each(|v| *v = quantize(*v + amount));
}

/// Pure function of `cfg`: renders every image from its own sub-stream,
/// then splits each class into test, OOD and train by a seeded shuffle.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset, DataError> {
    cfg.validate()?;
    let counts = cfg.split_counts();
    let mut split_rng = stream(cfg.seed, Stream::Split);
    let mut out = SyntheticDataset {
        train: Vec::new(),
        test: Vec::new(),
        ood: Vec::new(),
    };
    let mut global = 0u64;
    for (label, &n) in cfg.per_class_counts.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut split_rng);
        let (n_test, n_ood) = (counts.test[label], counts.ood[label]);
        let mut which = vec![0u8; n];
        for &i in &order[..n_test] {
            which[i] = 1;
        }
        for &i in &order[n_test..n_test + n_ood] {
            which[i] = 2;
        }
        for (i, split) in which.into_iter().enumerate() {
            let id = format!("c{label}_{i:04}");
            let swap = split == 2 && cfg.ood_shift == OodShift::TextureSwap;
            let mut img = render_sample(&id, label, cfg.image_size, swap, &mut substream(cfg.seed, Stream::Synthetic, global));
            global += 1;
            match split {
                1 => out.test.push(img),
                2 => {
                    if let OodShift::BrightnessShift { amount } = cfg.ood_shift {
                        brighten(&mut img, amount);
                    }
                    out.ood.push(img);
                }
                _ => out.train.push(img),
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_is_600_200_200() {
        let c = SyntheticConfig::default().split_counts();
        assert_eq!(c.test, vec![67, 67, 66]);
        assert_eq!(c.ood, vec![67, 67, 66]);
        assert_eq!(c.train.iter().sum::<usize>(), 600);
    }

    #[test]
    fn allocation_respects_availability() {
        assert_eq!(allocate(&[1, 1], &[1, 1], 0.5), vec![1, 0]);
        assert_eq!(allocate(&[3], &[0], 0.5), vec![0]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = SyntheticConfig::default();
        c.per_class_counts = vec![10, 0, 10];
        assert!(c.validate().is_err());
        let mut c = SyntheticConfig::default();
        c.test_fraction = 0.6;
        c.ood_fraction = 0.5;
        assert!(c.validate().is_err());
        let mut c = SyntheticConfig::default();
        c.n_classes = 4;
        c.per_class_counts = vec![1; 4];
        assert!(c.validate().is_err());
    }

    #[test]
    fn pixels_are_8bit_exact() {
        let img = render_sample("a", 2, 20, false, &mut stream(3, Stream::Synthetic));
        assert!(img.pixels.iter().all(|v| (v * 255.0).round() / 255.0 == *v && (0.0..=1.0).contains(v)));
    }
}
