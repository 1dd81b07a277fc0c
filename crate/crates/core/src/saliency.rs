//! Grad-CAM heatmaps over site activations, and overlays on input images.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{write_pgm, DataError, ImageSample};
use crate::gflowout::{GflowError, Network, Regime};
use crate::nn::{GradFilter, NnError, Session, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Gflow(#[from] GflowError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("site `{0}` is not a spatial feature map")]
    NotSpatial(String),
    #[error("unknown site `{0}`")]
    UnknownSite(String),
    #[error("class {index} out of range for {n_classes} classes")]
    Class { index: usize, n_classes: usize },
    #[error("heatmap is {hh}×{hw} but image is {ih}×{iw}")]
    Size { hh: usize, hw: usize, ih: usize, iw: usize },
}

/// Row-major `height × width` map in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub source_site: String,
    pub class_index: usize,
}

impl Heatmap {
    pub fn write_pgm(&self, path: &Path) -> Result<(), SaliencyError> {
        Ok(write_pgm(path, self.width, self.height, &self.values)?)
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = crate::metrics::argmax(&self.values);
        (i / self.width, i % self.width)
    }
}

/// Bilinear resize of a row-major map with half-pixel centers
/// (`align_corners = false`), edges clamped.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Min-max normalization. A flat map becomes all zeros if it is zero and
/// all ones otherwise.
pub fn min_max_normalize(v: &mut [f64]) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x - lo) / range);
    } else {
        let fill = if hi > 0.0 { 1.0 } else { 0.0 };
        v.iter_mut().for_each(|x| *x = fill);
    }
}

/// Unnormalized `ReLU(Σ_k α_k A_k)` on the feature grid, where `α_k` is the
/// mean gradient of `score` over the positions of unit `k`. Runs backward
/// from `score`. Activations are `[K, h, w]`, or `[h·w, K]` when `tokens`.
pub fn grad_cam_raw(tape: &mut Tape, score: Var, activation: Var, tokens: bool, grid: (usize, usize)) -> Result<Vec<f64>, SaliencyError> {
    let (gh, gw) = grid;
    let shape = tape.shape(activation).to_vec();
    let (k, positions) = match (tokens, shape.as_slice()) {
        (false, [k, h, w]) if (*h, *w) == grid => (*k, h * w),
        (true, [t, d]) if *t == gh * gw => (*d, *t),
        _ => return Err(SaliencyError::NotSpatial(format!("{shape:?}"))),
    };
    tape.backward(score)?;
    let a = tape.value(activation).to_vec();
    let g = tape.grad(activation).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; a.len()]);
    let at = |unit: usize, p: usize| if tokens { p * k + unit } else { unit * positions + p };
    let alpha: Vec<f64> = (0..k)
        .map(|u| (0..positions).map(|p| g[at(u, p)]).sum::<f64>() / positions as f64)
        .collect();
    Ok((0..positions)
        .map(|p| (0..k).map(|u| alpha[u] * a[at(u, p)]).sum::<f64>().max(0.0))
        .collect())
}

/// Grad-CAM of a raw map: upsampled to `out` and then min-max normalized,
/// so the result spans exactly `[0, 1]` unless the raw map is flat.
pub fn finish_map(raw: &[f64], grid: (usize, usize), out: (usize, usize)) -> Vec<f64> {
    let mut v = bilinear_resize(raw, grid.0, grid.1, out.0, out.1);
    min_max_normalize(&mut v);
    v
}

/// Grad-CAM for class `class_index` at `site` (default: the last site),
/// using the deterministic expected-mask forward pass. The map is taken
/// on the site's masked output.
pub fn grad_cam(net: &Network, x: &Tensor, class_index: usize, site: Option<&str>) -> Result<Heatmap, SaliencyError> {
    let n_classes = net.backbone.n_classes;
    if class_index >= n_classes {
        return Err(SaliencyError::Class { index: class_index, n_classes });
    }
    let sites = net.sites();
    let idx = match site {
        None => sites.len() - 1,
        Some(name) => sites
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| SaliencyError::UnknownSite(name.to_string()))?,
    };
    let spec = &sites[idx];
    let mut sess = Session::new(&net.params, GradFilter::All);
    let (trace, _, _) = net.forward_on(&mut sess, x, Regime::Expected, None)?;
    let score = sess.tape.index(trace.logits, class_index)?;
    let act = trace.site_outputs[idx];
    let (mut tape, _) = sess.finish();
    let raw = grad_cam_raw(&mut tape, score, act, spec.tokens, spec.grid)?;
    let size = net.backbone.input_size;
    Ok(Heatmap {
        values: finish_map(&raw, spec.grid, (size, size)),
        height: size,
        width: size,
        source_site: spec.name.clone(),
        class_index,
    })
}

/// Linear blue→red colormap.
pub fn colormap(h: f64) -> [f64; 3] {
    [h, 0.0, 1.0 - h]
}

/// `0.5·img + 0.5·colormap(heatmap)`, clipped to `[0, 1]`.
pub fn overlay(heatmap: &Heatmap, img: &ImageSample) -> Result<ImageSample, SaliencyError> {
    if (heatmap.height, heatmap.width) != (img.height, img.width) {
        return Err(SaliencyError::Size {
            hh: heatmap.height,
            hw: heatmap.width,
            ih: img.height,
            iw: img.width,
        });
    }
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for (i, h) in heatmap.values.iter().enumerate() {
        let c = colormap(*h);
        for ch in 0..3 {
            pixels.push((0.5 * img.pixels[i * 3 + ch] + 0.5 * c[ch]).clamp(0.0, 1.0));
        }
    }
    Ok(ImageSample {
        id: img.id.clone(),
        label: img.label,
        height: img.height,
        width: img.width,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let src = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(bilinear_resize(&src, 2, 2, 2, 2), src);
        assert!(bilinear_resize(&[0.7; 4], 2, 2, 5, 7).iter().all(|v| (*v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn resize_doubles_with_half_pixel_centers() {
        let up = bilinear_resize(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(up, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn normalization_edge_cases() {
        let mut z = vec![0.0; 3];
        min_max_normalize(&mut z);
        assert_eq!(z, vec![0.0; 3]);
        let mut v = vec![2.0, 4.0, 3.0];
        min_max_normalize(&mut v);
        assert_eq!(v, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn zero_heatmap_overlay_is_half_blue() {
        let img = ImageSample::constant("a", 2, 2, [0.4, 0.6, 0.8]);
        let h = Heatmap {
            values: vec![0.0; 4],
            height: 2,
            width: 2,
            source_site: "s".into(),
            class_index: 0,
        };
        let o = overlay(&h, &img).unwrap();
        assert_eq!(&o.pixels[..3], &[0.2, 0.3, 0.9]);
        let small = ImageSample::constant("b", 1, 2, [0.0; 3]);
        assert!(matches!(overlay(&h, &small), Err(SaliencyError::Size { .. })));
    }
}
