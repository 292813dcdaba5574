//! Grad-CAM and occlusion-sensitivity attribution maps, plus overlays.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::nn::{argmax, Graph, Mode, Tensor};
use crate::par;
use crate::preprocess::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapSource {
    GradCam,
    Occlusion,
}

/// Values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub source: HeatmapSource,
    pub target_class: usize,
}

impl Heatmap {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Location of the hottest cell; ties go to the first in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let i = argmax(&self.values);
        (i / self.width, i % self.width)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn to_gray8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([(self.get(y as usize, x as usize) * 255.0).round() as u8])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray8()
            .save(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

/// Divides by the maximum; a map with no positive value becomes all zeros.
pub fn normalize_by_max(values: &[f64]) -> Vec<f32> {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    if max > 0.0 {
        values.iter().map(|v| (v.max(0.0) / max) as f32).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Feature maps of the last convolutional stage and the class-score
/// gradients flowing into them, for a single image.
#[derive(Clone, Debug)]
pub struct ActivationBundle {
    /// `[1, K, h, w]`.
    pub activations: Tensor,
    pub gradients: Tensor,
    pub target_class: usize,
}

impl ActivationBundle {
    /// Pre-normalisation map `ReLU(Σ_k α_k A^k)` with `α_k` the spatial
    /// mean of the gradient, on the `h × w` feature grid.
    pub fn raw_map(&self) -> Result<Vec<f64>> {
        let (a, g) = (&self.activations, &self.gradients);
        if a.shape() != g.shape() || a.n() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "activations {:?} vs gradients {:?}",
                a.shape(),
                g.shape()
            )));
        }
        let plane = a.plane_len();
        let mut map = vec![0.0f64; plane];
        for k in 0..a.c() {
            let gk = &g.data()[k * plane..(k + 1) * plane];
            let alpha = gk.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            if alpha == 0.0 {
                continue;
            }
            let ak = &a.data()[k * plane..(k + 1) * plane];
            for (m, &v) in map.iter_mut().zip(ak) {
                *m += alpha * v as f64;
            }
        }
        map.iter_mut().for_each(|m| *m = m.max(0.0));
        Ok(map)
    }
}

/// Bilinear resize with half-pixel centres and clamped edges.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |d: usize, n_in: usize, n_out: usize| {
        let s = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn check_target(model: &dyn Classifier, target: usize) -> Result<()> {
    if target >= model.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: target,
            classes: model.num_classes(),
        });
    }
    Ok(())
}

/// Runs the model once and collects the last-stage activations together
/// with `∂(logit of target)/∂A`. The target defaults to the prediction.
pub fn activation_bundle(
    model: &dyn Classifier,
    img: &ImageTensor,
    target_class: Option<usize>,
) -> Result<ActivationBundle> {
    let mut g = Graph::new(model.params(), Mode::Eval, false);
    let x = g.input(model.to_input(&[img]), true);
    let out = model.forward(&mut g, x);
    let features = match model.feature_layer() {
        Some(name) => g.lookup(name).ok_or_else(|| Error::LayerNotFound(name.to_string()))?,
        None => out
            .features
            .ok_or_else(|| Error::LayerNotFound("last convolutional stage".into()))?,
    };
    let logits = g.value(out.logits).clone();
    let target = match target_class {
        Some(t) => t,
        None => argmax(logits.item(0)),
    };
    check_target(model, target)?;
    let mut seed = Tensor::zeros(logits.shape());
    seed.data_mut()[target] = 1.0;
    let grads = g.backward_to(vec![(out.logits, seed)], features);
    let gradients = grads
        .node(features)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(g.value(features).shape()));
    if !gradients.all_finite() {
        return Err(Error::GradientUnavailable("feature gradient is not finite".into()));
    }
    Ok(ActivationBundle {
        activations: g.value(features).clone(),
        gradients,
        target_class: target,
    })
}

pub fn grad_cam(model: &dyn Classifier, img: &ImageTensor, target_class: Option<usize>) -> Result<Heatmap> {
    let bundle = activation_bundle(model, img, target_class)?;
    let raw = bundle.raw_map()?;
    let (h, w) = (bundle.activations.h(), bundle.activations.w());
    let up = upsample_bilinear(&raw, h, w, img.height(), img.width());
    Ok(Heatmap {
        height: img.height(),
        width: img.width(),
        values: normalize_by_max(&up),
        source: HeatmapSource::GradCam,
        target_class: bundle.target_class,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// Average of the drops of every covering patch.
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub baseline_value: f32,
    pub overlap: OverlapMode,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig {
            patch_size: 32,
            stride: 16,
            baseline_value: 0.5,
            overlap: OverlapMode::Mean,
        }
    }
}

impl OcclusionConfig {
    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        if self.stride < 1 || self.stride > self.patch_size {
            return Err(Error::config("stride", "must satisfy 1 <= stride <= patch_size"));
        }
        if !(0.0..=1.0).contains(&self.baseline_value) {
            return Err(Error::config("baseline_value", "must lie in [0, 1]"));
        }
        let side = height.min(width);
        if self.patch_size > side {
            return Err(Error::PatchLargerThanImage {
                patch: self.patch_size,
                side,
            });
        }
        Ok(())
    }
}

/// Patch origins along one axis. The grid advances by `stride` while the
/// patch fits; if the last one stops short of the edge a clipped patch is
/// added so every pixel is covered.
pub fn patch_starts(side: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s + patch <= side {
        starts.push(s);
        s += stride;
    }
    if let Some(&last) = starts.last() {
        if last + patch < side {
            starts.push(last + stride);
        }
    }
    starts
}

fn occlude(img: &ImageTensor, y0: usize, x0: usize, patch: usize, value: f32) -> ImageTensor {
    let mut out = img.clone();
    for y in y0..(y0 + patch).min(img.height()) {
        for x in x0..(x0 + patch).min(img.width()) {
            for c in 0..3 {
                out.set(y, x, c, value);
            }
        }
    }
    out
}

/// Confidence drop when each patch is replaced by the baseline value.
///
/// Positions are evaluated independently (in parallel when enabled) and
/// combined in a fixed order, so the map does not depend on scheduling.
pub fn occlusion_sensitivity(
    model: &dyn Classifier,
    img: &ImageTensor,
    cfg: &OcclusionConfig,
    target_class: Option<usize>,
) -> Result<Heatmap> {
    let (h, w) = (img.height(), img.width());
    cfg.validate_for(h, w)?;
    let p0 = model.predict_image(img);
    let target = target_class.unwrap_or_else(|| argmax(&p0));
    check_target(model, target)?;
    let ys = patch_starts(h, cfg.patch_size, cfg.stride);
    let xs = patch_starts(w, cfg.patch_size, cfg.stride);
    let positions: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    let drops = par::map_slice(&positions, |&(y, x)| {
        let p = model.predict_image(&occlude(img, y, x, cfg.patch_size, cfg.baseline_value))[target];
        (p0[target] as f64 - p as f64).max(0.0)
    });

    let mut acc = vec![0.0f64; h * w];
    let mut count = vec![0u32; h * w];
    for (&(y0, x0), &d) in positions.iter().zip(&drops) {
        for y in y0..(y0 + cfg.patch_size).min(h) {
            for x in x0..(x0 + cfg.patch_size).min(w) {
                let i = y * w + x;
                match cfg.overlap {
                    OverlapMode::Mean => acc[i] += d,
                    OverlapMode::Max => acc[i] = acc[i].max(d),
                }
                count[i] += 1;
            }
        }
    }
    if cfg.overlap == OverlapMode::Mean {
        for (a, &c) in acc.iter_mut().zip(&count) {
            if c > 0 {
                *a /= c as f64;
            }
        }
    }
    Ok(Heatmap {
        height: h,
        width: w,
        values: normalize_by_max(&acc),
        source: HeatmapSource::Occlusion,
        target_class: target,
    })
}

/// Piecewise-linear ramp from dark blue (0) through cyan and yellow to dark red (1).
pub fn colormap(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let f = |centre: f32| (1.5 - (4.0 * t - centre).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

/// `(1 - alpha)·img + alpha·colormap(heat)`.
pub fn overlay(heatmap: &Heatmap, img: &ImageTensor, alpha: f32) -> Result<ImageTensor> {
    if heatmap.height != img.height() || heatmap.width != img.width() {
        return Err(Error::ShapeMismatch(format!(
            "heatmap {}x{} vs image {}x{}",
            heatmap.height,
            heatmap.width,
            img.height(),
            img.width()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", "must lie in [0, 1]"));
    }
    Ok(ImageTensor::from_fn(img.height(), img.width(), |y, x, c| {
        let heat = colormap(heatmap.get(y, x))[c];
        (1.0 - alpha) * img.get(y, x, c) + alpha * heat
    }))
}
