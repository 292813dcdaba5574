//! Deliberately naive reference implementations.

use tealeaf_core::models::Classifier;
use tealeaf_core::preprocess::ImageTensor;

/// O(N·K²) count: for every cell, scan all pairs.
pub fn brute_confusion(truth: &[usize], pred: &[usize], k: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; k]; k];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = truth.iter().zip(pred).filter(|(t, p)| **t == i && **p == j).count() as u64;
        }
    }
    m
}

/// Per-class split sizes with integer arithmetic (70 / 20 / rest).
pub fn floor_split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 70 / 100;
    let val = n * 20 / 100;
    (train, val, n - train - val)
}

fn covers(start: usize, patch: usize, p: usize) -> bool {
    p >= start && p < start + patch
}

/// Every admissible patch origin on one axis, found by trying all offsets.
fn origins(side: usize, patch: usize, stride: usize) -> Vec<usize> {
    let full: Vec<usize> = (0..side).filter(|s| s % stride == 0 && s + patch <= side).collect();
    let mut all = full.clone();
    let last = *full.last().unwrap();
    if last + patch < side {
        all.push(last + stride);
    }
    all
}

/// Occlusion map by exhaustive enumeration: one forward pass per position,
/// then each pixel averages the clamped drops of every patch touching it.
pub fn occlusion_enumeration(
    model: &dyn Classifier,
    img: &ImageTensor,
    patch: usize,
    stride: usize,
    baseline: f32,
    target: usize,
) -> Vec<f32> {
    let (h, w) = (img.height(), img.width());
    let p0 = model.predict_image(img)[target] as f64;
    let mut positions = Vec::new();
    for &y0 in &origins(h, patch, stride) {
        for &x0 in &origins(w, patch, stride) {
            let mut occluded = img.clone();
            for y in 0..h {
                for x in 0..w {
                    if covers(y0, patch, y) && covers(x0, patch, x) {
                        for c in 0..3 {
                            occluded.set(y, x, c, baseline);
                        }
                    }
                }
            }
            let p = model.predict_image(&occluded)[target] as f64;
            positions.push((y0, x0, (p0 - p).max(0.0)));
        }
    }
    let mut raw = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut n = 0;
            for &(y0, x0, d) in &positions {
                if covers(y0, patch, y) && covers(x0, patch, x) {
                    sum += d;
                    n += 1;
                }
            }
            raw[y * w + x] = sum / n as f64;
        }
    }
    let max = raw.iter().copied().fold(0.0f64, f64::max);
    raw.iter()
        .map(|v| if max > 0.0 { (v / max) as f32 } else { 0.0 })
        .collect()
}

/// Cross-entropy of one image at `label`, in f64.
pub fn loss_at(model: &dyn Classifier, img: &ImageTensor, label: usize) -> f64 {
    let logits = model.logits(&model.to_input(&[img]));
    let row: Vec<f64> = logits.item(0).iter().map(|&v| v as f64).collect();
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - row[label]
}
