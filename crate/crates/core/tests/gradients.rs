use tealeaf_core::adversarial::loss_input_gradient;
use tealeaf_core::models::{build_model_with, ArchitectureId, BuildOptions, Classifier, ModelScale, TinyConvNet};
use tealeaf_core::preprocess::{ImageTensor, PreprocessConfig};
use tealeaf_testkit::data::rng;
use tealeaf_testkit::oracles::loss_at;

use rand::Rng;

fn central_difference(
    model: &dyn Classifier,
    img: &ImageTensor,
    label: usize,
    at: (usize, usize, usize),
    step: f32,
) -> f64 {
    let (y, x, c) = at;
    let v = img.get(y, x, c);
    let mut plus = img.clone();
    plus.set(y, x, c, v + step);
    let mut minus = img.clone();
    minus.set(y, x, c, v - step);
    let actual = (plus.get(y, x, c) - minus.get(y, x, c)) as f64;
    (loss_at(model, &plus, label) - loss_at(model, &minus, label)) / actual
}

fn error_at_step(model: &dyn Classifier, img: &ImageTensor, label: usize, step: f32) -> f64 {
    let analytic = loss_input_gradient(model, &[img], &[label]).unwrap();
    let (h, w) = (img.height(), img.width());
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let fd = central_difference(model, img, label, (y, x, c), step);
                let a = analytic.item(0)[c * h * w + y * w + x] as f64;
                num += (fd - a).powi(2);
                den += a.powi(2);
            }
        }
    }
    (num / den.max(1e-30)).sqrt()
}

/// Relative L2 error between the analytic input gradient and central
/// differences at the best of a few steps: large steps straddle ReLU kinks,
/// small ones drown in f32 rounding.
fn finite_difference_error(model: &dyn Classifier, img: &ImageTensor, label: usize) -> f64 {
    [2e-3f32, 1e-3, 5e-4, 2.5e-4]
        .into_iter()
        .map(|step| error_at_step(model, img, label, step))
        .fold(f64::INFINITY, f64::min)
}

fn interior_image(side: usize, seed: u64) -> ImageTensor {
    let mut r = rng(seed);
    ImageTensor::from_fn(side, side, |_, _, _| r.random_range(0.1..0.9))
}

#[test]
fn tiny_net_gradient_matches_central_differences() {
    for seed in 0..3 {
        let model = TinyConvNet::new(2, 4, seed);
        let img = interior_image(8, 100 + seed);
        let err = finite_difference_error(&model, &img, (seed % 2) as usize);
        assert!(err < 1e-2, "seed {seed}: relative error {err}");
    }
}

#[test]
fn compact_backbones_gradient_matches_central_differences() {
    for arch in ArchitectureId::ALL {
        let model = build_model_with(
            arch,
            2,
            &BuildOptions {
                scale: ModelScale::Compact,
                preprocess: PreprocessConfig::square(8),
                seed: 3,
                ..BuildOptions::default()
            },
        )
        .unwrap();
        let img = interior_image(8, 7);
        // Deeper f32 stacks carry more rounding noise into the differences.
        let err = finite_difference_error(&model, &img, 1);
        assert!(err < 2e-2, "{arch}: relative error {err}");
    }
}
