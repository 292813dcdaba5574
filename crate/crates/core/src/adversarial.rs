//! Fast gradient-sign perturbations, adversarial training and ε sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Classifier, TrainableClassifier};
use crate::nn::{softmax_cross_entropy, Graph, Mode, Tensor};
use crate::preprocess::{AugmentConfig, ImageTensor};
use crate::trainer::{train_with_transform, BatchTransform, SampleSource, TrainConfig, TrainingHistory};

pub const DEFAULT_SWEEP: [f64; 7] = [0.0, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialConfig {
    /// L∞ budget in `[0, 1]` pixel units.
    pub epsilon: f64,
    /// Share of every training batch replaced by perturbed copies.
    pub adversarial_fraction: f64,
    pub sweep_epsilons: Vec<f64>,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig {
            epsilon: 0.1,
            adversarial_fraction: 0.5,
            sweep_epsilons: DEFAULT_SWEEP.to_vec(),
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        check_epsilon(self.epsilon)?;
        if !(0.0..=1.0).contains(&self.adversarial_fraction) {
            return Err(Error::config("adversarial_fraction", "must lie in [0, 1]"));
        }
        for &e in &self.sweep_epsilons {
            check_epsilon(e).map_err(|_| Error::config("sweep_epsilons", "every value must lie in [0, 1]"))?;
        }
        Ok(())
    }

    /// Number of items perturbed in a batch of `batch` items.
    pub fn adversarial_count(&self, batch: usize) -> usize {
        adversarial_count(self.adversarial_fraction, batch)
    }
}

fn adversarial_count(fraction: f64, batch: usize) -> usize {
    ((fraction * batch as f64).round() as usize).min(batch)
}

fn check_epsilon(e: f64) -> Result<()> {
    if (0.0..=1.0).contains(&e) {
        Ok(())
    } else {
        Err(Error::config("epsilon", "must lie in [0, 1]"))
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of each item's cross-entropy loss with respect to the model
/// input (NCHW, in the model's input space). Computed in evaluation mode.
pub fn loss_input_gradient(model: &dyn Classifier, images: &[&ImageTensor], labels: &[usize]) -> Result<Tensor> {
    if images.len() != labels.len() {
        return Err(Error::LengthMismatch(images.len(), labels.len()));
    }
    if images.is_empty() {
        return Err(Error::EmptySplit("gradient batch"));
    }
    let k = model.num_classes();
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let mut g = Graph::new(model.params(), Mode::Eval, false);
    let x = g.input(model.to_input(images), true);
    let out = model.forward(&mut g, x);
    let (_, mut dlogits) = softmax_cross_entropy(g.value(out.logits), labels);
    dlogits.scale(images.len() as f32);
    let mut grads = g.backward(vec![(out.logits, dlogits)]);
    let gx = grads
        .take_node(x)
        .ok_or_else(|| Error::GradientUnavailable("input gradient was not recorded".into()))?;
    if !gx.all_finite() {
        return Err(Error::GradientUnavailable("input gradient is not finite".into()));
    }
    Ok(gx)
}

/// Per-image signs of the loss gradient.
///
/// Backbone standardisation divides by a positive constant, so the sign in
/// normalised space equals the sign in pixel space.
pub fn loss_gradient_signs(model: &dyn Classifier, images: &[&ImageTensor], labels: &[usize]) -> Result<Vec<Vec<f32>>> {
    let gx = loss_input_gradient(model, images, labels)?;
    Ok((0..images.len())
        .map(|i| gx.item(i).iter().map(|&v| sign(v)).collect())
        .collect())
}

fn step(img: &ImageTensor, signs: &[f32], epsilon: f32) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    ImageTensor::from_fn(h, w, |y, x, c| {
        img.get(y, x, c) + epsilon * signs[c * h * w + y * w + x]
    })
}

/// `clamp(img + ε·sign(∂L/∂img), 0, 1)` for cross-entropy at `true_class`.
pub fn fgsm_perturb(model: &dyn Classifier, img: &ImageTensor, true_class: usize, epsilon: f64) -> Result<ImageTensor> {
    Ok(fgsm_batch(model, &[img], &[true_class], epsilon)?.remove(0))
}

pub fn fgsm_batch(
    model: &dyn Classifier,
    images: &[&ImageTensor],
    labels: &[usize],
    epsilon: f64,
) -> Result<Vec<ImageTensor>> {
    check_epsilon(epsilon)?;
    if epsilon == 0.0 || images.is_empty() {
        if let Some(&label) = labels.iter().find(|&&l| l >= model.num_classes()) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: model.num_classes(),
            });
        }
        return Ok(images.iter().map(|im| (*im).clone()).collect());
    }
    let signs = loss_gradient_signs(model, images, labels)?;
    Ok(images
        .iter()
        .zip(&signs)
        .map(|(im, s)| step(im, s, epsilon as f32))
        .collect())
}

/// Replaces the leading share of each (already shuffled) batch with FGSM
/// copies generated against the current weights.
pub struct FgsmMixer {
    pub epsilon: f64,
    pub fraction: f64,
}

impl BatchTransform for FgsmMixer {
    fn apply(&self, model: &dyn Classifier, images: &mut [ImageTensor], labels: &[usize]) -> Result<()> {
        let k = adversarial_count(self.fraction, images.len());
        if k == 0 || self.epsilon == 0.0 {
            return Ok(());
        }
        let refs: Vec<&ImageTensor> = images[..k].iter().collect();
        let perturbed = fgsm_batch(model, &refs, &labels[..k], self.epsilon)?;
        for (slot, p) in images.iter_mut().zip(perturbed) {
            *slot = p;
        }
        Ok(())
    }
}

/// Trains with a fixed ε; validation stays clean.
pub fn adversarial_train<M: TrainableClassifier>(
    model: &mut M,
    train: &dyn SampleSource,
    val: &dyn SampleSource,
    train_cfg: &TrainConfig,
    augment: &AugmentConfig,
    adv_cfg: &AdversarialConfig,
) -> Result<TrainingHistory> {
    adv_cfg.validate()?;
    let mixer = FgsmMixer {
        epsilon: adv_cfg.epsilon,
        fraction: adv_cfg.adversarial_fraction,
    };
    let active = adv_cfg.epsilon > 0.0 && adv_cfg.adversarial_fraction > 0.0;
    let transform: Option<&dyn BatchTransform> = if active { Some(&mixer) } else { None };
    train_with_transform(model, train, val, train_cfg, augment, transform)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub optimal_epochs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// One JSON record per ε.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(SweepReport { rows })
    }

    pub fn render_text(&self) -> String {
        let mut s = format!(
            "{:>8} {:>10} {:>10} {:>8}\n",
            "epsilon", "val_loss", "val_acc", "epochs"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>8} {:>10.4} {:>10.4} {:>8}",
                r.epsilon, r.val_loss, r.val_accuracy, r.optimal_epochs
            );
        }
        s
    }
}

/// Retrains a fresh model per ε and records its best epoch.
///
/// `build` must return an identically initialised model on every call.
pub fn epsilon_sweep<M: TrainableClassifier>(
    mut build: impl FnMut() -> Result<M>,
    train: &dyn SampleSource,
    val: &dyn SampleSource,
    train_cfg: &TrainConfig,
    augment: &AugmentConfig,
    adv_cfg: &AdversarialConfig,
) -> Result<SweepReport> {
    adv_cfg.validate()?;
    if adv_cfg.sweep_epsilons.is_empty() {
        return Err(Error::config("sweep_epsilons", "must not be empty"));
    }
    let mut rows = Vec::with_capacity(adv_cfg.sweep_epsilons.len());
    for &epsilon in &adv_cfg.sweep_epsilons {
        let mut model = build()?;
        let cfg = AdversarialConfig {
            epsilon,
            ..adv_cfg.clone()
        };
        log::info!("sweep: training at epsilon {epsilon}");
        let history = adversarial_train(&mut model, train, val, train_cfg, augment, &cfg)?;
        let best = history.best().ok_or(Error::EmptySplit("validation"))?;
        rows.push(SweepRow {
            epsilon,
            val_loss: best.val_loss,
            val_accuracy: best.val_accuracy,
            optimal_epochs: history.best_epoch,
        });
    }
    Ok(SweepReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_rounds_to_items() {
        let cfg = AdversarialConfig::default();
        assert_eq!(cfg.adversarial_count(32), 16);
        assert_eq!(cfg.adversarial_count(5), 3);
        assert_eq!(cfg.adversarial_count(1), 1);
        let none = AdversarialConfig {
            adversarial_fraction: 0.0,
            ..cfg
        };
        assert_eq!(none.adversarial_count(32), 0);
    }

    #[test]
    fn validation_rejects_out_of_range() {
        let bad = AdversarialConfig {
            epsilon: 1.5,
            ..AdversarialConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig { .. })));
        let bad = AdversarialConfig {
            adversarial_fraction: -0.1,
            ..AdversarialConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!([sign(2.0), sign(-0.5), sign(0.0), sign(-0.0)], [1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sweep.jsonl");
        let r = SweepReport {
            rows: vec![SweepRow {
                epsilon: 0.12,
                val_loss: 0.0757,
                val_accuracy: 0.9915,
                optimal_epochs: 21,
            }],
        };
        r.save(&p).unwrap();
        assert_eq!(SweepReport::load(&p).unwrap(), r);
        assert!(r.render_text().contains("0.9915"));
    }
}
