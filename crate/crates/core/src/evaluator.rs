//! Confusion matrices, per-class precision / recall / F1 and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassRegistry, SplitItem};
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::nn::argmax;
use crate::par;
use crate::preprocess::{ImageTensor, PreprocessConfig};
use crate::trainer::{FileSource, SampleSource};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub registry: ClassRegistry,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn column_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }
}

pub fn confusion_matrix(
    true_labels: &[usize],
    predicted_labels: &[usize],
    registry: &ClassRegistry,
) -> Result<ConfusionMatrix> {
    if true_labels.len() != predicted_labels.len() {
        return Err(Error::LengthMismatch(true_labels.len(), predicted_labels.len()));
    }
    let k = registry.count();
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in true_labels.iter().zip(predicted_labels) {
        for label in [t, p] {
            if label >= k {
                return Err(Error::LabelOutOfRange { label, classes: k });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        registry: registry.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub per_class: Vec<ClassScore>,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Empty rows or columns give 0 rather than an undefined ratio.
pub fn class_metrics(cm: &ConfusionMatrix) -> Result<ClassMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let per_class = (0..cm.classes())
        .map(|i| {
            let precision = ratio(cm.counts[i][i], cm.column_sum(i));
            let recall = ratio(cm.counts[i][i], cm.row_sum(i));
            ClassScore {
                class: cm.registry.names()[i].clone(),
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: cm.row_sum(i),
            }
        })
        .collect();
    Ok(ClassMetrics {
        per_class,
        accuracy: ratio(cm.trace(), total),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemPrediction {
    pub index: usize,
    pub true_class: usize,
    pub predicted_class: usize,
    pub probabilities: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub confusion: ConfusionMatrix,
    pub metrics: ClassMetrics,
    pub predictions: Vec<ItemPrediction>,
}

/// Clean inference over every item of `source`.
pub fn evaluate(
    model: &dyn Classifier,
    source: &dyn SampleSource,
    registry: &ClassRegistry,
    batch_size: usize,
) -> Result<EvaluationReport> {
    if source.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    if model.num_classes() != registry.count() {
        return Err(Error::RegistryMismatch {
            checkpoint: model.num_classes(),
            registry: registry.count(),
        });
    }
    let indices: Vec<usize> = (0..source.len()).collect();
    let mut predictions = Vec::with_capacity(source.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = par::map_slice(chunk, |&i| source.load(i))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageTensor> = images.iter().collect();
        let probs = model.predict_proba(&model.to_input(&refs));
        for (row, &i) in chunk.iter().enumerate() {
            let p = probs.item(row).to_vec();
            predictions.push(ItemPrediction {
                index: i,
                true_class: source.label(i),
                predicted_class: argmax(&p),
                probabilities: p,
            });
        }
    }
    let truth: Vec<usize> = predictions.iter().map(|p| p.true_class).collect();
    let predicted: Vec<usize> = predictions.iter().map(|p| p.predicted_class).collect();
    let confusion = confusion_matrix(&truth, &predicted, registry)?;
    let metrics = class_metrics(&confusion)?;
    Ok(EvaluationReport {
        confusion,
        metrics,
        predictions,
    })
}

pub fn evaluate_items(
    model: &dyn Classifier,
    items: &[SplitItem],
    preprocess: &PreprocessConfig,
    registry: &ClassRegistry,
    batch_size: usize,
) -> Result<EvaluationReport> {
    evaluate(model, &FileSource::new(items, preprocess), registry, batch_size)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    classes: &'a [ClassScore],
    accuracy: f64,
    class_names: &'a [String],
    matrix: &'a [Vec<u64>],
}

impl EvaluationReport {
    /// Full-precision metrics and the raw matrix.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = ReportFile {
            classes: &self.metrics.per_class,
            accuracy: self.metrics.accuracy,
            class_names: self.confusion.registry.names(),
            matrix: &self.confusion.counts,
        };
        fs::write(path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn save_text(&self, path: &Path, title: &str) -> Result<()> {
        fs::write(path, render_table(title, &self.metrics)).map_err(|e| Error::io(path, e))
    }
}

/// What [`EvaluationReport::save_json`] writes, read back.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct SavedEvaluation {
    pub classes: Vec<ClassScore>,
    pub accuracy: f64,
    pub class_names: Vec<String>,
    pub matrix: Vec<Vec<u64>>,
}

impl SavedEvaluation {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let saved: SavedEvaluation = serde_json::from_str(&text)?;
        let k = saved.class_names.len();
        if saved.matrix.len() != k || saved.matrix.iter().any(|r| r.len() != k) {
            return Err(Error::ShapeMismatch(format!(
                "{}: matrix is not {k}x{k}",
                path.display()
            )));
        }
        Ok(saved)
    }
}

/// One row per class with two-decimal precision, recall and F1.
pub fn render_table(title: &str, metrics: &ClassMetrics) -> String {
    let width = metrics
        .per_class
        .iter()
        .map(|c| c.class.len())
        .max()
        .unwrap_or(0)
        .max("Class".len());
    let mut s = String::new();
    if !title.is_empty() {
        let _ = writeln!(s, "{title}");
    }
    let _ = writeln!(
        s,
        "{:<width$}  {:>9}  {:>6}  {:>8}",
        "Class", "Precision", "Recall", "F1-Score"
    );
    for c in &metrics.per_class {
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.2}  {:>6.2}  {:>8.2}",
            c.class, c.precision, c.recall, c.f1
        );
    }
    let _ = writeln!(s, "Accuracy: {:.2}", metrics.accuracy);
    s
}
