//! Mini-batch training with Adam, categorical cross-entropy and early stopping.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{SplitItem, SplitSet};
use crate::error::{Error, Result};
use crate::models::{ArchitectureId, Classifier, TrainableClassifier};
use crate::nn::{argmax, softmax_cross_entropy, Adam, Graph, Mode, ParamStore, Tensor};
use crate::par;
use crate::preprocess::{augment, load_and_preprocess, AugmentConfig, ImageTensor, PreprocessConfig};

/// Fraction of each batch statistic folded into batch-norm running statistics.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CategoricalCrossentropy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub loss: LossKind,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub max_epochs: usize,
    pub patience: usize,
    /// Minimum decrease in validation loss that counts as improvement.
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_architecture(ArchitectureId::Densenet201)
    }
}

impl TrainConfig {
    /// Hyperparameters used for each architecture.
    pub fn for_architecture(arch: ArchitectureId) -> Self {
        let (learning_rate, patience) = match arch {
            ArchitectureId::Densenet201 => (1e-4, 10),
            ArchitectureId::MobilenetV2 => (1e-4, 5),
            ArchitectureId::InceptionV3 => (1e-5, 10),
        };
        TrainConfig {
            batch_size: 32,
            loss: LossKind::CategoricalCrossentropy,
            learning_rate,
            optimizer: OptimizerKind::Adam,
            max_epochs: 50,
            patience,
            min_delta: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.max_epochs < 1 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::config("patience", "must not exceed max_epochs"));
        }
        if self.min_delta < 0.0 || !self.min_delta.is_finite() {
            return Err(Error::config("min_delta", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopState {
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl EarlyStopState {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopState {
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            patience,
            min_delta,
        }
    }
}

/// Returns the next state and whether training should stop.
///
/// Improvement means `val_loss < best - min_delta`; ties are not improvements.
pub fn early_stopping_update(state: &EarlyStopState, val_loss: f64) -> (EarlyStopState, bool) {
    let mut next = *state;
    if val_loss < state.best_val_loss - state.min_delta {
        next.best_val_loss = val_loss;
        next.epochs_since_improvement = 0;
    } else {
        next.epochs_since_improvement += 1;
    }
    let stop = next.epochs_since_improvement >= next.patience;
    (next, stop)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(rename = "train_acc")]
    pub train_accuracy: f64,
    pub val_loss: f64,
    #[serde(rename = "val_acc")]
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation loss; 0 when empty.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Drives the epoch loop: `run_epoch(epoch)` trains one epoch and returns its
/// record; `on_best(epoch)` fires whenever validation loss improves.
pub fn run_epochs(
    max_epochs: usize,
    patience: usize,
    min_delta: f64,
    mut run_epoch: impl FnMut(usize) -> Result<EpochRecord>,
    mut on_best: impl FnMut(usize),
) -> Result<TrainingHistory> {
    let mut state = EarlyStopState::new(patience, min_delta);
    let mut history = TrainingHistory::default();
    for epoch in 1..=max_epochs {
        let record = run_epoch(epoch)?;
        let (next, stop) = early_stopping_update(&state, record.val_loss);
        if next.epochs_since_improvement == 0 {
            history.best_epoch = epoch;
            on_best(epoch);
        }
        state = next;
        history.records.push(record);
        if stop && epoch < max_epochs {
            history.stopped_early = true;
            break;
        }
    }
    Ok(history)
}

/// Random-access labelled images.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, index: usize) -> usize;

    fn load(&self, index: usize) -> Result<ImageTensor>;
}

/// Images decoded from disk on demand.
pub struct FileSource {
    items: Vec<SplitItem>,
    preprocess: PreprocessConfig,
}

impl FileSource {
    pub fn new(items: &[SplitItem], preprocess: &PreprocessConfig) -> Self {
        FileSource {
            items: items.to_vec(),
            preprocess: preprocess.clone(),
        }
    }

    pub fn path(&self, index: usize) -> &Path {
        &self.items[index].path
    }
}

impl SampleSource for FileSource {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn label(&self, index: usize) -> usize {
        self.items[index].class_index
    }

    fn load(&self, index: usize) -> Result<ImageTensor> {
        load_and_preprocess(&self.items[index].path, &self.preprocess)
    }
}

/// Pre-decoded images.
#[derive(Clone, Debug, Default)]
pub struct MemorySource {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
}

impl MemorySource {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<usize>) -> Self {
        assert_eq!(images.len(), labels.len(), "one label per image");
        MemorySource { images, labels }
    }

    /// Decodes every item of `source` up front.
    pub fn materialize(source: &dyn SampleSource) -> Result<Self> {
        let images = par::map_range(source.len(), |i| source.load(i))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let labels = (0..source.len()).map(|i| source.label(i)).collect();
        Ok(MemorySource { images, labels })
    }
}

impl SampleSource for MemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn load(&self, index: usize) -> Result<ImageTensor> {
        Ok(self.images[index].clone())
    }
}

/// Rewrites a training batch in place before the optimisation step.
pub trait BatchTransform: Sync {
    fn apply(&self, model: &dyn Classifier, images: &mut [ImageTensor], labels: &[usize]) -> Result<()>;
}

/// Per-item generator so augmentation does not depend on thread scheduling.
fn item_rng(seed: u64, epoch: usize, ordinal: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | ordinal as u64);
    rng
}

fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Clean loss and accuracy over a source, in evaluation mode.
pub fn evaluate_loss_accuracy<M: Classifier + ?Sized>(
    model: &M,
    source: &dyn SampleSource,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if source.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..source.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = par::map_slice(chunk, |&i| source.load(i))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageTensor> = images.iter().collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| source.label(i)).collect();
        let logits = model.logits(&model.to_input(&refs));
        let (loss, _) = softmax_cross_entropy(&logits, &labels);
        loss_sum += loss as f64 * chunk.len() as f64;
        correct += labels
            .iter()
            .enumerate()
            .filter(|(i, y)| argmax(logits.item(*i)) == **y)
            .count();
    }
    let n = source.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// One optimisation step; returns `(mean loss, correct predictions)`.
fn train_step<M: TrainableClassifier>(
    model: &mut M,
    optimizer: &mut Adam,
    inputs: Tensor,
    labels: &[usize],
) -> (f32, usize) {
    let (loss, correct, grads, stats) = {
        let mut g = Graph::new(model.params(), Mode::Train, true);
        let x = g.input(inputs, false);
        let out = model.forward(&mut g, x);
        let logits = g.value(out.logits);
        let (loss, dlogits) = softmax_cross_entropy(logits, labels);
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(i, y)| argmax(logits.item(*i)) == **y)
            .count();
        if !loss.is_finite() {
            return (loss, correct);
        }
        let grads = g.backward(vec![(out.logits, dlogits)]);
        let stats = g.take_stat_updates();
        (loss, correct, grads.into_params(), stats)
    };
    optimizer.step(model.params_mut(), &grads);
    model.params_mut().apply_stat_updates(&stats, BN_MOMENTUM);
    (loss, correct)
}

/// Trains `model` in place and returns the per-epoch history.
///
/// Augmentation applies to training items only; validation runs clean in
/// evaluation mode. On finish the weights from the best epoch are restored.
pub fn train<M: TrainableClassifier>(
    model: &mut M,
    train: &dyn SampleSource,
    val: &dyn SampleSource,
    cfg: &TrainConfig,
    augment_cfg: &AugmentConfig,
) -> Result<TrainingHistory> {
    train_with_transform(model, train, val, cfg, augment_cfg, None)
}

pub fn train_with_transform<M: TrainableClassifier>(
    model: &mut M,
    train_src: &dyn SampleSource,
    val_src: &dyn SampleSource,
    cfg: &TrainConfig,
    augment_cfg: &AugmentConfig,
    transform: Option<&dyn BatchTransform>,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    augment_cfg.validate()?;
    if train_src.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val_src.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let mut optimizer = Adam::new(cfg.learning_rate as f32);
    let mut best: Option<ParamStore> = None;
    let aug_seed = cfg.seed ^ augment_cfg.seed.rotate_left(17);

    let model_cell = std::cell::RefCell::new(model);
    let history = run_epochs(
        cfg.max_epochs,
        cfg.patience,
        cfg.min_delta,
        |epoch| {
            let mut model = model_cell.borrow_mut();
            let order = epoch_order(train_src.len(), cfg.seed, epoch);
            let mut loss_sum = 0.0f64;
            let mut correct = 0usize;
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let base = b * cfg.batch_size;
                let mut images = par::map_range(chunk.len(), |k| {
                    let img = train_src.load(chunk[k])?;
                    let mut rng = item_rng(aug_seed, epoch, base + k);
                    Ok(augment(&img, augment_cfg, &mut rng))
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
                let labels: Vec<usize> = chunk.iter().map(|&i| train_src.label(i)).collect();
                if let Some(t) = transform {
                    t.apply(&**model, &mut images, &labels)?;
                }
                let refs: Vec<&ImageTensor> = images.iter().collect();
                let inputs = model.to_input(&refs);
                let (loss, ok) = train_step(&mut **model, &mut optimizer, inputs, &labels);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
                }
                loss_sum += loss as f64 * chunk.len() as f64;
                correct += ok;
            }
            let (val_loss, val_accuracy) = evaluate_loss_accuracy(&**model, val_src, cfg.batch_size)?;
            let n = train_src.len() as f64;
            let record = EpochRecord {
                epoch,
                train_loss: loss_sum / n,
                train_accuracy: correct as f64 / n,
                val_loss,
                val_accuracy,
            };
            log::info!(
                "epoch {epoch}: loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4}",
                record.train_loss,
                record.train_accuracy,
                record.val_loss,
                record.val_accuracy
            );
            Ok(record)
        },
        |_| best = Some(model_cell.borrow().params().clone()),
    )?;
    if let Some(best) = best {
        *model_cell.into_inner().params_mut() = best;
    }
    Ok(history)
}

/// Builds file-backed sources for a split and trains on them.
pub fn train_on_split<M: TrainableClassifier>(
    model: &mut M,
    split: &SplitSet,
    preprocess: &PreprocessConfig,
    cfg: &TrainConfig,
    augment_cfg: &AugmentConfig,
) -> Result<TrainingHistory> {
    let train_src = FileSource::new(&split.train, preprocess);
    let val_src = FileSource::new(&split.val, preprocess);
    train(model, &train_src, &val_src, cfg, augment_cfg)
}

pub const HISTORY_COLUMNS: [&str; 5] = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"];

#[derive(Serialize, Deserialize)]
struct HistoryHeader {
    columns: Vec<String>,
    best_epoch: usize,
    stopped_early: bool,
}

/// JSON lines: a header naming the columns, then one record per epoch.
pub fn export_history(history: &TrainingHistory, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = HistoryHeader {
        columns: HISTORY_COLUMNS.iter().map(|s| s.to_string()).collect(),
        best_epoch: history.best_epoch,
        stopped_early: history.stopped_early,
    };
    writeln!(w, "{}", serde_json::to_string(&header)?).map_err(|e| Error::io(path, e))?;
    for r in &history.records {
        writeln!(w, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_history(path: &Path) -> Result<TrainingHistory> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::InvalidManifest(format!("{}: empty history file", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: HistoryHeader = serde_json::from_str(&first)?;
    if header.columns != HISTORY_COLUMNS {
        return Err(Error::InvalidManifest(format!(
            "{}: unexpected history columns {:?}",
            path.display(),
            header.columns
        )));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok(TrainingHistory {
        records,
        best_epoch: header.best_epoch,
        stopped_early: header.stopped_early,
    })
}

/// Default output file name for a run's history.
pub fn history_path(dir: &Path) -> PathBuf {
    dir.join("history.jsonl")
}
