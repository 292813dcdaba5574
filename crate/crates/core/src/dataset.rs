//! Dataset discovery, stratified splitting, and minority-class oversampling.
//!
//! The on-disk layout is one subdirectory per class:
//!
//! ```text
//! root/
//!   Brown Blight/img_001.jpg
//!   Healthy leaf/img_002.png
//! ```
//!
//! Class indices follow the lexicographic order of the subdirectory names.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

pub const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png"];

/// Ordered list of class labels. Indices elsewhere refer to this order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassRegistry {
    names: Vec<String>,
}

impl ClassRegistry {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::InvalidRegistry("no classes".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(Error::InvalidRegistry("empty class name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::InvalidRegistry(format!("duplicate class name {n:?}")));
            }
        }
        Ok(ClassRegistry { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for ClassRegistry {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        ClassRegistry::new(names)
    }
}

impl From<ClassRegistry> for Vec<String> {
    fn from(r: ClassRegistry) -> Self {
        r.names
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledPath {
    pub path: PathBuf,
    pub class_index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    registry: ClassRegistry,
    items: Vec<LabeledPath>,
}

impl DatasetIndex {
    /// Checks that labels are in range and paths are distinct.
    pub fn new(registry: ClassRegistry, items: Vec<LabeledPath>) -> Result<Self> {
        let mut seen = HashSet::new();
        for it in &items {
            if it.class_index >= registry.count() {
                return Err(Error::LabelOutOfRange {
                    label: it.class_index,
                    classes: registry.count(),
                });
            }
            if !seen.insert(&it.path) {
                return Err(Error::InvalidManifest(format!("duplicate path {}", it.path.display())));
            }
        }
        Ok(DatasetIndex { registry, items })
    }

    pub fn registry(&self) -> &ClassRegistry {
        &self.registry
    }

    pub fn items(&self) -> &[LabeledPath] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.registry.count()];
        for it in &self.items {
            counts[it.class_index] += 1;
        }
        counts
    }
}

/// A file that was excluded during scanning.
#[derive(Clone, Debug)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

/// Indexes `root/<class>/<image>` and drops files that fail to decode.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    scan_dataset_with_report(root).map(|(index, _)| index)
}

/// Like [`scan_dataset`], also returning the files that were skipped.
pub fn scan_dataset_with_report(root: &Path) -> Result<(DatasetIndex, Vec<SkippedFile>)> {
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    let names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    if names.is_empty() {
        return Err(Error::InvalidRegistry(format!(
            "no class subdirectories under {}",
            root.display()
        )));
    }
    let registry = ClassRegistry::new(names)?;

    let mut candidates = Vec::new();
    for (class_index, dir) in class_dirs.iter().enumerate() {
        for p in sorted_entries(dir)? {
            if p.is_file() && has_image_extension(&p) {
                candidates.push(LabeledPath { path: p, class_index });
            }
        }
    }

    let verdicts = par::map_slice(&candidates, |c| {
        image::ImageReader::open(&c.path)
            .map_err(|e| e.to_string())
            .and_then(|r| r.with_guessed_format().map_err(|e| e.to_string()))
            .and_then(|r| r.decode().map(|_| ()).map_err(|e| e.to_string()))
    });

    let mut items = Vec::with_capacity(candidates.len());
    let mut skipped = Vec::new();
    for (c, v) in candidates.into_iter().zip(verdicts) {
        match v {
            Ok(()) => items.push(c),
            Err(reason) => {
                log::warn!("skipping undecodable image {}: {reason}", c.path.display());
                skipped.push(SkippedFile { path: c.path, reason });
            }
        }
    }

    let index = DatasetIndex::new(registry, items)?;
    for (i, n) in index.class_counts().into_iter().enumerate() {
        if n == 0 {
            return Err(Error::EmptyClassDirectory(class_dirs[i].clone()));
        }
    }
    Ok((index, skipped))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.70,
            val: 0.20,
            test: 0.10,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let sum = self.train + self.val + self.test;
        let in_range = [self.train, self.val, self.test]
            .iter()
            .all(|r| (0.0..=1.0).contains(r));
        if !in_range || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::RatioSumInvalid(sum));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for a class of `n` items: floors, remainder to test.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        // The epsilon absorbs products like 90 * 0.7 = 62.999...
        let tr = ((n as f64) * self.train + 1e-9).floor() as usize;
        let va = ((n as f64) * self.val + 1e-9).floor() as usize;
        let tr = tr.min(n);
        let va = va.min(n - tr);
        (tr, va, n - tr - va)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

impl SplitRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Val => "val",
            SplitRole::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitItem {
    pub path: PathBuf,
    pub class_index: usize,
    /// True for entries added by oversampling.
    pub duplicated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSet {
    pub registry: ClassRegistry,
    pub ratios: SplitRatios,
    pub seed: u64,
    pub train: Vec<SplitItem>,
    pub val: Vec<SplitItem>,
    pub test: Vec<SplitItem>,
}

impl SplitSet {
    pub fn role(&self, role: SplitRole) -> &[SplitItem] {
        match role {
            SplitRole::Train => &self.train,
            SplitRole::Val => &self.val,
            SplitRole::Test => &self.test,
        }
    }

    pub fn class_counts(&self, role: SplitRole) -> Vec<usize> {
        let mut counts = vec![0; self.registry.count()];
        for it in self.role(role) {
            counts[it.class_index] += 1;
        }
        counts
    }
}

/// Per-class generator keyed by `(seed, class_index)`.
fn class_rng(seed: u64, class_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class_index as u64);
    rng
}

/// Shuffles each class with its own generator and cuts it by the floor rule.
pub fn stratified_split(index: &DatasetIndex, ratios: SplitRatios, seed: u64) -> Result<SplitSet> {
    ratios.validate()?;
    let registry = index.registry().clone();
    let mut per_class: Vec<Vec<&LabeledPath>> = vec![Vec::new(); registry.count()];
    for it in index.items() {
        per_class[it.class_index].push(it);
    }
    for (c, items) in per_class.iter().enumerate() {
        if items.len() < 3 {
            return Err(Error::SplitInfeasible {
                class: registry.name(c).unwrap_or_default().to_string(),
                count: items.len(),
            });
        }
    }
    let mut split = SplitSet {
        registry,
        ratios,
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (c, mut items) in per_class.into_iter().enumerate() {
        items.sort_by(|a, b| a.path.cmp(&b.path));
        items.shuffle(&mut class_rng(seed, c));
        let (tr, va, _) = ratios.sizes(items.len());
        for (k, it) in items.into_iter().enumerate() {
            let entry = SplitItem {
                path: it.path.clone(),
                class_index: c,
                duplicated: false,
            };
            if k < tr {
                split.train.push(entry);
            } else if k < tr + va {
                split.val.push(entry);
            } else {
                split.test.push(entry);
            }
        }
    }
    Ok(split)
}

/// Duplicates minority-class training items until every class matches the largest.
pub fn oversample_training(split: &SplitSet, seed: u64) -> Result<SplitSet> {
    let k = split.registry.count();
    let mut per_class: Vec<Vec<&SplitItem>> = vec![Vec::new(); k];
    for it in split.train.iter().filter(|it| !it.duplicated) {
        per_class[it.class_index].push(it);
    }
    let current = split.class_counts(SplitRole::Train);
    if let Some(c) = per_class.iter().position(Vec::is_empty) {
        return Err(Error::EmptyTrainClass(
            split.registry.name(c).unwrap_or_default().to_string(),
        ));
    }
    let target = current.iter().copied().max().unwrap_or(0);
    let mut out = split.clone();
    for (c, pool) in per_class.iter().enumerate() {
        let deficit = target - current[c];
        if deficit == 0 {
            continue;
        }
        let mut rng = class_rng(seed ^ 0x005E_ED0F_0E5A, c);
        for _ in 0..deficit {
            let pick = pool[rng.random_range(0..pool.len())];
            out.train.push(SplitItem {
                path: pick.path.clone(),
                class_index: c,
                duplicated: true,
            });
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    kind: String,
    seed: u64,
    ratios: [f64; 3],
    registry: ClassRegistry,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    path: PathBuf,
    class_index: usize,
    split: SplitRole,
    duplicated: bool,
}

/// Writes the split as JSON lines: one header, then one record per item.
pub fn write_manifest(split: &SplitSet, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = ManifestHeader {
        kind: "header".into(),
        seed: split.seed,
        ratios: [split.ratios.train, split.ratios.val, split.ratios.test],
        registry: split.registry.clone(),
    };
    let mut emit = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
    emit(serde_json::to_string(&header)?)?;
    for role in [SplitRole::Train, SplitRole::Val, SplitRole::Test] {
        for it in split.role(role) {
            emit(serde_json::to_string(&ManifestRecord {
                path: it.path.clone(),
                class_index: it.class_index,
                split: role,
                duplicated: it.duplicated,
            })?)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<SplitSet> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::InvalidManifest("empty manifest".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: ManifestHeader = serde_json::from_str(&first)?;
    if header.kind != "header" {
        return Err(Error::InvalidManifest("first record is not a header".into()));
    }
    let mut split = SplitSet {
        registry: header.registry,
        ratios: SplitRatios {
            train: header.ratios[0],
            val: header.ratios[1],
            test: header.ratios[2],
        },
        seed: header.seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)?;
        if rec.class_index >= split.registry.count() {
            return Err(Error::LabelOutOfRange {
                label: rec.class_index,
                classes: split.registry.count(),
            });
        }
        let item = SplitItem {
            path: rec.path,
            class_index: rec.class_index,
            duplicated: rec.duplicated,
        };
        match rec.split {
            SplitRole::Train => split.train.push(item),
            SplitRole::Val => split.val.push(item),
            SplitRole::Test => split.test.push(item),
        }
    }
    Ok(split)
}
