use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimised by gradient descent.
    Weight,
    /// Running statistics; updated by the forward pass in training mode.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// Named, ordered collection of every tensor a network owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; network builders own the namespace.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(Param {
            name,
            value,
            kind,
            trainable: kind == ParamKind::Weight,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        let p = &self.entries[id.0];
        p.kind == ParamKind::Weight && p.trainable
    }

    /// Marks every weight whose name does not start with one of `keep` as frozen.
    pub fn freeze_except(&mut self, keep: &[&str]) {
        for p in &mut self.entries {
            if p.kind == ParamKind::Weight {
                p.trainable = keep.iter().any(|k| p.name.starts_with(k));
            }
        }
    }

    /// Count of scalar weights (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.len())
            .sum()
    }
}

/// He-normal initialisation for a conv kernel `[out, in/groups, kh, kw]`.
pub fn he_normal<R: Rng>(shape: [usize; 4], rng: &mut R) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f32;
    let std = (2.0 / fan_in).sqrt();
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

/// Glorot-uniform initialisation for a dense kernel `[out, in, 1, 1]`.
pub fn glorot_uniform<R: Rng>(shape: [usize; 4], rng: &mut R) -> Tensor {
    let fan_out = shape[0] as f32;
    let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
    let limit = (6.0 / (fan_in + fan_out)).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}
