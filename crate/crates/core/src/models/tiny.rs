//! Two-convolution network for synthetic tasks and quick checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Classifier, NetOutput, TrainableClassifier, HEAD_PREFIX};
use crate::nn::layers::{Conv2d, ConvSpec, Dense};
use crate::nn::{Graph, NodeId, ParamStore};

pub const FEATURE_LAYER: &str = "features";

/// conv3×3 → ReLU → max-pool 2 → conv3×3 → ReLU → global pool → dense.
pub struct TinyConvNet {
    params: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    head: Dense,
    classes: usize,
}

impl TinyConvNet {
    pub fn new(num_classes: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let conv1 = Conv2d::new(
            &mut params,
            &mut rng,
            "conv1",
            ConvSpec::same(3, width, 3, 1).with_bias(),
        );
        let conv2 = Conv2d::new(
            &mut params,
            &mut rng,
            "conv2",
            ConvSpec::same(width, 2 * width, 3, 1).with_bias(),
        );
        let head = Dense::new(
            &mut params,
            &mut rng,
            &format!("{HEAD_PREFIX}dense"),
            2 * width,
            num_classes,
        );
        TinyConvNet {
            params,
            conv1,
            conv2,
            head,
            classes: num_classes,
        }
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }
}

impl Classifier for TinyConvNet {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> NetOutput {
        let y = self.conv1.apply(g, x);
        let y = g.relu(y);
        let y = g.max_pool(y, 2, 2, 0);
        let y = self.conv2.apply(g, y);
        let features = g.relu(y);
        g.name(features, FEATURE_LAYER);
        let pooled = g.global_avg_pool(features);
        NetOutput {
            logits: self.head.apply(g, pooled),
            features: Some(features),
        }
    }

    fn feature_layer(&self) -> Option<&str> {
        Some(FEATURE_LAYER)
    }
}

impl TrainableClassifier for TinyConvNet {
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}
