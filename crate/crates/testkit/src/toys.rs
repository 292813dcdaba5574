use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tealeaf_core::models::{Classifier, NetOutput, TrainableClassifier};
use tealeaf_core::nn::{Graph, NodeId, ParamId, ParamKind, ParamStore, Tensor};

/// Dense layer straight on the flattened NCHW pixels.
pub struct LinearProbe {
    params: ParamStore,
    weight: ParamId,
    bias: ParamId,
    classes: usize,
}

impl LinearProbe {
    /// `weight` is `classes × (3·h·w)` in NCHW order.
    pub fn new(weight: Vec<f32>, bias: Vec<f32>, side: usize) -> Self {
        let classes = bias.len();
        let fin = 3 * side * side;
        assert_eq!(weight.len(), classes * fin);
        let mut params = ParamStore::new();
        let weight = params.add(
            "head.weight",
            Tensor::from_vec([classes, fin, 1, 1], weight),
            ParamKind::Weight,
        );
        let bias = params.add(
            "head.bias",
            Tensor::from_vec([classes, 1, 1, 1], bias),
            ParamKind::Weight,
        );
        LinearProbe {
            params,
            weight,
            bias,
            classes,
        }
    }

    /// Two classes on a single pixel: logit 0 is fixed at 0 and logit 1 is
    /// `w·red + b`, i.e. logistic regression on the red channel.
    pub fn logistic(w: f32, b: f32) -> Self {
        LinearProbe::new(vec![0.0, 0.0, 0.0, w, 0.0, 0.0], vec![0.0, b], 1)
    }

    pub fn random(side: usize, classes: usize, scale: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fin = 3 * side * side;
        let weight = (0..classes * fin).map(|_| rng.random_range(-scale..scale)).collect();
        let bias = (0..classes).map(|_| rng.random_range(-scale..scale)).collect();
        LinearProbe::new(weight, bias, side)
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.weight, self.bias)
    }

    /// Ignores its input entirely.
    pub fn constant(side: usize, bias: Vec<f32>) -> Self {
        LinearProbe::new(vec![0.0; bias.len() * 3 * side * side], bias, side)
    }
}

impl Classifier for LinearProbe {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> NetOutput {
        NetOutput {
            logits: g.linear(x, self.weight, self.bias),
            features: None,
        }
    }
}

impl TrainableClassifier for LinearProbe {
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// Feature maps are the red and green channels (a fixed 1×1 convolution);
/// a dense head reads their global average.
pub struct ChannelFeatures {
    params: ParamStore,
    conv: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    classes: usize,
}

impl ChannelFeatures {
    /// `head` is `classes × 2`.
    pub fn new(head: Vec<f32>) -> Self {
        let classes = head.len() / 2;
        let mut params = ParamStore::new();
        let conv = params.add(
            "select.weight",
            Tensor::from_vec([2, 3, 1, 1], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            ParamKind::Weight,
        );
        let head_w = params.add(
            "head.weight",
            Tensor::from_vec([classes, 2, 1, 1], head),
            ParamKind::Weight,
        );
        let head_b = params.add("head.bias", Tensor::zeros([classes, 1, 1, 1]), ParamKind::Weight);
        ChannelFeatures {
            params,
            conv,
            head_w,
            head_b,
            classes,
        }
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }
}

impl TrainableClassifier for ChannelFeatures {
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl Classifier for ChannelFeatures {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> NetOutput {
        let a = g.conv(x, self.conv, None, 1, (0, 0), 1);
        let pooled = g.global_avg_pool(a);
        NetOutput {
            logits: g.linear(pooled, self.head_w, self.head_b),
            features: Some(a),
        }
    }
}

/// Multiplies every head weight and bias of `class` by `factor`.
pub fn scale_class_row<M: TrainableClassifier>(
    model: &mut M,
    weight: ParamId,
    bias: ParamId,
    class: usize,
    factor: f32,
) {
    let params = model.params_mut();
    let w = params.get_mut(weight);
    let fin = w.item_len();
    w.data_mut()[class * fin..(class + 1) * fin]
        .iter_mut()
        .for_each(|v| *v *= factor);
    params.get_mut(bias).data_mut()[class] *= factor;
}

/// Zeroes every head weight so logits equal the bias.
pub fn zero_weights<M: TrainableClassifier>(model: &mut M, weight: ParamId) {
    model.params_mut().get_mut(weight).data_mut().fill(0.0);
}
