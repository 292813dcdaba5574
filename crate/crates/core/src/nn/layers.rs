use rand::Rng;

use super::graph::BatchNormIds;
use super::params::{glorot_uniform, he_normal};
use super::{Graph, NodeId, ParamId, ParamKind, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: (usize, usize),
    pub groups: usize,
}

/// Static description of a convolution, used when registering parameters.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Square kernel with "same" padding for odd sizes.
    pub fn same(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel: (k, k),
            stride,
            pad: (k / 2, k / 2),
            groups: 1,
            bias: false,
        }
    }

    /// Square kernel without padding.
    pub fn valid(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        ConvSpec {
            pad: (0, 0),
            ..Self::same(cin, cout, k, stride)
        }
    }

    /// Rectangular kernel with "same" padding.
    pub fn rect(cin: usize, cout: usize, kh: usize, kw: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel: (kh, kw),
            stride: 1,
            pad: (kh / 2, kw / 2),
            groups: 1,
            bias: false,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

impl Conv2d {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, spec: ConvSpec) -> Self {
        let shape = [spec.cout, spec.cin / spec.groups, spec.kernel.0, spec.kernel.1];
        let weight = store.add(format!("{name}.weight"), he_normal(shape, rng), ParamKind::Weight);
        let bias = spec.bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros([spec.cout, 1, 1, 1]),
                ParamKind::Weight,
            )
        });
        Conv2d {
            weight,
            bias,
            stride: spec.stride,
            pad: spec.pad,
            groups: spec.groups,
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.conv(x, self.weight, self.bias, self.stride, self.pad, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub ids: BatchNormIds,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let shape = [channels, 1, 1, 1];
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(shape, 1.0), ParamKind::Weight);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(shape), ParamKind::Weight);
        let mean = store.add(format!("{name}.running_mean"), Tensor::zeros(shape), ParamKind::Buffer);
        let var = store.add(
            format!("{name}.running_var"),
            Tensor::full(shape, 1.0),
            ParamKind::Buffer,
        );
        BatchNorm2d {
            ids: BatchNormIds { gamma, beta, mean, var },
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.batch_norm(x, self.ids)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Relu6,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Relu6 => g.relu6(x),
        }
    }
}

/// Convolution, batch norm, activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Activation,
}

impl ConvBnAct {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, spec: ConvSpec, act: Activation) -> Self {
        ConvBnAct {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), spec),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), spec.cout),
            act,
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let y = self.conv.apply(g, x);
        let y = self.bn.apply(g, y);
        self.act.apply(g, y)
    }
}

/// Batch norm, activation, convolution (pre-activation ordering).
#[derive(Clone, Debug)]
pub struct BnActConv {
    pub bn: BatchNorm2d,
    pub act: Activation,
    pub conv: Conv2d,
}

impl BnActConv {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, spec: ConvSpec, act: Activation) -> Self {
        BnActConv {
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), spec.cin),
            act,
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), spec),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let y = self.bn.apply(g, x);
        let y = self.act.apply(g, y);
        self.conv.apply(g, y)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fin: usize, fout: usize) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            glorot_uniform([fout, fin, 1, 1], rng),
            ParamKind::Weight,
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros([fout, 1, 1, 1]),
            ParamKind::Weight,
        );
        Dense { weight, bias }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.linear(x, self.weight, self.bias)
    }
}
