use rand::Rng;

use crate::nn::layers::{Activation, BatchNorm2d, BnActConv, ConvBnAct, ConvSpec};
use crate::nn::{Graph, NodeId, ParamStore};

use super::ModelScale;

pub const FEATURE_LAYER: &str = "relu";

struct DenseLayer {
    bottleneck: BnActConv,
    conv: BnActConv,
}

struct Transition {
    conv: BnActConv,
}

enum Stage {
    Block(Vec<DenseLayer>),
    Transition(Transition),
}

/// Densely connected network: every layer in a block sees the
/// concatenation of all earlier feature maps in that block.
pub struct DenseNet {
    stem: ConvBnAct,
    stem_pool: bool,
    stages: Vec<Stage>,
    final_bn: BatchNorm2d,
    out_channels: usize,
}

struct Config {
    init_features: usize,
    growth: usize,
    bottleneck_width: usize,
    blocks: &'static [usize],
    stem_kernel: usize,
    stem_stride: usize,
    stem_pool: bool,
}

impl Config {
    fn for_scale(scale: ModelScale) -> Self {
        match scale {
            // DenseNet-201 block layout.
            ModelScale::Full => Config {
                init_features: 64,
                growth: 32,
                bottleneck_width: 4,
                blocks: &[6, 12, 48, 32],
                stem_kernel: 7,
                stem_stride: 2,
                stem_pool: true,
            },
            ModelScale::Compact => Config {
                init_features: 16,
                growth: 8,
                bottleneck_width: 4,
                blocks: &[3, 3],
                stem_kernel: 3,
                stem_stride: 1,
                stem_pool: false,
            },
        }
    }
}

impl DenseNet {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, scale: ModelScale) -> Self {
        let cfg = Config::for_scale(scale);
        let stem = ConvBnAct::new(
            store,
            rng,
            "conv1",
            ConvSpec::same(3, cfg.init_features, cfg.stem_kernel, cfg.stem_stride),
            Activation::Relu,
        );
        let mut channels = cfg.init_features;
        let mut stages = Vec::new();
        for (b, &layers) in cfg.blocks.iter().enumerate() {
            let mut block = Vec::with_capacity(layers);
            for l in 0..layers {
                let name = format!("conv{}_block{}", b + 2, l + 1);
                let mid = cfg.bottleneck_width * cfg.growth;
                block.push(DenseLayer {
                    bottleneck: BnActConv::new(
                        store,
                        rng,
                        &format!("{name}.0"),
                        ConvSpec::same(channels, mid, 1, 1),
                        Activation::Relu,
                    ),
                    conv: BnActConv::new(
                        store,
                        rng,
                        &format!("{name}.1"),
                        ConvSpec::same(mid, cfg.growth, 3, 1),
                        Activation::Relu,
                    ),
                });
                channels += cfg.growth;
            }
            stages.push(Stage::Block(block));
            if b + 1 < cfg.blocks.len() {
                let out = channels / 2;
                stages.push(Stage::Transition(Transition {
                    conv: BnActConv::new(
                        store,
                        rng,
                        &format!("pool{}", b + 2),
                        ConvSpec::same(channels, out, 1, 1),
                        Activation::Relu,
                    ),
                }));
                channels = out;
            }
        }
        let final_bn = BatchNorm2d::new(store, "bn", channels);
        DenseNet {
            stem,
            stem_pool: cfg.stem_pool,
            stages,
            final_bn,
            out_channels: channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn features(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut y = self.stem.apply(g, x);
        if self.stem_pool {
            y = g.max_pool(y, 3, 2, 1);
        }
        for stage in &self.stages {
            match stage {
                Stage::Block(layers) => {
                    for layer in layers {
                        let h = layer.bottleneck.apply(g, y);
                        let h = layer.conv.apply(g, h);
                        y = g.concat(&[y, h]);
                    }
                }
                Stage::Transition(t) => {
                    let h = t.conv.apply(g, y);
                    y = g.avg_pool(h, 2, 2, 0);
                }
            }
        }
        let y = self.final_bn.apply(g, y);
        let y = g.relu(y);
        g.name(y, FEATURE_LAYER);
        y
    }
}
