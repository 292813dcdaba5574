use rand::Rng;

use crate::nn::layers::{Activation, ConvBnAct, ConvSpec};
use crate::nn::{Graph, NodeId, ParamStore};

use super::ModelScale;

pub const FEATURE_LAYER: &str = "out_relu";

/// Expand (1×1), depthwise (3×3), linear projection (1×1).
struct InvertedResidual {
    expand: Option<ConvBnAct>,
    depthwise: ConvBnAct,
    project: ConvBnAct,
    residual: bool,
}

impl InvertedResidual {
    fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut y = x;
        if let Some(e) = &self.expand {
            y = e.apply(g, y);
        }
        y = self.depthwise.apply(g, y);
        y = self.project.apply(g, y);
        if self.residual {
            y = g.add(x, y);
        }
        y
    }
}

pub struct MobileNetV2 {
    stem: ConvBnAct,
    blocks: Vec<InvertedResidual>,
    head_conv: ConvBnAct,
    out_channels: usize,
}

/// `(expansion, channels, repeats, first stride)` per stage.
type StageRow = (usize, usize, usize, usize);

const FULL_STAGES: &[StageRow] = &[
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

const COMPACT_STAGES: &[StageRow] = &[(1, 8, 1, 1), (4, 16, 2, 2), (4, 24, 2, 1)];

impl MobileNetV2 {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, scale: ModelScale) -> Self {
        let (stem_ch, stem_stride, stages, last) = match scale {
            ModelScale::Full => (32, 2, FULL_STAGES, 1280),
            ModelScale::Compact => (16, 1, COMPACT_STAGES, 64),
        };
        let stem = ConvBnAct::new(
            store,
            rng,
            "Conv1",
            ConvSpec::same(3, stem_ch, 3, stem_stride),
            Activation::Relu6,
        );
        let mut cin = stem_ch;
        let mut blocks = Vec::new();
        for &(t, c, n, s) in stages {
            for i in 0..n {
                let stride = if i == 0 { s } else { 1 };
                let name = format!("block_{}", blocks.len());
                let hidden = cin * t;
                let expand = (t != 1).then(|| {
                    ConvBnAct::new(
                        store,
                        rng,
                        &format!("{name}_expand"),
                        ConvSpec::same(cin, hidden, 1, 1),
                        Activation::Relu6,
                    )
                });
                let depthwise = ConvBnAct::new(
                    store,
                    rng,
                    &format!("{name}_depthwise"),
                    ConvSpec::same(hidden, hidden, 3, stride).with_groups(hidden),
                    Activation::Relu6,
                );
                let project = ConvBnAct::new(
                    store,
                    rng,
                    &format!("{name}_project"),
                    ConvSpec::same(hidden, c, 1, 1),
                    Activation::Identity,
                );
                blocks.push(InvertedResidual {
                    expand,
                    depthwise,
                    project,
                    residual: stride == 1 && cin == c,
                });
                cin = c;
            }
        }
        let head_conv = ConvBnAct::new(store, rng, "Conv_1", ConvSpec::same(cin, last, 1, 1), Activation::Relu6);
        MobileNetV2 {
            stem,
            blocks,
            head_conv,
            out_channels: last,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn features(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut y = self.stem.apply(g, x);
        for b in &self.blocks {
            y = b.apply(g, y);
        }
        let y = self.head_conv.apply(g, y);
        g.name(y, FEATURE_LAYER);
        y
    }
}
