use rand::Rng;

use crate::nn::layers::{Activation, ConvBnAct, ConvSpec};
use crate::nn::{Graph, NodeId, ParamStore};

use super::ModelScale;

pub const FEATURE_LAYER: &str = "mixed10";

enum Step {
    Conv(ConvBnAct),
    AvgPool3,
    MaxPool3Stride2,
}

/// A sequential branch, optionally ending in two parallel convolutions
/// whose outputs are concatenated (the 1×3 / 3×1 split).
struct Branch {
    steps: Vec<Step>,
    split: Option<(ConvBnAct, ConvBnAct)>,
}

impl Branch {
    fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut y = x;
        for s in &self.steps {
            y = match s {
                Step::Conv(c) => c.apply(g, y),
                Step::AvgPool3 => g.avg_pool(y, 3, 1, 1),
                Step::MaxPool3Stride2 => g.max_pool(y, 3, 2, 0),
            };
        }
        if let Some((a, b)) = &self.split {
            let ya = a.apply(g, y);
            let yb = b.apply(g, y);
            y = g.concat(&[ya, yb]);
        }
        y
    }
}

struct Block {
    name: String,
    branches: Vec<Branch>,
}

/// Builds branches while tracking channel counts and unique parameter names.
struct Builder<'a, R> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    div: usize,
    counter: usize,
}

impl<R: Rng> Builder<'_, R> {
    fn w(&self, c: usize) -> usize {
        (c / self.div).max(1)
    }

    fn conv(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: (usize, usize),
        stride: usize,
        same: bool,
    ) -> ConvBnAct {
        self.counter += 1;
        let spec = ConvSpec {
            cin,
            cout,
            kernel: k,
            stride,
            pad: if same { (k.0 / 2, k.1 / 2) } else { (0, 0) },
            groups: 1,
            bias: false,
        };
        ConvBnAct::new(
            self.store,
            self.rng,
            &format!("{prefix}.conv2d_{}", self.counter),
            spec,
            Activation::Relu,
        )
    }

    /// Sequence of same-padded stride-1 convs; returns the branch and its width.
    fn chain(&mut self, prefix: &str, cin: usize, layers: &[(usize, (usize, usize))]) -> (Vec<Step>, usize) {
        let mut c = cin;
        let mut steps = Vec::new();
        for &(out, k) in layers {
            let out = self.w(out);
            steps.push(Step::Conv(self.conv(prefix, c, out, k, 1, true)));
            c = out;
        }
        (steps, c)
    }

    fn block_a(&mut self, name: &str, cin: usize, pool: usize) -> (Block, usize) {
        let (b1, c1) = self.chain(name, cin, &[(64, (1, 1))]);
        let (b5, c5) = self.chain(name, cin, &[(48, (1, 1)), (64, (5, 5))]);
        let (b3, c3) = self.chain(name, cin, &[(64, (1, 1)), (96, (3, 3)), (96, (3, 3))]);
        let (mut bp, cp) = self.chain(name, cin, &[(pool, (1, 1))]);
        bp.insert(0, Step::AvgPool3);
        (self.block(name, vec![b1, b5, b3, bp]), c1 + c5 + c3 + cp)
    }

    fn block_b(&mut self, name: &str, cin: usize) -> (Block, usize) {
        let c3 = self.w(384);
        let b3 = vec![Step::Conv(self.conv(name, cin, c3, (3, 3), 2, false))];
        let (mut bd, cd) = self.chain(name, cin, &[(64, (1, 1)), (96, (3, 3))]);
        let cd_out = self.w(96);
        bd.push(Step::Conv(self.conv(name, cd, cd_out, (3, 3), 2, false)));
        let bp = vec![Step::MaxPool3Stride2];
        (self.block(name, vec![b3, bd, bp]), c3 + cd_out + cin)
    }

    fn block_c(&mut self, name: &str, cin: usize, c7: usize, k: usize) -> (Block, usize) {
        let (b1, c1) = self.chain(name, cin, &[(192, (1, 1))]);
        let (b7, c7o) = self.chain(name, cin, &[(c7, (1, 1)), (c7, (1, k)), (192, (k, 1))]);
        let (bd, cd) = self.chain(
            name,
            cin,
            &[(c7, (1, 1)), (c7, (k, 1)), (c7, (1, k)), (c7, (k, 1)), (192, (1, k))],
        );
        let (mut bp, cp) = self.chain(name, cin, &[(192, (1, 1))]);
        bp.insert(0, Step::AvgPool3);
        (self.block(name, vec![b1, b7, bd, bp]), c1 + c7o + cd + cp)
    }

    fn block_d(&mut self, name: &str, cin: usize, k: usize) -> (Block, usize) {
        let (mut b3, c3) = self.chain(name, cin, &[(192, (1, 1))]);
        let c3o = self.w(320);
        b3.push(Step::Conv(self.conv(name, c3, c3o, (3, 3), 2, false)));
        let (mut b7, c7) = self.chain(name, cin, &[(192, (1, 1)), (192, (1, k)), (192, (k, 1))]);
        let c7o = self.w(192);
        b7.push(Step::Conv(self.conv(name, c7, c7o, (3, 3), 2, false)));
        let bp = vec![Step::MaxPool3Stride2];
        (self.block(name, vec![b3, b7, bp]), c3o + c7o + cin)
    }

    fn block_e(&mut self, name: &str, cin: usize) -> (Block, usize) {
        let (b1, c1) = self.chain(name, cin, &[(320, (1, 1))]);
        let (b3, c3) = self.chain(name, cin, &[(384, (1, 1))]);
        let s = self.w(384);
        let split3 = (
            self.conv(name, c3, s, (1, 3), 1, true),
            self.conv(name, c3, s, (3, 1), 1, true),
        );
        let (bd, cd) = self.chain(name, cin, &[(448, (1, 1)), (384, (3, 3))]);
        let splitd = (
            self.conv(name, cd, s, (1, 3), 1, true),
            self.conv(name, cd, s, (3, 1), 1, true),
        );
        let (mut bp, cp) = self.chain(name, cin, &[(192, (1, 1))]);
        bp.insert(0, Step::AvgPool3);
        let branches = vec![
            Branch { steps: b1, split: None },
            Branch {
                steps: b3,
                split: Some(split3),
            },
            Branch {
                steps: bd,
                split: Some(splitd),
            },
            Branch { steps: bp, split: None },
        ];
        (
            Block {
                name: name.to_string(),
                branches,
            },
            c1 + 2 * s + 2 * s + cp,
        )
    }

    fn block(&self, name: &str, branches: Vec<Vec<Step>>) -> Block {
        Block {
            name: name.to_string(),
            branches: branches
                .into_iter()
                .map(|steps| Branch { steps, split: None })
                .collect(),
        }
    }
}

/// Inception-v3: parallel multi-scale branches with factorised convolutions.
pub struct InceptionV3 {
    stem: Branch,
    blocks: Vec<Block>,
    out_channels: usize,
}

impl InceptionV3 {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, scale: ModelScale) -> Self {
        let div = match scale {
            ModelScale::Full => 1,
            ModelScale::Compact => 8,
        };
        let mut b = Builder {
            store,
            rng,
            div,
            counter: 0,
        };
        let mut stem = Vec::new();
        let mut c;
        match scale {
            ModelScale::Full => {
                let c32 = b.w(32);
                stem.push(Step::Conv(b.conv("stem", 3, c32, (3, 3), 2, false)));
                stem.push(Step::Conv(b.conv("stem", c32, c32, (3, 3), 1, false)));
                let c64 = b.w(64);
                stem.push(Step::Conv(b.conv("stem", c32, c64, (3, 3), 1, true)));
                stem.push(Step::MaxPool3Stride2);
                let c80 = b.w(80);
                stem.push(Step::Conv(b.conv("stem", c64, c80, (1, 1), 1, false)));
                let c192 = b.w(192);
                stem.push(Step::Conv(b.conv("stem", c80, c192, (3, 3), 1, false)));
                stem.push(Step::MaxPool3Stride2);
                c = c192;
            }
            ModelScale::Compact => {
                let (s, cc) = b.chain("stem", 3, &[(64, (3, 3)), (128, (3, 3))]);
                stem = s;
                c = cc;
            }
        }
        let mut blocks = Vec::new();
        let mut push = |blk: (Block, usize), c: &mut usize| {
            blocks.push(blk.0);
            *c = blk.1;
        };
        match scale {
            ModelScale::Full => {
                push(b.block_a("mixed0", c, 32), &mut c);
                push(b.block_a("mixed1", c, 64), &mut c);
                push(b.block_a("mixed2", c, 64), &mut c);
                push(b.block_b("mixed3", c), &mut c);
                push(b.block_c("mixed4", c, 128, 7), &mut c);
                push(b.block_c("mixed5", c, 160, 7), &mut c);
                push(b.block_c("mixed6", c, 160, 7), &mut c);
                push(b.block_c("mixed7", c, 192, 7), &mut c);
                push(b.block_d("mixed8", c, 7), &mut c);
                push(b.block_e("mixed9", c), &mut c);
                push(b.block_e(FEATURE_LAYER, c), &mut c);
            }
            ModelScale::Compact => {
                push(b.block_a("mixed0", c, 32), &mut c);
                push(b.block_b("mixed3", c), &mut c);
                push(b.block_c("mixed4", c, 128, 3), &mut c);
                push(b.block_e(FEATURE_LAYER, c), &mut c);
            }
        }
        InceptionV3 {
            stem: Branch {
                steps: stem,
                split: None,
            },
            blocks,
            out_channels: c,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn features(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut y = self.stem.apply(g, x);
        for blk in &self.blocks {
            let outs: Vec<NodeId> = blk.branches.iter().map(|br| br.apply(g, y)).collect();
            y = g.concat(&outs);
            g.name(y, &blk.name);
        }
        y
    }
}
