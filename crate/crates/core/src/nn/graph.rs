use std::collections::HashMap;

use super::kernels::{self, ConvDims, Window};
use super::{ParamId, ParamStore, Tensor};
use crate::par;

pub const BN_EPSILON: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are reported back.
    Train,
    /// Running statistics in batch norm; every item is independent.
    Eval,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

enum Op {
    Input,
    Conv {
        x: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        dims: ConvDims,
    },
    BatchNorm {
        x: NodeId,
        ids: BatchNormIds,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu(NodeId),
    Relu6(NodeId),
    Add(NodeId, NodeId),
    Concat(Vec<NodeId>),
    MaxPool {
        x: NodeId,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: NodeId,
        win: Window,
    },
    GlobalAvgPool(NodeId),
    Linear {
        x: NodeId,
        weight: ParamId,
        bias: ParamId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// A recorded forward pass that can be differentiated in reverse.
///
/// The tape borrows the parameter store read-only, so any number of graphs
/// may run against one model concurrently.
pub struct Graph<'p> {
    params: &'p ParamStore,
    mode: Mode,
    param_grads: bool,
    nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
    stat_updates: Vec<StatUpdate>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    pub fn take_node(&mut self, id: NodeId) -> Option<Tensor> {
        self.nodes.get_mut(id.0).and_then(Option::take)
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode, param_grads: bool) -> Self {
        Graph {
            params,
            mode,
            param_grads,
            nodes: Vec::new(),
            names: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Attaches a lookup name to a node.
    pub fn name(&mut self, id: NodeId, name: &str) {
        self.names.insert(name.to_string(), id);
    }

    pub fn lookup(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    fn trainable(&self, id: ParamId) -> bool {
        self.param_grads && self.params.is_trainable(id)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Input, requires_grad)
    }

    /// Convolution with weight `[cout, cin/groups, kh, kw]`.
    ///
    /// Panics on inconsistent shapes; networks are built from validated configs.
    pub fn conv(
        &mut self,
        x: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: (usize, usize),
        groups: usize,
    ) -> NodeId {
        let [n, cin, h, w] = self.value(x).shape();
        let [cout, cin_g, kh, kw] = self.params.get(weight).shape();
        assert_eq!(cin_g * groups, cin, "conv input channels mismatch");
        assert_eq!(cout % groups, 0);
        let win = Window {
            kh,
            kw,
            stride,
            ph: pad.0,
            pw: pad.1,
        };
        let (ho, wo) = win
            .output(h, w)
            .unwrap_or_else(|| panic!("conv window {win:?} does not fit {h}x{w}"));
        let dims = ConvDims {
            cin,
            h,
            w,
            cout,
            ho,
            wo,
            groups,
            win,
        };
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        {
            let xv = self.value(x);
            let wv = self.params.get(weight).data();
            let bv = bias.map(|b| self.params.get(b).data());
            let item = cout * ho * wo;
            par::for_each_chunk_mut(out.data_mut(), item, |i, o| {
                kernels::conv_forward(xv.item(i), wv, bv, &dims, o);
            });
        }
        let tracked = self.tracked(x) || self.trainable(weight) || bias.is_some_and(|b| self.trainable(b));
        self.push(out, Op::Conv { x, weight, bias, dims }, tracked)
    }

    pub fn batch_norm(&mut self, x: NodeId, ids: BatchNormIds) -> NodeId {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let plane = h * w;
        let batch_stats = self.mode == Mode::Train;
        let (mean, var): (Vec<f32>, Vec<f32>) = if batch_stats {
            let count = (n * plane) as f64;
            par::map_range(c, |ch| {
                let mut s = 0.0f64;
                let mut s2 = 0.0f64;
                for i in 0..n {
                    let p = &xv.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                    for &v in p {
                        s += v as f64;
                        s2 += (v as f64) * (v as f64);
                    }
                }
                let m = s / count;
                ((m) as f32, ((s2 / count) - m * m).max(0.0) as f32)
            })
            .into_iter()
            .unzip()
        } else {
            (
                self.params.get(ids.mean).data().to_vec(),
                self.params.get(ids.var).data().to_vec(),
            )
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let gamma = self.params.get(ids.gamma).data();
        let beta = self.params.get(ids.beta).data();
        let mut out = Tensor::zeros([n, c, h, w]);
        par::for_each_chunk_mut(out.data_mut(), c * plane, |i, o| {
            let xi = xv.item(i);
            for ch in 0..c {
                let scale = gamma[ch] * inv_std[ch];
                let shift = beta[ch] - mean[ch] * scale;
                for k in ch * plane..(ch + 1) * plane {
                    o[k] = xi[k] * scale + shift;
                }
            }
        });
        if batch_stats {
            let count = (n * plane) as f32;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            self.stat_updates.push(StatUpdate {
                mean: ids.mean,
                var: ids.var,
                batch_mean: mean.clone(),
                batch_var: var.iter().map(|v| v * unbias).collect(),
            });
        }
        let tracked = self.tracked(x) || self.trainable(ids.gamma) || self.trainable(ids.beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                ids,
                mean,
                inv_std,
                batch_stats,
            },
            tracked,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let t = self.tracked(x);
        self.push(out, Op::Relu(x), t)
    }

    pub fn relu6(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 6.0));
        let t = self.tracked(x);
        self.push(out, Op::Relu6(x), t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Add(a, b), t)
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let [n, _, h, w] = self.value(parts[0]).shape();
        let c: usize = parts.iter().map(|p| self.value(*p).c()).sum();
        let mut out = Tensor::zeros([n, c, h, w]);
        for i in 0..n {
            let mut off = 0;
            for p in parts {
                let v = self.value(*p);
                assert_eq!((v.n(), v.h(), v.w()), (n, h, w), "concat spatial mismatch");
                let src = v.item(i);
                out.item_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let t = parts.iter().any(|p| self.tracked(*p));
        self.push(out, Op::Concat(parts.to_vec()), t)
    }

    pub fn max_pool(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let win = Window::square(k, stride, pad);
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let (ho, wo) = win.output(h, w).expect("max pool window does not fit");
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let planes = xv.data().len() / (h * w);
        let args = par::map_range(planes, |p| {
            let mut o = vec![0.0; ho * wo];
            let a = kernels::max_pool_plane(&xv.data()[p * h * w..(p + 1) * h * w], h, w, &win, &mut o);
            (o, a)
        });
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for (p, (o, a)) in args.into_iter().enumerate() {
            out.data_mut()[p * ho * wo..(p + 1) * ho * wo].copy_from_slice(&o);
            argmax.extend(a);
        }
        let t = self.tracked(x);
        self.push(out, Op::MaxPool { x, argmax }, t)
    }

    pub fn avg_pool(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let win = Window::square(k, stride, pad);
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let (ho, wo) = win.output(h, w).expect("avg pool window does not fit");
        let mut out = Tensor::zeros([n, c, ho, wo]);
        par::for_each_chunk_mut(out.data_mut(), ho * wo, |p, o| {
            kernels::avg_pool_plane(&xv.data()[p * h * w..(p + 1) * h * w], h, w, &win, o);
        });
        let t = self.tracked(x);
        self.push(out, Op::AvgPool { x, win }, t)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let plane = (h * w) as f32;
        let data = xv.data().chunks(h * w).map(|p| p.iter().sum::<f32>() / plane).collect();
        let out = Tensor::from_vec([n, c, 1, 1], data);
        let t = self.tracked(x);
        self.push(out, Op::GlobalAvgPool(x), t)
    }

    /// Dense layer over flattened items; weight is `[out, in, 1, 1]`.
    pub fn linear(&mut self, x: NodeId, weight: ParamId, bias: ParamId) -> NodeId {
        let xv = self.value(x);
        let n = xv.n();
        let fin = xv.item_len();
        let wv = self.params.get(weight);
        let fout = wv.n();
        assert_eq!(wv.item_len(), fin, "linear input features mismatch");
        let mut out = Tensor::zeros([n, fout, 1, 1]);
        let b = self.params.get(bias).data();
        for i in 0..n {
            out.item_mut(i).copy_from_slice(b);
        }
        kernels::gemm(n, fin, fout, xv.data(), false, wv.data(), true, out.data_mut(), 1.0);
        let tracked = self.tracked(x) || self.trainable(weight) || self.trainable(bias);
        self.push(out, Op::Linear { x, weight, bias }, tracked)
    }

    /// Reverse-mode sweep seeded with `d(objective)/d(node)` for each seed.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>) -> Gradients {
        self.sweep(seeds, 0)
    }

    /// Like [`backward`](Self::backward) but stops once `floor` has its
    /// gradient; nothing earlier on the tape is visited.
    pub fn backward_to(&self, seeds: Vec<(NodeId, Tensor)>, floor: NodeId) -> Gradients {
        self.sweep(seeds, floor.0 + 1)
    }

    fn sweep(&self, seeds: Vec<(NodeId, Tensor)>, lowest: usize) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();
        let mut top = 0;
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.value(id).shape(), "seed gradient shape mismatch");
            top = top.max(id.0);
            accumulate(&mut grads[id.0], g);
        }
        for i in (lowest..=top.min(self.nodes.len().saturating_sub(1))).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads, &mut pgrads);
            grads[i] = Some(g);
        }
        Gradients {
            nodes: grads,
            params: pgrads,
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], pgrads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input => {}
            Op::Conv { x, weight, bias, dims } => {
                let xv = self.value(*x);
                let wv = self.params.get(*weight);
                let want_dx = self.tracked(*x);
                let want_dw = self.trainable(*weight);
                let items = par::map_range(xv.n(), |n| {
                    kernels::conv_backward(xv.item(n), wv.data(), g.item(n), dims, want_dx, want_dw)
                });
                let mut dx = want_dx.then(|| Tensor::zeros(xv.shape()));
                let mut dw = want_dw.then(|| Tensor::zeros(wv.shape()));
                let mut db = vec![0.0f32; dims.cout];
                for (n, (dxi, dwi, dbi)) in items.into_iter().enumerate() {
                    if let (Some(dx), Some(dxi)) = (dx.as_mut(), dxi) {
                        dx.item_mut(n).copy_from_slice(&dxi);
                    }
                    if let (Some(dw), Some(dwi)) = (dw.as_mut(), dwi) {
                        dw.data_mut().iter_mut().zip(&dwi).for_each(|(a, b)| *a += b);
                    }
                    db.iter_mut().zip(&dbi).for_each(|(a, b)| *a += b);
                }
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if let Some(dw) = dw {
                    accumulate(&mut pgrads[weight.index()], dw);
                }
                if let Some(b) = bias.filter(|b| self.trainable(*b)) {
                    accumulate(&mut pgrads[b.index()], Tensor::from_vec([dims.cout, 1, 1, 1], db));
                }
            }
            Op::BatchNorm {
                x,
                ids,
                mean,
                inv_std,
                batch_stats,
            } => {
                let xv = self.value(*x);
                let [n, c, h, w] = xv.shape();
                let plane = h * w;
                let gamma = self.params.get(ids.gamma).data();
                // Per-channel sums of dy and dy * xhat.
                let sums = par::map_range(c, |ch| {
                    let mut sdy = 0.0f64;
                    let mut sdyx = 0.0f64;
                    for item in 0..n {
                        let off = (item * c + ch) * plane;
                        for k in off..off + plane {
                            let xhat = (xv.data()[k] - mean[ch]) * inv_std[ch];
                            sdy += g.data()[k] as f64;
                            sdyx += (g.data()[k] * xhat) as f64;
                        }
                    }
                    (sdy as f32, sdyx as f32)
                });
                if self.trainable(ids.gamma) {
                    let dg = sums.iter().map(|s| s.1).collect();
                    accumulate(&mut pgrads[ids.gamma.index()], Tensor::from_vec([c, 1, 1, 1], dg));
                }
                if self.trainable(ids.beta) {
                    let db = sums.iter().map(|s| s.0).collect();
                    accumulate(&mut pgrads[ids.beta.index()], Tensor::from_vec([c, 1, 1, 1], db));
                }
                if self.tracked(*x) {
                    let m = (n * plane) as f32;
                    let mut dx = Tensor::zeros(xv.shape());
                    par::for_each_chunk_mut(dx.data_mut(), c * plane, |item, o| {
                        let xi = xv.item(item);
                        let gi = g.item(item);
                        for ch in 0..c {
                            let k0 = ch * plane;
                            let scale = gamma[ch] * inv_std[ch];
                            for k in k0..k0 + plane {
                                o[k] = if *batch_stats {
                                    let xhat = (xi[k] - mean[ch]) * inv_std[ch];
                                    scale / m * (m * gi[k] - sums[ch].0 - xhat * sums[ch].1)
                                } else {
                                    gi[k] * scale
                                };
                            }
                        }
                    });
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if *y <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Relu6(x) => {
                let mut dx = g.clone();
                for (d, xin) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *xin <= 0.0 || *xin >= 6.0 {
                        *d = 0.0;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Add(a, b) => {
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.tracked(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Concat(parts) => {
                let n = g.n();
                let mut off = 0;
                for p in parts {
                    let shape = self.value(*p).shape();
                    let len = shape[1] * shape[2] * shape[3];
                    if self.tracked(*p) {
                        let mut d = Tensor::zeros(shape);
                        for item in 0..n {
                            d.item_mut(item).copy_from_slice(&g.item(item)[off..off + len]);
                        }
                        accumulate(&mut grads[p.0], d);
                    }
                    off += len;
                }
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let plane_in = xv.plane_len();
                let plane_out = node.value.plane_len();
                let mut dx = Tensor::zeros(xv.shape());
                for (o, (&a, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                    let p = o / plane_out;
                    dx.data_mut()[p * plane_in + a as usize] += gv;
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::AvgPool { x, win } => {
                let xv = self.value(*x);
                let (h, w) = (xv.h(), xv.w());
                let plane_out = node.value.plane_len();
                let mut dx = Tensor::zeros(xv.shape());
                par::for_each_chunk_mut(dx.data_mut(), h * w, |p, d| {
                    kernels::avg_pool_plane_backward(&g.data()[p * plane_out..(p + 1) * plane_out], h, w, win, d);
                });
                accumulate(&mut grads[x.0], dx);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let plane = xv.plane_len();
                let mut dx = Tensor::zeros(xv.shape());
                for (d, gv) in dx.data_mut().chunks_mut(plane).zip(g.data()) {
                    d.fill(gv / plane as f32);
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Linear { x, weight, bias } => {
                let xv = self.value(*x);
                let wv = self.params.get(*weight);
                let (n, fin, fout) = (xv.n(), xv.item_len(), wv.n());
                if self.tracked(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    kernels::gemm(n, fout, fin, g.data(), false, wv.data(), false, dx.data_mut(), 0.0);
                    accumulate(&mut grads[x.0], dx);
                }
                if self.trainable(*weight) {
                    let mut dw = Tensor::zeros(wv.shape());
                    kernels::gemm(fout, n, fin, g.data(), true, xv.data(), false, dw.data_mut(), 0.0);
                    accumulate(&mut pgrads[weight.index()], dw);
                }
                if self.trainable(*bias) {
                    let mut db = vec![0.0f32; fout];
                    for item in 0..n {
                        db.iter_mut().zip(g.item(item)).for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut pgrads[bias.index()], Tensor::from_vec([fout, 1, 1, 1], db));
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl ParamStore {
    /// Folds batch statistics into running statistics:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate], momentum: f32) {
        for u in updates {
            let m = self.get_mut(u.mean);
            for (r, b) in m.data_mut().iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            let v = self.get_mut(u.var);
            for (r, b) in v.data_mut().iter_mut().zip(&u.batch_var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}
