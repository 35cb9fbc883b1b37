//! Append-only gradient tape.
//!
//! Each operation evaluates eagerly and records a node; the tape is a DAG in
//! construction order, so a single reverse sweep visits every node once.
//! Gradients are accumulated per node; intermediate gradient buffers are
//! dropped as soon as the sweep has consumed them, leaf gradients survive.

use super::conv;
use super::Tensor;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

impl Padding {
    /// Per-side zero padding for an odd kernel.
    pub fn amount(self, k: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => k / 2,
        }
    }
}

/// One weight-sharing assignment inside an expanded group-convolution kernel:
/// block (slot_out, slot_in) of the planar kernel reads filter slot
/// `filter_slot`, multiplied by `scale`.
#[derive(Clone, Copy, Debug)]
pub struct OrbitEntry {
    pub slot_out: usize,
    pub slot_in: usize,
    pub filter_slot: usize,
    pub scale: f32,
}

/// Full recipe mapping a filter bank [c_out, filter_slots, c_in, k, k] to a
/// planar kernel [slots_out*c_out, slots_in*c_in, k, k]. Blocks not named by
/// any entry stay zero; no (slot_out, slot_in) pair may appear twice.
#[derive(Clone, Debug)]
pub struct OrbitPlan {
    pub slots_out: usize,
    pub slots_in: usize,
    pub entries: Vec<OrbitEntry>,
}

#[derive(Clone, Debug)]
pub enum BnMode {
    /// Normalize by batch statistics computed inside the op.
    Train,
    /// Normalize by the supplied running statistics (one entry per channel).
    Eval { mean: Vec<f32>, var: Vec<f32> },
}

enum Op {
    Leaf,
    Relu,
    Add,
    Mul,
    SumAll,
    AddChannelBias,
    Linear,
    Conv2d { stride: usize, pad: usize },
    OrbitExpand { plan: OrbitPlan },
    BatchNorm { groups: usize, mode: BnMode },
    MaxPool2d,
    AvgPoolSpatial,
    GroupMaxPool,
    SoftmaxCrossEntropy { labels: Vec<usize> },
}

enum Saved {
    None,
    /// Flat input offsets of pooling maxima.
    Arg(Vec<u32>),
    /// Batch statistics of a training-mode batchnorm, kept in f64.
    Bn { mean: Vec<f64>, inv_std: Vec<f64>, var: Vec<f64> },
    /// Per-row class probabilities of a cross-entropy node.
    Probs(Vec<f32>),
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    saved: Saved,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn take_grad(nodes: &mut [Node], id: NodeId) -> Vec<f32> {
    let n = &mut nodes[id];
    let len = n.value.numel();
    n.grad.take().unwrap_or_else(|| vec![0.0; len])
}

fn accum_into(nodes: &mut [Node], id: NodeId, contrib: &[f32]) {
    let n = &mut nodes[id];
    debug_assert_eq!(contrib.len(), n.value.numel());
    match &mut n.grad {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += *ci;
            }
        }
        None => n.grad = Some(contrib.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id].grad.as_deref()
    }

    /// Class probabilities saved by `softmax_cross_entropy`.
    pub fn probs(&self, id: NodeId) -> &[f32] {
        match &self.nodes[id].saved {
            Saved::Probs(p) => p,
            _ => panic!("node {} holds no class probabilities", id),
        }
    }

    /// Batch mean/variance saved by a training-mode `batchnorm`.
    pub fn bn_batch_stats(&self, id: NodeId) -> (Vec<f32>, Vec<f32>) {
        match &self.nodes[id].saved {
            Saved::Bn { mean, var, .. } => (
                mean.iter().map(|&v| v as f32).collect(),
                var.iter().map(|&v| v as f32).collect(),
            ),
            _ => panic!("node {} holds no batch statistics", id),
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, saved: Saved) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { op, inputs, value, saved, requires_grad, grad: None });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            saved: Saved::None,
            requires_grad,
            grad: None,
        });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x].value;
        let t = Tensor::new(v.shape(), v.data().iter().map(|&a| a.max(0.0)).collect());
        self.push(Op::Relu, vec![x], t, Saved::None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let t = Tensor::new(va.shape(), va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect());
        self.push(Op::Add, vec![a, b], t, Saved::None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let t = Tensor::new(va.shape(), va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect());
        self.push(Op::Mul, vec![a, b], t, Saved::None)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data().iter().map(|&v| v as f64).sum();
        self.push(Op::SumAll, vec![x], Tensor::scalar(s as f32), Saved::None)
    }

    /// x: [b, c, h, w], bias: [l] with l dividing c; channel ci receives
    /// bias[ci % l]. With c = groups*l this shares one bias per logical
    /// channel across all group slots.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xs = self.nodes[x].value.shape().to_vec();
        assert_eq!(xs.len(), 4, "add_channel_bias expects 4-d input");
        let c = xs[1];
        let l = self.nodes[bias].value.numel();
        assert_eq!(self.nodes[bias].value.shape().len(), 1, "bias must be 1-d");
        assert_eq!(c % l, 0, "bias length must divide channels");
        let hw = xs[2] * xs[3];
        let xd = self.nodes[x].value.data();
        let bd = self.nodes[bias].value.data();
        let mut out = xd.to_vec();
        for bi in 0..xs[0] {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                let bv = bd[ci % l];
                for v in &mut out[off..off + hw] {
                    *v += bv;
                }
            }
        }
        let t = Tensor::new(&xs, out);
        self.push(Op::AddChannelBias, vec![x, bias], t, Saved::None)
    }

    /// x: [b, f], w: [o, f], bias: [o] -> [b, o].
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> NodeId {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        assert_eq!(xs.len(), 2, "linear input must be 2-d");
        assert_eq!(ws.len(), 2, "linear weight must be 2-d");
        assert_eq!(xs[1], ws[1], "linear feature dims differ");
        let (b, f, o) = (xs[0], xs[1], ws[0]);
        assert_eq!(self.nodes[bias].value.shape(), [o], "linear bias length");
        let mut out = vec![0.0f32; b * o];
        conv::gemm(
            b,
            f,
            o,
            1.0,
            self.nodes[x].value.data(),
            f as isize,
            1,
            self.nodes[w].value.data(),
            1,
            f as isize,
            0.0,
            &mut out,
            o as isize,
            1,
        );
        let bd = self.nodes[bias].value.data();
        for bi in 0..b {
            for (oi, v) in out[bi * o..(bi + 1) * o].iter_mut().enumerate() {
                *v += bd[oi];
            }
        }
        let t = Tensor::new(&[b, o], out);
        self.push(Op::Linear, vec![x, w, bias], t, Saved::None)
    }

    /// x: [b, c_in, h, w], w: [c_out, c_in, k, k], cross-correlation, k odd.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: Padding) -> NodeId {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be 4-d");
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-d");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        assert_eq!(ws[2] % 2, 1, "conv2d kernel must be odd");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert!(stride >= 1);
        let k = ws[2];
        let pad = padding.amount(k);
        let (out, ho, wo) = conv::conv2d_forward(
            self.nodes[x].value.data(),
            xs[0],
            xs[1],
            xs[2],
            xs[3],
            self.nodes[w].value.data(),
            ws[0],
            k,
            stride,
            pad,
        );
        let t = Tensor::new(&[xs[0], ws[0], ho, wo], out);
        self.push(Op::Conv2d { stride, pad }, vec![x, w], t, Saved::None)
    }

    /// w: [c_out, filter_slots, c_in, k, k] -> planar kernel
    /// [slots_out*c_out, slots_in*c_in, k, k] per the plan.
    pub fn orbit_expand(&mut self, w: NodeId, plan: &OrbitPlan) -> NodeId {
        let ws = self.nodes[w].value.shape().to_vec();
        assert_eq!(ws.len(), 5, "orbit_expand weight must be 5-d");
        let (c_out, slots_f, c_in, k) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(ws[3], ws[4], "kernel must be square");
        let kk = k * k;
        let big_in = plan.slots_in * c_in;
        let mut out = vec![0.0f32; plan.slots_out * c_out * big_in * kk];
        if cfg!(debug_assertions) {
            let mut seen = std::collections::HashSet::new();
            for e in &plan.entries {
                assert!(e.slot_out < plan.slots_out && e.slot_in < plan.slots_in && e.filter_slot < slots_f);
                assert!(seen.insert((e.slot_out, e.slot_in)), "duplicate orbit block");
            }
        }
        let wd = self.nodes[w].value.data();
        for e in &plan.entries {
            for o in 0..c_out {
                for c in 0..c_in {
                    let src = ((o * slots_f + e.filter_slot) * c_in + c) * kk;
                    let dst = ((e.slot_out * c_out + o) * big_in + e.slot_in * c_in + c) * kk;
                    for i in 0..kk {
                        out[dst + i] = e.scale * wd[src + i];
                    }
                }
            }
        }
        let t = Tensor::new(&[plan.slots_out * c_out, big_in, k, k], out);
        self.push(Op::OrbitExpand { plan: plan.clone() }, vec![w], t, Saved::None)
    }

    /// x: [b, groups*c, h, w]; statistics and affine parameters are per
    /// channel c, shared across the group axis. scale/bias: [c].
    ///
    /// Training-mode statistics are summed as per-(row, channel) f64 partials
    /// placed in a canonical order before the final reduction, so any
    /// permutation of the batch*group rows yields bitwise-identical moments.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        scale: NodeId,
        bias: NodeId,
        groups: usize,
        eps: f64,
        mode: BnMode,
    ) -> NodeId {
        let xs = self.nodes[x].value.shape().to_vec();
        assert_eq!(xs.len(), 4, "batchnorm expects 4-d input");
        assert_eq!(xs[1] % groups, 0, "channel axis not divisible by groups");
        let cc = xs[1] / groups;
        assert_eq!(self.nodes[scale].value.shape(), [cc]);
        assert_eq!(self.nodes[bias].value.shape(), [cc]);
        let rows = xs[0] * groups;
        let hw = xs[2] * xs[3];
        let xd = self.nodes[x].value.data();
        let (mean, var) = match &mode {
            BnMode::Train => batch_moments(xd, rows, cc, hw),
            BnMode::Eval { mean, var } => {
                assert_eq!(mean.len(), cc, "running mean length");
                assert_eq!(var.len(), cc, "running var length");
                (mean.iter().map(|&v| v as f64).collect(), var.iter().map(|&v| v as f64).collect())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let sd = self.nodes[scale].value.data();
        let bd = self.nodes[bias].value.data();
        let mut out = vec![0.0f32; xd.len()];
        for r in 0..rows {
            for c in 0..cc {
                let off = (r * cc + c) * hw;
                let (m, is) = (mean[c] as f32, inv_std[c] as f32);
                let (g, b) = (sd[c], bd[c]);
                for i in 0..hw {
                    out[off + i] = (xd[off + i] - m) * is * g + b;
                }
            }
        }
        let saved = match mode {
            BnMode::Train => Saved::Bn { mean, inv_std, var },
            BnMode::Eval { .. } => Saved::Bn { mean, inv_std, var },
        };
        let t = Tensor::new(&xs, out);
        self.push(Op::BatchNorm { groups, mode }, vec![x, scale, bias], t, saved)
    }

    /// Non-overlapping k x k max pooling (stride k), trailing remainder dropped.
    pub fn maxpool2d(&mut self, x: NodeId, k: usize) -> NodeId {
        let xs = self.nodes[x].value.shape().to_vec();
        assert_eq!(xs.len(), 4, "maxpool2d expects 4-d input");
        assert!(k >= 1 && xs[2] >= k && xs[3] >= k);
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / k, w / k);
        let xd = self.nodes[x].value.data();
        assert!(xd.len() < u32::MAX as usize);
        let mut out = vec![0.0f32; b * c * ho * wo];
        let mut arg = vec![0u32; out.len()];
        for bc in 0..b * c {
            let plane = bc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for ky in 0..k {
                        for kx in 0..k {
                            let at = plane + (oy * k + ky) * w + (ox * k + kx);
                            if xd[at] > best {
                                best = xd[at];
                                best_at = at;
                            }
                        }
                    }
                    let dst = bc * ho * wo + oy * wo + ox;
                    out[dst] = best;
                    arg[dst] = best_at as u32;
                }
            }
        }
        let t = Tensor::new(&[b, c, ho, wo], out);
        self.push(Op::MaxPool2d, vec![x], t, Saved::Arg(arg))
    }

    /// Global spatial mean: [b, c, h, w] -> [b, c].
    pub fn avgpool_spatial(&mut self, x: NodeId) -> NodeId {
        let xs = self.nodes[x].value.shape().to_vec();
        assert_eq!(xs.len(), 4, "avgpool_spatial expects 4-d input");
        let (b, c) = (xs[0], xs[1]);
        let hw = xs[2] * xs[3];
        let xd = self.nodes[x].value.data();
        let mut out = vec![0.0f32; b * c];
        for (bc, v) in out.iter_mut().enumerate() {
            let s: f64 = xd[bc * hw..(bc + 1) * hw].iter().map(|&a| a as f64).sum();
            *v = (s / hw as f64) as f32;
        }
        let t = Tensor::new(&[b, c], out);
        self.push(Op::AvgPoolSpatial, vec![x], t, Saved::None)
    }

    /// Max over the group axis: [b, groups*c, h, w] -> [b, c, h, w].
    /// Ties resolve to the smallest slot.
    pub fn group_maxpool(&mut self, x: NodeId, groups: usize) -> NodeId {
        let xs = self.nodes[x].value.shape().to_vec();
        assert_eq!(xs.len(), 4, "group_maxpool expects 4-d input");
        assert!(groups >= 1 && xs[1] % groups == 0);
        let (b, c) = (xs[0], xs[1] / groups);
        let hw = xs[2] * xs[3];
        let xd = self.nodes[x].value.data();
        assert!(xd.len() < u32::MAX as usize);
        let mut out = vec![f32::NEG_INFINITY; b * c * hw];
        let mut arg = vec![0u32; out.len()];
        for bi in 0..b {
            for g in 0..groups {
                for ci in 0..c {
                    let src = ((bi * groups + g) * c + ci) * hw;
                    let dst = (bi * c + ci) * hw;
                    for i in 0..hw {
                        if xd[src + i] > out[dst + i] {
                            out[dst + i] = xd[src + i];
                            arg[dst + i] = (src + i) as u32;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[b, c, xs[2], xs[3]], out);
        self.push(Op::GroupMaxPool, vec![x], t, Saved::Arg(arg))
    }

    /// logits: [b, classes]; returns mean loss over the batch as a scalar and
    /// saves per-row probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let xs = self.nodes[logits].value.shape().to_vec();
        assert_eq!(xs.len(), 2, "cross entropy expects 2-d logits");
        let (b, classes) = (xs[0], xs[1]);
        assert_eq!(labels.len(), b, "label count must match batch");
        assert!(b > 0, "empty batch");
        for &y in labels {
            assert!(y < classes, "label {} out of range for {} classes", y, classes);
        }
        let xd = self.nodes[logits].value.data();
        let mut probs = vec![0.0f32; b * classes];
        let mut loss = 0.0f64;
        for bi in 0..b {
            let row = &xd[bi * classes..(bi + 1) * classes];
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
            let mut se = 0.0f64;
            for &v in row {
                se += (v as f64 - m).exp();
            }
            let lse = m + se.ln();
            for (j, &v) in row.iter().enumerate() {
                probs[bi * classes + j] = (v as f64 - lse).exp() as f32;
            }
            loss += lse - row[labels[bi]] as f64;
        }
        loss /= b as f64;
        let t = Tensor::scalar(loss as f32);
        self.push(
            Op::SoftmaxCrossEntropy { labels: labels.to_vec() },
            vec![logits],
            t,
            Saved::Probs(probs),
        )
    }

    /// Reverse sweep from a scalar loss. Populates gradients on every
    /// gradient-requiring leaf reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.nodes[loss].value.numel(), 1, "backward requires a scalar loss");
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss].grad = Some(vec![1.0]);
        for i in (0..=loss).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            if !self.nodes[i].requires_grad {
                self.nodes[i].grad = None;
                continue;
            }
            let (before, at) = self.nodes.split_at_mut(i);
            let node = &mut at[0];
            let dy = node.grad.take().expect("checked above");
            backprop_node(node, &dy, before);
        }
    }
}

/// Per-channel batch moments over rows x hw, permutation-invariant in the row
/// axis: per-row f64 partial sums are sorted by bit pattern before the final
/// summation, so reordering rows cannot change rounding.
fn batch_moments(xd: &[f32], rows: usize, cc: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (rows * hw) as f64;
    let mut mean = vec![0.0f64; cc];
    let mut var = vec![0.0f64; cc];
    let mut p1 = vec![0.0f64; rows];
    let mut p2 = vec![0.0f64; rows];
    for c in 0..cc {
        for r in 0..rows {
            let off = (r * cc + c) * hw;
            let (mut s1, mut s2) = (0.0f64, 0.0f64);
            for &v in &xd[off..off + hw] {
                let v = v as f64;
                s1 += v;
                s2 += v * v;
            }
            p1[r] = s1;
            p2[r] = s2;
        }
        p1.sort_unstable_by_key(|v| v.to_bits());
        p2.sort_unstable_by_key(|v| v.to_bits());
        let s1: f64 = p1.iter().sum();
        let s2: f64 = p2.iter().sum();
        let m = s1 / n;
        mean[c] = m;
        var[c] = (s2 / n - m * m).max(0.0);
    }
    (mean, var)
}

fn backprop_node(node: &Node, dy: &[f32], before: &mut [Node]) {
    match &node.op {
        Op::Leaf => unreachable!("leaves are skipped"),
        Op::Relu => {
            let x = node.inputs[0];
            if before[x].requires_grad {
                let contrib: Vec<f32> = before[x]
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&xv, &d)| if xv > 0.0 { d } else { 0.0 })
                    .collect();
                accum_into(before, x, &contrib);
            }
        }
        Op::Add => {
            for &inp in &node.inputs {
                if before[inp].requires_grad {
                    accum_into(before, inp, dy);
                }
            }
        }
        Op::Mul => {
            let (a, b) = (node.inputs[0], node.inputs[1]);
            if before[a].requires_grad {
                let contrib: Vec<f32> = before[b].value.data().iter().zip(dy).map(|(&v, &d)| v * d).collect();
                accum_into(before, a, &contrib);
            }
            if before[b].requires_grad {
                let contrib: Vec<f32> = before[a].value.data().iter().zip(dy).map(|(&v, &d)| v * d).collect();
                accum_into(before, b, &contrib);
            }
        }
        Op::SumAll => {
            let x = node.inputs[0];
            if before[x].requires_grad {
                let mut g = take_grad(before, x);
                for v in &mut g {
                    *v += dy[0];
                }
                before[x].grad = Some(g);
            }
        }
        Op::AddChannelBias => {
            let (x, bias) = (node.inputs[0], node.inputs[1]);
            if before[x].requires_grad {
                accum_into(before, x, dy);
            }
            if before[bias].requires_grad {
                let xs = before[x].value.shape();
                let (b, c) = (xs[0], xs[1]);
                let hw = xs[2] * xs[3];
                let l = before[bias].value.numel();
                let mut db = take_grad(before, bias);
                let mut sums = vec![0.0f64; l];
                for ci in 0..c {
                    for bi in 0..b {
                        let off = (bi * c + ci) * hw;
                        sums[ci % l] += dy[off..off + hw].iter().map(|&v| v as f64).sum::<f64>();
                    }
                }
                for (d, s) in db.iter_mut().zip(&sums) {
                    *d += *s as f32;
                }
                before[bias].grad = Some(db);
            }
        }
        Op::Linear => {
            let (x, w, bias) = (node.inputs[0], node.inputs[1], node.inputs[2]);
            debug_assert!(x != w && w != bias && x != bias);
            let (b, f) = {
                let xs = before[x].value.shape();
                (xs[0], xs[1])
            };
            let o = before[w].value.shape()[0];
            if before[x].requires_grad {
                let mut dx = take_grad(before, x);
                conv::gemm(b, o, f, 1.0, dy, o as isize, 1, before[w].value.data(), f as isize, 1, 1.0, &mut dx, f as isize, 1);
                before[x].grad = Some(dx);
            }
            if before[w].requires_grad {
                let mut dw = take_grad(before, w);
                conv::gemm(o, b, f, 1.0, dy, 1, o as isize, before[x].value.data(), f as isize, 1, 1.0, &mut dw, f as isize, 1);
                before[w].grad = Some(dw);
            }
            if before[bias].requires_grad {
                let mut db = take_grad(before, bias);
                for (oi, dbv) in db.iter_mut().enumerate() {
                    let mut s = 0.0f64;
                    for bi in 0..b {
                        s += dy[bi * o + oi] as f64;
                    }
                    *dbv += s as f32;
                }
                before[bias].grad = Some(db);
            }
        }
        Op::Conv2d { stride, pad } => {
            let (x, w) = (node.inputs[0], node.inputs[1]);
            debug_assert_ne!(x, w);
            let xs = before[x].value.shape().to_vec();
            let ws = before[w].value.shape().to_vec();
            let need_dx = before[x].requires_grad;
            let need_dw = before[w].requires_grad;
            let mut dx = if need_dx { Some(take_grad(before, x)) } else { None };
            let mut dw = if need_dw { Some(take_grad(before, w)) } else { None };
            conv::conv2d_backward(
                before[x].value.data(),
                xs[0],
                xs[1],
                xs[2],
                xs[3],
                before[w].value.data(),
                ws[0],
                ws[2],
                *stride,
                *pad,
                dy,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
            );
            if let Some(v) = dx {
                before[x].grad = Some(v);
            }
            if let Some(v) = dw {
                before[w].grad = Some(v);
            }
        }
        Op::OrbitExpand { plan } => {
            let w = node.inputs[0];
            if before[w].requires_grad {
                let ws = before[w].value.shape().to_vec();
                let (c_out, slots_f, c_in, k) = (ws[0], ws[1], ws[2], ws[3]);
                let kk = k * k;
                let big_in = plan.slots_in * c_in;
                let mut dw = take_grad(before, w);
                for e in &plan.entries {
                    for o in 0..c_out {
                        for c in 0..c_in {
                            let src = ((o * slots_f + e.filter_slot) * c_in + c) * kk;
                            let dst = ((e.slot_out * c_out + o) * big_in + e.slot_in * c_in + c) * kk;
                            for i in 0..kk {
                                dw[src + i] += e.scale * dy[dst + i];
                            }
                        }
                    }
                }
                before[w].grad = Some(dw);
            }
        }
        Op::BatchNorm { groups, mode } => {
            let (x, scale, bias) = (node.inputs[0], node.inputs[1], node.inputs[2]);
            debug_assert!(x != scale && scale != bias && x != bias);
            let xs = before[x].value.shape().to_vec();
            let cc = xs[1] / groups;
            let rows = xs[0] * groups;
            let hw = xs[2] * xs[3];
            let (mean, inv_std) = match &node.saved {
                Saved::Bn { mean, inv_std, .. } => (mean.as_slice(), inv_std.as_slice()),
                _ => unreachable!("batchnorm saves its moments"),
            };
            let n = (rows * hw) as f64;
            let xd = before[x].value.data();
            let mut sum_dy = vec![0.0f64; cc];
            let mut sum_dy_xhat = vec![0.0f64; cc];
            for r in 0..rows {
                for c in 0..cc {
                    let off = (r * cc + c) * hw;
                    let (m, is) = (mean[c], inv_std[c]);
                    let (mut a, mut bsum) = (0.0f64, 0.0f64);
                    for i in 0..hw {
                        let d = dy[off + i] as f64;
                        a += d;
                        bsum += d * ((xd[off + i] as f64 - m) * is);
                    }
                    sum_dy[c] += a;
                    sum_dy_xhat[c] += bsum;
                }
            }
            if before[scale].requires_grad {
                let mut dg = take_grad(before, scale);
                for c in 0..cc {
                    dg[c] += sum_dy_xhat[c] as f32;
                }
                before[scale].grad = Some(dg);
            }
            if before[bias].requires_grad {
                let mut db = take_grad(before, bias);
                for c in 0..cc {
                    db[c] += sum_dy[c] as f32;
                }
                before[bias].grad = Some(db);
            }
            if before[x].requires_grad {
                let sd = before[scale].value.data().to_vec();
                let train = matches!(mode, BnMode::Train);
                let mut dx = take_grad(before, x);
                let xd = before[x].value.data();
                for r in 0..rows {
                    for c in 0..cc {
                        let off = (r * cc + c) * hw;
                        let (m, is) = (mean[c], inv_std[c]);
                        let gs = sd[c] as f64 * is;
                        if train {
                            let (mdy, mdx) = (sum_dy[c] / n, sum_dy_xhat[c] / n);
                            for i in 0..hw {
                                let d = dy[off + i] as f64;
                                let xh = (xd[off + i] as f64 - m) * is;
                                dx[off + i] += (gs * (d - mdy - xh * mdx)) as f32;
                            }
                        } else {
                            for i in 0..hw {
                                dx[off + i] += (gs * dy[off + i] as f64) as f32;
                            }
                        }
                    }
                }
                before[x].grad = Some(dx);
            }
        }
        Op::MaxPool2d | Op::GroupMaxPool => {
            let x = node.inputs[0];
            if before[x].requires_grad {
                let arg = match &node.saved {
                    Saved::Arg(a) => a,
                    _ => unreachable!("pooling saves its argmax"),
                };
                let mut dx = take_grad(before, x);
                for (j, &at) in arg.iter().enumerate() {
                    dx[at as usize] += dy[j];
                }
                before[x].grad = Some(dx);
            }
        }
        Op::AvgPoolSpatial => {
            let x = node.inputs[0];
            if before[x].requires_grad {
                let xs = before[x].value.shape().to_vec();
                let hw = xs[2] * xs[3];
                let inv = 1.0 / hw as f32;
                let mut dx = take_grad(before, x);
                for bc in 0..xs[0] * xs[1] {
                    let d = dy[bc] * inv;
                    for v in &mut dx[bc * hw..(bc + 1) * hw] {
                        *v += d;
                    }
                }
                before[x].grad = Some(dx);
            }
        }
        Op::SoftmaxCrossEntropy { labels } => {
            let x = node.inputs[0];
            if before[x].requires_grad {
                let probs = match &node.saved {
                    Saved::Probs(p) => p,
                    _ => unreachable!("cross entropy saves probabilities"),
                };
                let b = labels.len();
                let classes = probs.len() / b;
                let scale = dy[0] / b as f32;
                let mut dx = take_grad(before, x);
                for (bi, &y) in labels.iter().enumerate() {
                    for j in 0..classes {
                        let p = probs[bi * classes + j];
                        let t = if j == y { 1.0 } else { 0.0 };
                        dx[bi * classes + j] += (p - t) * scale;
                    }
                }
                before[x].grad = Some(dx);
            }
        }
    }
}
