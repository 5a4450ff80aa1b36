//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every primitive the model needs is recorded as an [`Op`] on a [`Tape`].
//! A forward pass appends nodes in topological order; [`Tape::backward`]
//! walks them in reverse and accumulates gradients. A tape can be replayed
//! from its leaf values, which must reproduce every node bitwise.
//!
//! Tensors live in channel-first layout: feature maps are `[c, h, w]`,
//! single-channel spatial maps are `[h, w]`.

use crate::error::{OadnError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// Elementwise product of same-shape tensors.
    Mul(Var, Var),
    /// `[c,h,w] * [h,w]`, the map broadcast across the channel dimension.
    MulChannelBroadcast(Var, Var),
    Scale(Var, f64),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    /// `[c,h,w] + [c]`, one bias per channel.
    AddChannelBias(Var, Var),
    Relu(Var),
    /// Global average pool `[c,h,w] -> [c]`.
    Gap(Var),
    /// Coordinate-wise max over a non-empty set of `[c]` vectors.
    MaxReduceSet(Vec<Var>),
    /// `[o,i] @ [i] -> [o]`.
    MatVec(Var, Var),
    Softmax(Var),
    CrossEntropy(Var, usize),
    /// Spatial block `[c, bh, bw]` cut out of `[c, h, w]` at (r0, c0).
    Block {
        src: Var,
        r0: usize,
        c0: usize,
        bh: usize,
        bw: usize,
    },
    Reshape(Var),
    SumAll(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = self.eval(&op)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(OadnError::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        self.record(Op::Add(a, b), &[a, b])
    }

    /// Elementwise product. Shapes must be equal, with one exception: `b`
    /// may be a single-channel `[h,w]` (or `[1,h,w]`) map matching `a`'s
    /// spatial dims, in which case it is broadcast across channels.
    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa == sb {
            return self.record(Op::Mul(a, b), &[a, b]);
        }
        let spatial_match = |m: &[usize]| sa.len() == 3 && m == &sa[1..];
        let broadcast_ok = match sb.len() {
            2 => spatial_match(&sb),
            3 => sb[0] == 1 && spatial_match(&sb[1..]),
            _ => false,
        };
        if !broadcast_ok {
            return Err(OadnError::Shape(format!(
                "elementwise_mul: {sa:?} vs {sb:?} (only a [h,w] map may broadcast over [c,h,w])"
            )));
        }
        self.record(Op::MulChannelBroadcast(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.record(Op::Scale(a, k), &[a])
    }

    /// Cross-correlation of `input` `[c,h,w]` or `[n,c,h,w]` with `kernel`
    /// `[o,c,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride < 1 {
            return Err(OadnError::Config("conv2d: stride must be >= 1".into()));
        }
        self.record(
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
        )
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        if sx.len() != 3 || sb.len() != 1 || sb[0] != sx[0] {
            return Err(OadnError::Shape(format!(
                "add_channel_bias: {sx:?} vs {sb:?}"
            )));
        }
        self.record(Op::AddChannelBias(x, bias), &[x, bias])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a), &[a])
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 3 || s[1] == 0 || s[2] == 0 {
            return Err(OadnError::Shape(format!(
                "global_avg_pool expects [c,h,w] with nonempty spatial dims, got {s:?}"
            )));
        }
        self.record(Op::Gap(a), &[a])
    }

    /// Coordinate-wise max over equal-length vectors. The gradient routes to
    /// the argmax element per coordinate; ties go to the lowest list index.
    pub fn max_reduce_set(&mut self, features: &[Var]) -> Result<Var> {
        if features.is_empty() {
            return Err(OadnError::Shape("max_reduce_set: empty input set".into()));
        }
        let c = self.value(features[0]).shape().to_vec();
        for &f in features {
            if self.value(f).shape() != c.as_slice() {
                return Err(OadnError::Shape("max_reduce_set: mixed shapes".into()));
            }
        }
        self.record(Op::MaxReduceSet(features.to_vec()), features)
    }

    pub fn matvec(&mut self, weight: Var, x: Var) -> Result<Var> {
        let sw = self.value(weight).shape().to_vec();
        let sx = self.value(x).shape().to_vec();
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(OadnError::Shape(format!("matvec: {sw:?} @ {sx:?}")));
        }
        self.record(Op::MatVec(weight, x), &[weight, x])
    }

    /// `weight @ x + bias` with a relu when `activate` is set.
    pub fn linear(&mut self, weight: Var, bias: Var, x: Var, activate: bool) -> Result<Var> {
        let wx = self.matvec(weight, x)?;
        let out = self.add(wx, bias)?;
        if activate {
            self.relu(out)
        } else {
            Ok(out)
        }
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        if self.value(logits).data().iter().any(|v| v.is_nan()) {
            return Err(OadnError::Numeric("softmax: NaN in logits".into()));
        }
        self.record(Op::Softmax(logits), &[logits])
    }

    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var> {
        let c = self.value(probs).numel();
        if label >= c {
            return Err(OadnError::Index(format!(
                "cross_entropy: label {label} out of range for {c} classes"
            )));
        }
        self.record(Op::CrossEntropy(probs, label), &[probs])
    }

    pub fn block(&mut self, src: Var, r0: usize, c0: usize, bh: usize, bw: usize) -> Result<Var> {
        let s = self.value(src).shape();
        if s.len() != 3 || r0 + bh > s[1] || c0 + bw > s[2] || bh == 0 || bw == 0 {
            return Err(OadnError::Shape(format!(
                "block: [{r0}..{}, {c0}..{}] out of {s:?}",
                r0 + bh,
                c0 + bw
            )));
        }
        self.record(Op::Block { src, r0, c0, bh, bw }, &[src])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(OadnError::Shape(format!(
                "reshape: {:?} -> {shape:?}",
                self.value(a).shape()
            )));
        }
        let rg = self.nodes[a.0].requires_grad;
        let value = Tensor::new(shape, self.value(a).data().to_vec())?;
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumAll(a), &[a])
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let val = |v: Var| self.value(v);
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not re-evaluated through eval"),
            Op::Add(a, b) => {
                let (a, b) = (val(*a), val(*b));
                Tensor::new(
                    a.shape().to_vec(),
                    a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
                )?
            }
            Op::Mul(a, b) => {
                let (a, b) = (val(*a), val(*b));
                Tensor::new(
                    a.shape().to_vec(),
                    a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
                )?
            }
            Op::MulChannelBroadcast(a, b) => {
                let (a, b) = (val(*a), val(*b));
                let hw = b.numel();
                let mut out = vec![0.0; a.numel()];
                for (chunk_out, chunk_a) in out.chunks_mut(hw).zip(a.data().chunks(hw)) {
                    for i in 0..hw {
                        chunk_out[i] = chunk_a[i] * b.data()[i];
                    }
                }
                Tensor::new(a.shape().to_vec(), out)?
            }
            Op::Scale(a, k) => {
                let a = val(*a);
                Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x * k).collect())?
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => conv2d_forward(val(*input), val(*kernel), *stride, *padding)?,
            Op::AddChannelBias(x, b) => {
                let (x, b) = (val(*x), val(*b));
                let hw = x.shape()[1] * x.shape()[2];
                let mut out = x.data().to_vec();
                for (c, chunk) in out.chunks_mut(hw).enumerate() {
                    let bc = b.data()[c];
                    for v in chunk.iter_mut() {
                        *v += bc;
                    }
                }
                Tensor::new(x.shape().to_vec(), out)?
            }
            Op::Relu(a) => {
                let a = val(*a);
                Tensor::new(
                    a.shape().to_vec(),
                    a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
                )?
            }
            Op::Gap(a) => {
                let a = val(*a);
                let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let hw = (h * w) as f64;
                let out = a
                    .data()
                    .chunks(h * w)
                    .map(|chunk| chunk.iter().sum::<f64>() / hw)
                    .collect();
                Tensor::new(vec![c], out)?
            }
            Op::MaxReduceSet(vars) => {
                let c = val(vars[0]).numel();
                let mut out = val(vars[0]).data().to_vec();
                for &v in &vars[1..] {
                    for (o, &x) in out.iter_mut().zip(val(v).data()) {
                        if x > *o {
                            *o = x;
                        }
                    }
                }
                Tensor::new(vec![c], out)?
            }
            Op::MatVec(w, x) => {
                let (w, x) = (val(*w), val(*x));
                let (o, i) = (w.shape()[0], w.shape()[1]);
                let mut out = vec![0.0; o];
                for (row, slot) in w.data().chunks(i).zip(out.iter_mut()) {
                    *slot = row.iter().zip(x.data()).map(|(a, b)| a * b).sum();
                }
                Tensor::new(vec![o], out)?
            }
            Op::Softmax(z) => {
                let z = val(*z);
                let max = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = z.data().iter().map(|&v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                Tensor::new(z.shape().to_vec(), exps.iter().map(|e| e / sum).collect())?
            }
            Op::CrossEntropy(p, label) => {
                let p = val(*p).data()[*label].max(LOG_CLAMP);
                Tensor::scalar(-p.ln())
            }
            Op::Block { src, r0, c0, bh, bw } => {
                let s = val(*src);
                let (h, w) = (s.shape()[1], s.shape()[2]);
                let c = s.shape()[0];
                let mut out = Vec::with_capacity(c * bh * bw);
                for ch in 0..c {
                    for r in 0..*bh {
                        let base = ch * h * w + (r0 + r) * w + c0;
                        out.extend_from_slice(&s.data()[base..base + bw]);
                    }
                }
                Tensor::new(vec![c, *bh, *bw], out)?
            }
            Op::Reshape(a) => val(*a).clone(),
            Op::SumAll(a) => Tensor::scalar(val(*a).data().iter().sum()),
        })
    }

    /// Reverse pass from a scalar loss. Every `requires_grad` node reachable
    /// from `loss` receives its gradient; query it with [`Tape::grad`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(OadnError::Shape(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut sink = |v: Var, update: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()]);
            update(slot);
        };
        let val = |v: Var| self.value(v);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                sink(*a, &mut |ga| {
                    for (s, &gi) in ga.iter_mut().zip(g) {
                        *s += gi;
                    }
                });
                sink(*b, &mut |gb| {
                    for (s, &gi) in gb.iter_mut().zip(g) {
                        *s += gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                sink(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                sink(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::MulChannelBroadcast(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let hw = bv.len();
                sink(*a, &mut |ga| {
                    for (gc, g_out) in ga.chunks_mut(hw).zip(g.chunks(hw)) {
                        for i in 0..hw {
                            gc[i] += g_out[i] * bv[i];
                        }
                    }
                });
                sink(*b, &mut |gb| {
                    for (ac, g_out) in av.chunks(hw).zip(g.chunks(hw)) {
                        for i in 0..hw {
                            gb[i] += g_out[i] * ac[i];
                        }
                    }
                });
            }
            Op::Scale(a, k) => {
                let k = *k;
                sink(*a, &mut |ga| {
                    for (s, &gi) in ga.iter_mut().zip(g) {
                        *s += gi * k;
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let (gi, gk) = conv2d_backward(
                    val(*input),
                    val(*kernel),
                    *stride,
                    *padding,
                    g,
                    &out_shape,
                    self.nodes[input.0].requires_grad,
                    self.nodes[kernel.0].requires_grad,
                );
                if let Some(gi) = gi {
                    sink(*input, &mut |s| add_into(s, &gi));
                }
                if let Some(gk) = gk {
                    sink(*kernel, &mut |s| add_into(s, &gk));
                }
            }
            Op::AddChannelBias(x, b) => {
                let hw = val(*x).shape()[1] * val(*x).shape()[2];
                sink(*x, &mut |gx| {
                    for (s, &gi) in gx.iter_mut().zip(g) {
                        *s += gi;
                    }
                });
                sink(*b, &mut |gb| {
                    for (c, chunk) in g.chunks(hw).enumerate() {
                        gb[c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Relu(a) => {
                let av = val(*a).data();
                sink(*a, &mut |ga| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Gap(a) => {
                let s = val(*a).shape();
                let hw = s[1] * s[2];
                let inv = 1.0 / hw as f64;
                sink(*a, &mut |ga| {
                    for (c, chunk) in ga.chunks_mut(hw).enumerate() {
                        let gc = g[c] * inv;
                        for v in chunk.iter_mut() {
                            *v += gc;
                        }
                    }
                });
            }
            Op::MaxReduceSet(vars) => {
                // ties route to the lowest list index
                let c = g.len();
                for k in 0..c {
                    let mut best = 0usize;
                    let mut best_val = val(vars[0]).data()[k];
                    for (j, &v) in vars.iter().enumerate().skip(1) {
                        let x = val(v).data()[k];
                        if x > best_val {
                            best_val = x;
                            best = j;
                        }
                    }
                    let gk = g[k];
                    sink(vars[best], &mut |gv| gv[k] += gk);
                }
            }
            Op::MatVec(w, x) => {
                let (wv, xv) = (val(*w).data(), val(*x).data());
                let i = val(*x).numel();
                sink(*w, &mut |gw| {
                    for (o, row) in gw.chunks_mut(i).enumerate() {
                        let go = g[o];
                        for (s, &xi) in row.iter_mut().zip(xv) {
                            *s += go * xi;
                        }
                    }
                });
                sink(*x, &mut |gx| {
                    for (o, row) in wv.chunks(i).enumerate() {
                        let go = g[o];
                        for (s, &wi) in gx.iter_mut().zip(row) {
                            *s += go * wi;
                        }
                    }
                });
            }
            Op::Softmax(z) => {
                let y = self.nodes[idx].value.data();
                let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                sink(*z, &mut |gz| {
                    for i in 0..g.len() {
                        gz[i] += y[i] * (g[i] - dot);
                    }
                });
            }
            Op::CrossEntropy(p, label) => {
                let pv = val(*p).data()[*label].max(LOG_CLAMP);
                let (label, g0) = (*label, g[0]);
                sink(*p, &mut |gp| {
                    gp[label] += -g0 / pv;
                });
            }
            Op::Block { src, r0, c0, bh, bw } => {
                let s = val(*src).shape();
                let (h, w) = (s[1], s[2]);
                let c = s[0];
                sink(*src, &mut |gs| {
                    let mut gi = 0;
                    for ch in 0..c {
                        for r in 0..*bh {
                            let base = ch * h * w + (r0 + r) * w + c0;
                            for off in 0..*bw {
                                gs[base + off] += g[gi];
                                gi += 1;
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                sink(*a, &mut |ga| add_into(ga, g));
            }
            Op::SumAll(a) => {
                let g0 = g[0];
                sink(*a, &mut |ga| {
                    for s in ga.iter_mut() {
                        *s += g0;
                    }
                });
            }
        }
    }

    /// Re-executes every recorded op from the leaf values and checks the
    /// results against the stored node values bitwise.
    pub fn replay_matches(&self) -> bool {
        for (idx, node) in self.nodes.iter().enumerate() {
            let recomputed = match &node.op {
                Op::Leaf => continue,
                Op::Reshape(a) => {
                    Tensor::new(node.value.shape().to_vec(), self.value(*a).data().to_vec())
                        .expect("reshape replay")
                }
                op => self.eval(op).expect("replay of a recorded op"),
            };
            let stored = &self.nodes[idx].value;
            if recomputed.shape() != stored.shape() {
                return false;
            }
            let bitwise = recomputed
                .data()
                .iter()
                .zip(stored.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !bitwise {
                return false;
            }
        }
        true
    }
}

/// Result of a backward pass; indexed by the same [`Var`] handles.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`. Tensors not reached by the backward
    /// sweep get a zero gradient of the right shape.
    pub fn grad(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(tape.value(v).shape().to_vec(), g.clone()).unwrap(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }
}

const LOG_CLAMP: f64 = 1e-12;

fn add_into(sink: &mut [f64], src: &[f64]) {
    for (s, &x) in sink.iter_mut().zip(src) {
        *s += x;
    }
}

fn conv_geometry(
    in_hw: (usize, usize),
    k_hw: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let out = |n: usize, k: usize| -> Result<usize> {
        let padded = n + 2 * padding;
        if k > padded {
            return Err(OadnError::Config(format!(
                "conv2d: kernel {k} exceeds padded input {padded}"
            )));
        }
        Ok((padded - k) / stride + 1)
    };
    Ok((out(in_hw.0, k_hw.0)?, out(in_hw.1, k_hw.1)?))
}

/// Output index range [lo, hi) for which `o*stride + k - padding` lands in
/// [0, extent).
fn valid_out_range(extent: usize, out_extent: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k).div_ceil(stride);
    if k > extent - 1 + padding {
        return (0, 0);
    }
    let hi = ((extent - 1 + padding - k) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

fn conv2d_forward(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (batched, n, c, h, w) = match input.shape() {
        [c, h, w] => (false, 1, *c, *h, *w),
        [n, c, h, w] => (true, *n, *c, *h, *w),
        s => return Err(OadnError::Shape(format!("conv2d input shape {s:?}"))),
    };
    let [o, kc, kh, kw] = *kernel.shape() else {
        return Err(OadnError::Shape(format!(
            "conv2d kernel shape {:?}",
            kernel.shape()
        )));
    };
    if kc != c {
        return Err(OadnError::Shape(format!(
            "conv2d: input has {c} channels, kernel expects {kc}"
        )));
    }
    let (oh, ow) = conv_geometry((h, w), (kh, kw), stride, padding)?;
    let mut out = vec![0.0; n * o * oh * ow];
    let xs = input.data();
    let ks = kernel.data();
    for ni in 0..n {
        let x0 = ni * c * h * w;
        let y0 = ni * o * oh * ow;
        for oc in 0..o {
            for ic in 0..c {
                let kbase = ((oc * c) + ic) * kh * kw;
                let xb = x0 + ic * h * w;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_out_range(h, oh, ky, stride, padding);
                    for kx in 0..kw {
                        let wgt = ks[kbase + ky * kw + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_out_range(w, ow, kx, stride, padding);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let xrow = xb + iy * w + (ox_lo * stride + kx - padding);
                            let yrow = y0 + (oc * oh + oy) * ow;
                            if stride == 1 {
                                let ys = &mut out[yrow + ox_lo..yrow + ox_hi];
                                let xrow_s = &xs[xrow..xrow + (ox_hi - ox_lo)];
                                for (yv, &xv) in ys.iter_mut().zip(xrow_s) {
                                    *yv += wgt * xv;
                                }
                            } else {
                                for (i, ox) in (ox_lo..ox_hi).enumerate() {
                                    out[yrow + ox] += wgt * xs[xrow + i * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let shape = if batched {
        vec![n, o, oh, ow]
    } else {
        vec![o, oh, ow]
    };
    Tensor::new(shape, out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    g_out: &[f64],
    out_shape: &[usize],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (n, c, h, w) = match input.shape() {
        [c, h, w] => (1, *c, *h, *w),
        [n, c, h, w] => (*n, *c, *h, *w),
        _ => unreachable!("validated on record"),
    };
    let [o, _, kh, kw] = *kernel.shape() else {
        unreachable!("validated on record")
    };
    let (oh, ow) = match out_shape {
        [o2, oh, ow] => {
            debug_assert_eq!(o, *o2);
            (*oh, *ow)
        }
        [_, _, oh, ow] => (*oh, *ow),
        _ => unreachable!(),
    };
    let xs = input.data();
    let ks = kernel.data();
    let mut gi = if need_input {
        vec![0.0; input.numel()]
    } else {
        Vec::new()
    };
    let mut gk = if need_kernel {
        vec![0.0; kernel.numel()]
    } else {
        Vec::new()
    };
    for ni in 0..n {
        let x0 = ni * c * h * w;
        let y0 = ni * o * oh * ow;
        for oc in 0..o {
            for ic in 0..c {
                let kbase = ((oc * c) + ic) * kh * kw;
                let xb = x0 + ic * h * w;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_out_range(h, oh, ky, stride, padding);
                    for kx in 0..kw {
                        let wgt = ks[kbase + ky * kw + kx];
                        let (ox_lo, ox_hi) = valid_out_range(w, ow, kx, stride, padding);
                        let mut gw = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let xrow = xb + iy * w + (ox_lo * stride + kx - padding);
                            let yrow = y0 + (oc * oh + oy) * ow;
                            if stride == 1 {
                                let len = ox_hi - ox_lo;
                                let gos = &g_out[yrow + ox_lo..yrow + ox_lo + len];
                                let xsrow = &xs[xrow..xrow + len];
                                if need_input {
                                    let girow = &mut gi[xrow..xrow + len];
                                    for ((&go, &xv), gv) in
                                        gos.iter().zip(xsrow).zip(girow.iter_mut())
                                    {
                                        *gv += go * wgt;
                                        gw += go * xv;
                                    }
                                } else {
                                    for (&go, &xv) in gos.iter().zip(xsrow) {
                                        gw += go * xv;
                                    }
                                }
                            } else {
                                for (i, ox) in (ox_lo..ox_hi).enumerate() {
                                    let go = g_out[yrow + ox];
                                    let xi = xrow + i * stride;
                                    if need_input {
                                        gi[xi] += go * wgt;
                                    }
                                    gw += go * xs[xi];
                                }
                            }
                        }
                        if need_kernel {
                            gk[kbase + ky * kw + kx] += gw;
                        }
                    }
                }
            }
        }
    }
    (
        need_input.then_some(gi),
        need_kernel.then_some(gk),
    )
}
