//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value plus whatever
//! intermediates its backward rule needs. [`Tape::backward`] walks the nodes
//! in reverse creation order, which is a valid reverse topological order
//! because a node can only reference nodes created before it.
//!
//! The layer primitives are coarse grained (a whole batched convolution is a
//! single node) so the tape stays short even for realistic batch sizes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

/// Per-channel statistics observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gate parameters of one LSTM layer. Gate blocks along the `4u` axis are
/// ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `[d, 4u]`
    pub input_weights: Var,
    /// `[u, 4u]`
    pub recurrent_weights: Var,
    /// `[4u]`
    pub bias: Var,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Sub(Var, Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Scale(Var, f64),
    Reshape(Var),
    SelectAxis1 { input: Var, index: usize },
    Concat(Var, Var),
    Conv2d { input: Var, kernel: Var, bias: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, mode: NormMode },
    Dense { input: Var, weights: Var, bias: Var },
    LstmGates { x: Var, h: Var, wx: Var, wh: Var, bias: Var },
    LstmCell { gates: Var, c_prev: Var },
    LstmHidden { gates: Var, c: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `var`; all zeros if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are propagated to it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("sub", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let rg = self.needs(&[a]);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.needs(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", v.shape()),
            ));
        }
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// `x[:, index, ...]` for `x` of shape `[B, L, ...]`.
    pub fn select_axis1(&mut self, input: Var, index: usize) -> Result<Var> {
        let v = self.value(input);
        if v.ndim() < 2 || index >= v.shape()[1] {
            return Err(Error::shape(
                "select_axis1",
                format!("index {index} out of range for axis 1 of {:?}", v.shape()),
            ));
        }
        let (b, l) = (v.shape()[0], v.shape()[1]);
        let inner: usize = v.shape()[2..].iter().product();
        let mut data = Vec::with_capacity(b * inner);
        for bi in 0..b {
            let start = (bi * l + index) * inner;
            data.extend_from_slice(&v.data()[start..start + inner]);
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&v.shape()[2..]);
        let out = Tensor::new(shape, data)?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::SelectAxis1 { input, index }, rg))
    }

    /// Concatenates along the last axis: `a`'s channels then `b`'s.
    pub fn concat_last_axis(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != sb.len() || sa.is_empty() {
            return Err(Error::shape("concat", format!("rank mismatch {sa:?} vs {sb:?}")));
        }
        if let Some(axis) = (0..sa.len() - 1).find(|&i| sa[i] != sb[i]) {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} differs: {} vs {}", sa[axis], sb[axis]),
            ));
        }
        let (p, q) = (va.last_dim(), vb.last_dim());
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut data = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * p..(r + 1) * p]);
            data.extend_from_slice(&vb.data()[r * q..(r + 1) * q]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = p + q;
        let out = Tensor::new(shape, data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    /// 3x3 cross-correlation with zero padding 1 ("same" output size).
    ///
    /// `input: [B, W, H, C_in]`, `kernel: [3, 3, C_in, C_out]`, `bias: [C_out]`.
    pub fn conv2d_same(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let dims = conv_dims(x.shape(), k.shape(), b.shape())?;
        let out = conv2d_forward(x.data(), k.data(), b.data(), &dims);
        let out = Tensor::new(vec![dims.batch, dims.width, dims.height, dims.c_out], out)?;
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(out, Op::Conv2d { input, kernel, bias }, rg))
    }

    /// Batch normalization over every axis except the last (channel) axis.
    ///
    /// In train mode the batch statistics are used and returned so the caller
    /// can fold them into its running averages. In infer mode `running` must
    /// be supplied and is used as-is.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: Option<&BatchStats>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let x = self.value(input);
        let c = x.last_dim();
        if x.ndim() == 0 {
            return Err(Error::shape("batch_norm", "input has no channel axis"));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} shape {:?}, expected [{c}] (channel axis)", self.shape(v)),
                ));
            }
        }
        let x = self.value(input);
        let n = x.numel() / c.max(1);
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if n < 2 {
                    return Err(Error::invalid(
                        "batch_norm: train mode needs at least 2 elements per channel",
                    ));
                }
                let mut mean = vec![0.0; c];
                for row in x.data().chunks_exact(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for row in x.data().chunks_exact(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                let stats = BatchStats { mean: mean.clone(), var: var.clone() };
                (mean, var, Some(stats))
            }
            NormMode::Infer => {
                let r = running.ok_or_else(|| {
                    Error::invalid("batch_norm: infer mode requires running statistics")
                })?;
                if r.mean.len() != c || r.var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running statistics have {} channels, expected {c}", r.mean.len()),
                    ));
                }
                (r.mean.clone(), r.var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(x.numel());
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks_exact(c) {
            for ch in 0..c {
                let xh = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(xh);
                out.push(g[ch] * xh + bt[ch]);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.needs(&[input, gamma, beta]);
        let var = self.push(out, Op::BatchNorm { input, gamma, beta, xhat, inv_std, mode }, rg);
        Ok((var, stats))
    }

    /// `input · weights + bias` along the last axis.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weights), self.value(bias));
        if w.ndim() != 2 {
            return Err(Error::shape("dense", format!("weights must be 2-D, got {:?}", w.shape())));
        }
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        if x.ndim() == 0 || x.last_dim() != din {
            return Err(Error::shape(
                "dense",
                format!("input last axis {} != weights in_dim {din}", x.last_dim()),
            ));
        }
        if b.shape() != [dout] {
            return Err(Error::shape("dense", format!("bias {:?} != [{dout}]", b.shape())));
        }
        let out = affine_forward(x.data(), w.data(), b.data(), din, dout);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(shape, out)?;
        let rg = self.needs(&[input, weights, bias]);
        Ok(self.push(out, Op::Dense { input, weights, bias }, rg))
    }

    /// One LSTM step over a batch: `x: [B, d]`, `h_prev, c_prev: [B, u]`.
    /// Returns `(h_t, c_t)`.
    pub fn lstm_step(
        &mut self,
        x: Var,
        h_prev: Var,
        c_prev: Var,
        params: &LstmVars,
    ) -> Result<(Var, Var)> {
        let (wx, wh, bias) = (params.input_weights, params.recurrent_weights, params.bias);
        let ws = self.shape(wx).to_vec();
        if ws.len() != 2 || !ws[1].is_multiple_of(4) {
            return Err(Error::shape("lstm_step", format!("input weights {ws:?} not [d, 4u]")));
        }
        let (d, u) = (ws[0], ws[1] / 4);
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != d {
            return Err(Error::shape("lstm_step", format!("x {xs:?} not [B, {d}]")));
        }
        let batch = xs[0];
        for (name, v) in [("h_prev", h_prev), ("c_prev", c_prev)] {
            if self.shape(v) != [batch, u] {
                return Err(Error::shape(
                    "lstm_step",
                    format!("{name} {:?} not [{batch}, {u}]", self.shape(v)),
                ));
            }
        }
        if self.shape(wh) != [u, 4 * u] {
            return Err(Error::shape(
                "lstm_step",
                format!("recurrent weights {:?} not [{u}, {}]", self.shape(wh), 4 * u),
            ));
        }
        if self.shape(bias) != [4 * u] {
            return Err(Error::shape("lstm_step", format!("bias {:?} not [{}]", self.shape(bias), 4 * u)));
        }

        let zero_bias = vec![0.0; 4 * u];
        let mut pre = affine_forward(self.value(x).data(), self.value(wx).data(), self.value(bias).data(), d, 4 * u);
        let rec = affine_forward(self.value(h_prev).data(), self.value(wh).data(), &zero_bias, u, 4 * u);
        pre.iter_mut().zip(&rec).for_each(|(p, r)| *p += r);
        for row in pre.chunks_exact_mut(4 * u) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j / u == 2 { v.tanh() } else { sigmoid(*v) };
            }
        }
        let gates_t = Tensor::new(vec![batch, 4 * u], pre)?;
        let rg = self.needs(&[x, h_prev, wx, wh, bias]);
        let gates = self.push(gates_t, Op::LstmGates { x, h: h_prev, wx, wh, bias }, rg);

        let gv = self.value(gates).data();
        let cp = self.value(c_prev).data();
        let mut c = vec![0.0; batch * u];
        for bi in 0..batch {
            let g = &gv[bi * 4 * u..(bi + 1) * 4 * u];
            for j in 0..u {
                c[bi * u + j] = g[u + j] * cp[bi * u + j] + g[j] * g[2 * u + j];
            }
        }
        let rg = self.needs(&[gates, c_prev]);
        let c_t = self.push(Tensor::new(vec![batch, u], c)?, Op::LstmCell { gates, c_prev }, rg);

        let gv = self.value(gates).data();
        let cv = self.value(c_t).data();
        let mut h = vec![0.0; batch * u];
        for bi in 0..batch {
            for j in 0..u {
                h[bi * u + j] = gv[bi * 4 * u + 3 * u + j] * cv[bi * u + j].tanh();
            }
        }
        let rg = self.needs(&[gates, c_t]);
        let h_t = self.push(Tensor::new(vec![batch, u], h)?, Op::LstmHidden { gates, c: c_t }, rg);
        Ok((h_t, c_t))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Takes `&self`: the tape is not consumed, so repeated calls yield
    /// identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { shapes, grads })
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not require a gradient.
    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        macro_rules! with_slot {
            ($v:expr, |$s:ident| $body:expr) => {
                if let Some($s) = self.grad_slot(grads, $v) {
                    $body
                }
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Sub(a, b) => {
                with_slot!(*a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                with_slot!(*b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Abs(a) => {
                let x = val(*a);
                with_slot!(*a, |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(x) {
                        *s += g * sign(*x);
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                with_slot!(*a, |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::Scale(a, k) => with_slot!(*a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g)),
            Op::Sum(a) => with_slot!(*a, |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                with_slot!(*a, |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::Reshape(a) => with_slot!(*a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::SelectAxis1 { input, index } => {
                let shape = self.nodes[input.0].value.shape();
                let (b, l) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                with_slot!(*input, |s| {
                    for bi in 0..b {
                        let start = (bi * l + index) * inner;
                        let dst = &mut s[start..start + inner];
                        let src = &g[bi * inner..(bi + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Concat(a, b) => {
                let p = self.nodes[a.0].value.last_dim();
                let q = self.nodes[b.0].value.last_dim();
                let rows = g.len() / (p + q).max(1);
                with_slot!(*a, |s| {
                    for r in 0..rows {
                        let src = &g[r * (p + q)..r * (p + q) + p];
                        s[r * p..(r + 1) * p].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                });
                with_slot!(*b, |s| {
                    for r in 0..rows {
                        let src = &g[r * (p + q) + p..(r + 1) * (p + q)];
                        s[r * q..(r + 1) * q].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Conv2d { input, kernel, bias } => {
                let (x, k) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
                let dims = conv_dims(x.shape(), k.shape(), &[k.last_dim()]).expect("recorded conv shapes");
                with_slot!(*input, |s| conv2d_backward_input(g, k.data(), s, &dims));
                with_slot!(*kernel, |s| conv2d_backward_kernel(g, x.data(), s, &dims));
                with_slot!(*bias, |s| {
                    for row in g.chunks_exact(dims.c_out) {
                        s.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, mode } => {
                let c = inv_std.len();
                let gam = val(*gamma);
                let n = (g.len() / c) as f64;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_dy[ch] += gr[ch];
                        sum_dy_xhat[ch] += gr[ch] * xr[ch];
                    }
                }
                with_slot!(*gamma, |s| s.iter_mut().zip(&sum_dy_xhat).for_each(|(d, v)| *d += v));
                with_slot!(*beta, |s| s.iter_mut().zip(&sum_dy).for_each(|(d, v)| *d += v));
                with_slot!(*input, |s| {
                    for ((sr, gr), xr) in s.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            sr[ch] += match mode {
                                NormMode::Train => {
                                    scale * (gr[ch] - sum_dy[ch] / n - xr[ch] * sum_dy_xhat[ch] / n)
                                }
                                NormMode::Infer => scale * gr[ch],
                            };
                        }
                    }
                });
            }
            Op::Dense { input, weights, bias } => {
                let w = &self.nodes[weights.0].value;
                let (din, dout) = (w.shape()[0], w.shape()[1]);
                let x = val(*input);
                with_slot!(*input, |s| affine_backward_input(g, w.data(), s, din, dout));
                with_slot!(*weights, |s| affine_backward_weights(g, x, s, din, dout));
                with_slot!(*bias, |s| {
                    for row in g.chunks_exact(dout) {
                        s.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::LstmGates { x, h, wx, wh, bias } => {
                let gates = node.value.data();
                let four_u = node.value.last_dim();
                let u = four_u / 4;
                let d = self.nodes[wx.0].value.shape()[0];
                let mut dpre = vec![0.0; g.len()];
                for (i, ((dp, gv), a)) in dpre.iter_mut().zip(g).zip(gates).enumerate() {
                    let deriv = if (i % four_u) / u == 2 { 1.0 - a * a } else { a * (1.0 - a) };
                    *dp = gv * deriv;
                }
                with_slot!(*x, |s| affine_backward_input(&dpre, val(*wx), s, d, four_u));
                with_slot!(*h, |s| affine_backward_input(&dpre, val(*wh), s, u, four_u));
                with_slot!(*wx, |s| affine_backward_weights(&dpre, val(*x), s, d, four_u));
                with_slot!(*wh, |s| affine_backward_weights(&dpre, val(*h), s, u, four_u));
                with_slot!(*bias, |s| {
                    for row in dpre.chunks_exact(four_u) {
                        s.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::LstmCell { gates, c_prev } => {
                let gv = val(*gates);
                let cp = val(*c_prev);
                let u = self.nodes[c_prev.0].value.last_dim();
                let batch = g.len() / u.max(1);
                with_slot!(*c_prev, |s| {
                    for bi in 0..batch {
                        for j in 0..u {
                            s[bi * u + j] += g[bi * u + j] * gv[bi * 4 * u + u + j];
                        }
                    }
                });
                with_slot!(*gates, |s| {
                    for bi in 0..batch {
                        let row = bi * 4 * u;
                        for j in 0..u {
                            let dc = g[bi * u + j];
                            s[row + j] += dc * gv[row + 2 * u + j];
                            s[row + u + j] += dc * cp[bi * u + j];
                            s[row + 2 * u + j] += dc * gv[row + j];
                        }
                    }
                });
            }
            Op::LstmHidden { gates, c } => {
                let gv = val(*gates);
                let cv = val(*c);
                let u = self.nodes[c.0].value.last_dim();
                let batch = g.len() / u.max(1);
                with_slot!(*gates, |s| {
                    for bi in 0..batch {
                        for j in 0..u {
                            s[bi * 4 * u + 3 * u + j] += g[bi * u + j] * cv[bi * u + j].tanh();
                        }
                    }
                });
                with_slot!(*c, |s| {
                    for bi in 0..batch {
                        for j in 0..u {
                            let t = cv[bi * u + j].tanh();
                            s[bi * u + j] += g[bi * u + j] * gv[bi * 4 * u + 3 * u + j] * (1.0 - t * t);
                        }
                    }
                });
            }
        }
    }
}

/// Subgradient of `|x|` with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    batch: usize,
    width: usize,
    height: usize,
    c_in: usize,
    c_out: usize,
}

fn conv_dims(x: &[usize], k: &[usize], b: &[usize]) -> Result<ConvDims> {
    if x.len() != 4 {
        return Err(Error::shape("conv2d_same", format!("input must be [B, W, H, C], got {x:?}")));
    }
    if k.len() != 4 || k[0] != 3 || k[1] != 3 {
        return Err(Error::shape(
            "conv2d_same",
            format!("kernel spatial axes must be 3x3, got {k:?}"),
        ));
    }
    if k[2] != x[3] {
        return Err(Error::shape(
            "conv2d_same",
            format!("channel axis: input has {} channels, kernel expects {}", x[3], k[2]),
        ));
    }
    if b != [k[3]] {
        return Err(Error::shape(
            "conv2d_same",
            format!("output-channel axis: bias {b:?} vs kernel C_out {}", k[3]),
        ));
    }
    Ok(ConvDims { batch: x[0], width: x[1], height: x[2], c_in: x[3], c_out: k[3] })
}

/// Input pixels contributing through kernel tap `t` to output row `o`
/// along one spatial axis of length `n`.
#[inline]
fn tap(o: usize, t: usize, n: usize) -> Option<usize> {
    let p = o + t;
    (p >= 1 && p <= n).then(|| p - 1)
}

fn conv2d_forward(x: &[f64], k: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let ConvDims { batch, width, height, c_in, c_out } = *d;
    let mut out = vec![0.0; batch * width * height * c_out];
    for b in 0..batch {
        for ox in 0..width {
            for oy in 0..height {
                let o = ((b * width + ox) * height + oy) * c_out;
                let acc = &mut out[o..o + c_out];
                acc.copy_from_slice(bias);
                for tx in 0..3 {
                    let Some(ix) = tap(ox, tx, width) else { continue };
                    for ty in 0..3 {
                        let Some(iy) = tap(oy, ty, height) else { continue };
                        let xi = ((b * width + ix) * height + iy) * c_in;
                        let ki = (tx * 3 + ty) * c_in * c_out;
                        for ci in 0..c_in {
                            let xv = x[xi + ci];
                            let krow = &k[ki + ci * c_out..ki + (ci + 1) * c_out];
                            for (a, kv) in acc.iter_mut().zip(krow) {
                                *a += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input(g: &[f64], k: &[f64], dx: &mut [f64], d: &ConvDims) {
    let ConvDims { batch, width, height, c_in, c_out } = *d;
    for b in 0..batch {
        for ox in 0..width {
            for oy in 0..height {
                let o = ((b * width + ox) * height + oy) * c_out;
                let grow = &g[o..o + c_out];
                for tx in 0..3 {
                    let Some(ix) = tap(ox, tx, width) else { continue };
                    for ty in 0..3 {
                        let Some(iy) = tap(oy, ty, height) else { continue };
                        let xi = ((b * width + ix) * height + iy) * c_in;
                        let ki = (tx * 3 + ty) * c_in * c_out;
                        for ci in 0..c_in {
                            let krow = &k[ki + ci * c_out..ki + (ci + 1) * c_out];
                            dx[xi + ci] += dot(grow, krow);
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernel(g: &[f64], x: &[f64], dk: &mut [f64], d: &ConvDims) {
    let ConvDims { batch, width, height, c_in, c_out } = *d;
    for b in 0..batch {
        for ox in 0..width {
            for oy in 0..height {
                let o = ((b * width + ox) * height + oy) * c_out;
                let grow = &g[o..o + c_out];
                for tx in 0..3 {
                    let Some(ix) = tap(ox, tx, width) else { continue };
                    for ty in 0..3 {
                        let Some(iy) = tap(oy, ty, height) else { continue };
                        let xi = ((b * width + ix) * height + iy) * c_in;
                        let ki = (tx * 3 + ty) * c_in * c_out;
                        for ci in 0..c_in {
                            let xv = x[xi + ci];
                            let krow = &mut dk[ki + ci * c_out..ki + (ci + 1) * c_out];
                            for (kv, gv) in krow.iter_mut().zip(grow) {
                                *kv += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn affine_forward(x: &[f64], w: &[f64], bias: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let rows = x.len().checked_div(din).unwrap_or(0);
    let mut out = Vec::with_capacity(rows * dout);
    for r in 0..rows {
        let start = out.len();
        out.extend_from_slice(bias);
        let acc = &mut out[start..];
        for (i, &xv) in x[r * din..(r + 1) * din].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (a, wv) in acc.iter_mut().zip(&w[i * dout..(i + 1) * dout]) {
                *a += xv * wv;
            }
        }
    }
    out
}

fn affine_backward_input(g: &[f64], w: &[f64], dx: &mut [f64], din: usize, dout: usize) {
    for (grow, dxrow) in g.chunks_exact(dout).zip(dx.chunks_exact_mut(din)) {
        for (i, d) in dxrow.iter_mut().enumerate() {
            *d += dot(grow, &w[i * dout..(i + 1) * dout]);
        }
    }
}

fn affine_backward_weights(g: &[f64], x: &[f64], dw: &mut [f64], din: usize, dout: usize) {
    for (grow, xrow) in g.chunks_exact(dout).zip(x.chunks_exact(din)) {
        for (i, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (d, gv) in dw[i * dout..(i + 1) * dout].iter_mut().zip(grow) {
                *d += xv * gv;
            }
        }
    }
}
