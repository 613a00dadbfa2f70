//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every operation appends a node whose inputs are strictly earlier nodes, so
//! the tape is a topological order by construction and `backward` is a single
//! reverse sweep.

use std::collections::HashMap;

use super::tensor::softmax_slice;
use super::{NumericsError, ParamId, ParamStore, Tensor};

/// Reference to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Neg(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Concat(Vec<Var>),
    ElementwiseMax(Vec<Var>, Vec<usize>),
    GlobalAvgPool(Var),
    Softmax(Var),
    Sum(Var),
    Index(Var, usize),
    Max(Var, usize),
    Reshape(Var),
    ClampMin(Var, f64),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record: values, the op that produced each, and (after
/// [`Tape::backward`]) the gradient of the loss with respect to each node.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err<T>(msg: String) -> Result<T, NumericsError> {
    Err(NumericsError::Shape(msg))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Input indices of every node, in tape order.
    pub fn record(&self) -> Vec<Vec<usize>> {
        self.nodes.iter().map(|n| inputs_of(&n.op)).collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            other => inputs_of(other).iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf whose gradient is tracked but not written back to any store.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a stored parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = if p.requires_grad {
            self.push(p.value.clone(), Op::Param)
        } else {
            self.constant(p.value.clone())
        };
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ad[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &x) in row.iter().enumerate() {
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &y) in dst.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `weight · x + bias` for a weight of shape `[out, in]` and vectors `x`, `bias`.
    pub fn affine(&mut self, weight: Var, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 1 {
            return shape_err(format!("affine expects a vector input, got {sx:?}"));
        }
        let col = self.reshape(x, &[sx[0], 1])?;
        let prod = self.matmul(weight, col)?;
        let out = self.shape(prod)[0];
        let flat = self.reshape(prod, &[out])?;
        if self.shape(bias) != [out] {
            return shape_err(format!(
                "bias {:?} does not match output length {out}",
                self.shape(bias)
            ));
        }
        self.add(flat, bias)
    }

    /// 2-D convolution of a `[C, H, W]` input with `[O, C, kh, kw]` filters plus a per-filter bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, NumericsError> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        let sb = self.shape(bias).to_vec();
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sb != [sw[0]] || stride == 0 {
            return shape_err(format!(
                "conv2d input {si:?}, weight {sw:?}, bias {sb:?}, stride {stride}"
            ));
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return shape_err(format!("conv2d kernel {kh}x{kw} larger than padded input {h}x{w}"));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; c_out * ho * wo];
        for o in 0..c_out {
            let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            plane.fill(b[o]);
            for c in 0..c_in {
                let src = &x[c * h * w..(c + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let k = wt[((o * c_in + c) * kh + ky) * kw + kx];
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                            let drow = &mut plane[oy * wo..(oy + 1) * wo];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d += k * srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![c_out, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(NumericsError::Domain("log of a non-positive value".into()));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    /// Adds a constant.
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + k)
    }

    /// `max(a, lo)` elementwise; the gradient is zero where clamped.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, Op::ClampMin(a, lo), |x| x.max(lo))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            let data = ta.data().iter().map(|&x| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            let data = tb.data().iter().map(|&y| f(x, y)).collect();
            Tensor::new(tb.shape().to_vec(), data)?
        } else {
            return shape_err(format!(
                "elementwise op on {:?} and {:?}",
                ta.shape(),
                tb.shape()
            ));
        };
        Ok(self.push(value, op))
    }

    /// Elementwise sum; a single-element operand broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.value(b).data().contains(&0.0) {
            return Err(NumericsError::Domain("division by zero".into()));
        }
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Concatenates rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Usage("concat of nothing".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return shape_err(format!("concat expects vectors, got {:?}", t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![data.len()], data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Elementwise maximum over same-shape tensors; ties credit the earliest operand.
    pub fn elementwise_max(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::Usage("elementwise_max of nothing".into()));
        };
        let shape = self.shape(first).to_vec();
        let mut best = self.value(first).data().to_vec();
        let mut winner = vec![0usize; best.len()];
        for (k, &p) in parts.iter().enumerate().skip(1) {
            let t = self.value(p);
            if t.shape() != shape.as_slice() {
                return shape_err(format!("elementwise_max of {shape:?} and {:?}", t.shape()));
            }
            for (i, &v) in t.data().iter().enumerate() {
                if v > best[i] {
                    best[i] = v;
                    winner[i] = k;
                }
            }
        }
        let value = Tensor::new(shape, best)?;
        Ok(self.push(value, Op::ElementwiseMax(parts.to_vec(), winner)))
    }

    /// `[C, H, W] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if t.rank() != 3 {
            return shape_err(format!("global_avg_pool expects [C,H,W], got {:?}", t.shape()));
        }
        let c = t.shape()[0];
        let area = t.shape()[1] * t.shape()[2];
        let data = t
            .data()
            .chunks(area)
            .map(|plane| plane.iter().sum::<f64>() / area as f64)
            .collect();
        let value = Tensor::new(vec![c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(a)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = super::softmax(self.value(a))?;
        Ok(self.push(value, Op::Softmax(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Sums a list of single-element nodes.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let all = self.concat(parts)?;
        Ok(self.sum(all))
    }

    /// Element `i` of a flattened tensor, as a single-element tensor.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if i >= t.numel() {
            return Err(NumericsError::Usage(format!(
                "index {i} out of range for {:?}",
                t.shape()
            )));
        }
        let v = t.data()[i];
        Ok(self.push(Tensor::scalar(v), Op::Index(a, i)))
    }

    /// Largest element; its subgradient goes to the lowest maximizing index.
    pub fn max(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let i = super::argmax(t.data());
        let v = t.data()[i];
        self.push(Tensor::scalar(v), Op::Max(a, i))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Computes d`loss`/d(node) for every node that feeds `loss`.
    ///
    /// Gradients from a previous call are discarded; use
    /// [`Tape::accumulate_param_grads`] to add them into a store.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        let node = &self.nodes[loss.0];
        if !node.requires_grad {
            return Err(NumericsError::Usage(
                "backward on a value with no recorded dependence on any gradient leaf".into(),
            ));
        }
        if node.value.numel() != 1 {
            return Err(NumericsError::Usage(format!(
                "backward expects a scalar loss, got {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of the last `backward` into `store` (+=).
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.param_vars {
            if let Some(g) = self.grad(v) {
                for (acc, &x) in store.get_mut(id).grad.data_mut().iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
    }

    /// `backward` followed by [`Tape::accumulate_param_grads`].
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), NumericsError> {
        self.backward(loss)?;
        self.accumulate_param_grads(store);
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for c in 0..n {
                                s += g[r * n + c] * tb.data()[p * n + c];
                            }
                            ga[r * k + p] = s;
                        }
                    }
                    accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let x = ta.data()[r * k + p];
                            for c in 0..n {
                                gb[p * n + c] += x * g[r * n + c];
                            }
                        }
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => self.conv2d_backward(*input, *weight, *bias, *stride, *padding, node, g, grads),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(&g, &y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(&g, &y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(&g, &x)| g / x).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Neg(a) => {
                let ga: Vec<f64> = g.iter().map(|&g| -g).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Scale(a, k) => {
                let ga: Vec<f64> = g.iter().map(|&g| g * k).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Offset(a) => accumulate(grads, *a, g),
            Op::ClampMin(a, lo) => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(&g, &x)| if x > *lo { g } else { 0.0 }).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Add(a, b) => {
                self.binary_backward(*a, g, |_, _| 1.0, grads, *b, |_, _| 1.0);
            }
            Op::Sub(a, b) => {
                self.binary_backward(*a, g, |_, _| 1.0, grads, *b, |_, _| -1.0);
            }
            Op::Mul(a, b) => {
                self.binary_backward(*a, g, |_, y| y, grads, *b, |x, _| x);
            }
            Op::Div(a, b) => {
                self.binary_backward(*a, g, |_, y| 1.0 / y, grads, *b, |x, y| -x / (y * y));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if self.requires_grad(*p) {
                        accumulate(grads, *p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ElementwiseMax(parts, winner) => {
                for (k, p) in parts.iter().enumerate() {
                    if !self.requires_grad(*p) {
                        continue;
                    }
                    let gp: Vec<f64> = g
                        .iter()
                        .zip(winner)
                        .map(|(&g, &w)| if w == k { g } else { 0.0 })
                        .collect();
                    accumulate(grads, *p, &gp);
                }
            }
            Op::GlobalAvgPool(a) => {
                let s = self.value(*a).shape();
                let area = s[1] * s[2];
                let mut ga = vec![0.0; s[0] * area];
                for (c, plane) in ga.chunks_mut(area).enumerate() {
                    plane.fill(g[c] / area as f64);
                }
                accumulate(grads, *a, &ga);
            }
            Op::Softmax(a) => {
                let dot: f64 = g.iter().zip(out).map(|(&g, &y)| g * y).sum();
                let ga: Vec<f64> = g.iter().zip(out).map(|(&g, &y)| y * (g - dot)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(*a).numel()];
                accumulate(grads, *a, &ga);
            }
            Op::Index(a, idx) | Op::Max(a, idx) => {
                let mut ga = vec![0.0; self.value(*a).numel()];
                ga[*idx] = g[0];
                accumulate(grads, *a, &ga);
            }
            Op::Reshape(a) => accumulate(grads, *a, g),
        }
    }

    /// Chain rule for a broadcasting binary op; `da`/`db` give the local partials at (x, y).
    fn binary_backward(
        &self,
        a: Var,
        g: &[f64],
        da: impl Fn(f64, f64) -> f64,
        grads: &mut [Option<Vec<f64>>],
        b: Var,
        db: impl Fn(f64, f64) -> f64,
    ) {
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let n = g.len();
        let x_at = |i: usize| if ta.len() == 1 { ta[0] } else { ta[i] };
        let y_at = |i: usize| if tb.len() == 1 { tb[0] } else { tb[i] };
        for (side, local, len) in [(a, &da as &dyn Fn(f64, f64) -> f64, ta.len()), (b, &db, tb.len())] {
            if !self.requires_grad(side) {
                continue;
            }
            let mut gs = vec![0.0; len];
            for i in 0..n {
                let contribution = g[i] * local(x_at(i), y_at(i));
                if len == 1 {
                    gs[0] += contribution;
                } else {
                    gs[i] += contribution;
                }
            }
            accumulate(grads, side, &gs);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let ti = self.value(input);
        let tw = self.value(weight);
        let (c_in, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
        let (c_out, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
        let (ho, wo) = (node.value.shape()[1], node.value.shape()[2]);
        let x = ti.data();
        let wt = tw.data();
        let need_in = self.requires_grad(input);
        let need_w = self.requires_grad(weight);
        let mut gi = if need_in { vec![0.0; x.len()] } else { Vec::new() };
        let mut gw = if need_w { vec![0.0; wt.len()] } else { Vec::new() };
        for o in 0..c_out {
            let gplane = &g[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..c_in {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((o * c_in + c) * kh + ky) * kw + kx;
                        let k = wt[widx];
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = c * h * w + iy as usize * w;
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let go = gplane[oy * wo + ox];
                                let xi = base + ix as usize;
                                acc += go * x[xi];
                                if need_in {
                                    gi[xi] += go * k;
                                }
                            }
                        }
                        if need_w {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        if need_in {
            accumulate(grads, input, &gi);
        }
        if need_w {
            accumulate(grads, weight, &gw);
        }
        if self.requires_grad(bias) {
            let gb: Vec<f64> = g.chunks(ho * wo).map(|p| p.iter().sum()).collect();
            accumulate(grads, bias, &gb);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn inputs_of(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf | Op::Param => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            vec![a.0, b.0]
        }
        Op::Conv2d {
            input, weight, bias, ..
        } => vec![input.0, weight.0, bias.0],
        Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Log(a)
        | Op::Neg(a)
        | Op::Scale(a, _)
        | Op::Offset(a)
        | Op::ClampMin(a, _)
        | Op::GlobalAvgPool(a)
        | Op::Softmax(a)
        | Op::Sum(a)
        | Op::Index(a, _)
        | Op::Max(a, _)
        | Op::Reshape(a) => vec![a.0],
        Op::Concat(parts) | Op::ElementwiseMax(parts, _) => parts.iter().map(|p| p.0).collect(),
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

/// Softmax of a slice, exposed for callers that already validated finiteness.
pub fn softmax_values(logits: &[f64]) -> Vec<f64> {
    softmax_slice(logits)
}
