//! Define-by-run reverse-mode tape.
//!
//! Ops panic on shape mismatches, which are caller bugs. Non-finite outputs
//! instead set a poison flag that `backward` reports as a typed error, so a
//! diverging training step aborts cleanly instead of spreading NaNs.

use std::collections::{BTreeMap, HashMap};

use super::conv;
use super::{Gradients, ParamSet, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MaxConst(Var, f64),
    ConcatLast(Var, Var),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    StopGrad,
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    Upsample2x(Var),
    BlockMean(Var, usize),
    Crop { x: Var, y0: usize, x0: usize, ch: usize, cw: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_cache: HashMap<String, Var>,
    poisoned: Option<String>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Reads a scalar node's value.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "expected scalar, found shape {:?}", t.shape);
        t.data[0]
    }

    pub fn poisoned(&self) -> Option<&str> {
        self.poisoned.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> Var {
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some(name.to_string());
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, "input")
    }

    pub fn input_scalar(&mut self, value: f64) -> Var {
        self.input(Tensor::scalar(value))
    }

    /// Loads a named parameter as a trainable leaf. Repeated loads of the
    /// same name return the same node so gradients accumulate in one place.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Var {
        if let Some(&v) = self.param_cache.get(name) {
            return v;
        }
        let value = params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not registered"))
            .clone();
        let v = self.push(value, Op::Param(name.to_string()), true, "param");
        self.param_cache.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2, "matmul lhs must be rank 2, found {sa:?}");
        assert_eq!(sb.len(), 2, "matmul rhs must be rank 2, found {sb:?}");
        assert_eq!(sa[1], sb[0], "matmul inner extents differ: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].value.data;
            let bv = &self.nodes[b.0].value.data;
            for i in 0..m {
                let crow = &mut out[i * n..(i + 1) * n];
                for l in 0..k {
                    let s = av[i * k + l];
                    if s == 0.0 {
                        continue;
                    }
                    let brow = &bv[l * n..(l + 1) * n];
                    for (c, &bb) in crow.iter_mut().zip(brow) {
                        *c += s * bb;
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], out), Op::Matmul(a, b), needs, "matmul")
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{name} operands must share a shape"
        );
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), op, needs, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b), "div")
    }

    /// Adds `bias` (rank 1) across the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let n = {
            let sb = self.shape(bias);
            assert_eq!(sb.len(), 1, "bias must be rank 1, found {sb:?}");
            let sx = self.shape(x);
            assert_eq!(
                sx.last(),
                Some(&sb[0]),
                "bias extent {sb:?} does not match last axis of {sx:?}"
            );
            sb[0]
        };
        let bv = self.nodes[bias.0].value.data.clone();
        let mut data = self.nodes[x.0].value.data.clone();
        for chunk in data.chunks_mut(n) {
            for (d, b) in chunk.iter_mut().zip(&bv) {
                *d += b;
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(bias);
        self.push(Tensor::new(shape, data), Op::AddBias(x, bias), needs, "add_bias")
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &str) -> Var {
        let data: Vec<f64> = self.nodes[x.0].value.data.iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), op, needs, name)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s), "scale")
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddConst(x), "add_const")
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
            "leaky_relu",
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x), "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x), "sigmoid")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x), "softplus")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x), "exp")
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x), "ln")
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x), "square")
    }

    /// Elementwise `max(x, c)`; gradient is zero on the clamped side.
    pub fn max_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v.max(c), Op::MaxConst(x, c), "max_const")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.nodes[x.0].value.data.iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), needs, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let m = t.data.iter().sum::<f64>() / t.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), needs, "mean")
    }

    /// Concatenates along the last axis; leading extents must match.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), sb.len(), "concat ranks differ: {sa:?} vs {sb:?}");
        assert_eq!(
            sa[..sa.len() - 1],
            sb[..sb.len() - 1],
            "concat leading extents differ: {sa:?} vs {sb:?}"
        );
        let (na, nb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.nodes[a.0].value.len() / na.max(1);
        let mut data = Vec::with_capacity(rows * (na + nb));
        {
            let av = &self.nodes[a.0].value.data;
            let bv = &self.nodes[b.0].value.data;
            for r in 0..rows {
                data.extend_from_slice(&av[r * na..(r + 1) * na]);
                data.extend_from_slice(&bv[r * nb..(r + 1) * nb]);
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = na + nb;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::ConcatLast(a, b), needs, "concat_last")
    }

    /// Contiguous block of `count` rows along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(!s.is_empty(), "slice_rows needs at least rank 1");
        assert!(start + count <= s[0], "rows {start}..{} out of {}", start + count, s[0]);
        assert!(count > 0, "slice_rows needs at least one row");
        let row: usize = s[1..].iter().product();
        let data = self.nodes[x.0].value.data[start * row..(start + count) * row].to_vec();
        let mut shape = s;
        shape[0] = count;
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, data),
            Op::SliceRows { x, start },
            needs,
            "slice_rows",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = &self.nodes[x.0].value;
        assert_eq!(
            shape.iter().product::<usize>(),
            t.len(),
            "reshape {:?} -> {shape:?} changes element count",
            t.shape
        );
        let data = t.data.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), Op::Reshape(x), needs, "reshape")
    }

    /// Identity forward; blocks all gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::StopGrad, false, "stop_gradient")
    }

    /// 2d convolution over `[batch, height, width, in_ch]` with a
    /// `[kh, kw, in_ch, out_ch]` kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        assert_eq!(sx.len(), 4, "conv2d input must be rank 4, found {sx:?}");
        assert_eq!(sk.len(), 4, "conv2d kernel must be rank 4, found {sk:?}");
        assert_eq!(sx[3], sk[2], "conv2d channels differ: {sx:?} vs {sk:?}");
        assert!(stride > 0, "conv2d stride must be positive");
        let value = conv::forward(
            &self.nodes[x.0].value,
            &self.nodes[k.0].value,
            stride,
            pad,
        );
        let needs = self.needs(x) || self.needs(k);
        self.push(value, Op::Conv2d { x, k, stride, pad }, needs, "conv2d")
    }

    /// Nearest-neighbour doubling of height and width.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample2x input must be rank 4, found {s:?}");
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let xv = &self.nodes[x.0].value.data;
        let mut data = vec![0.0; b * 4 * h * w * c];
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let src = &xv[((bi * h + i) * w + j) * c..][..c];
                    for di in 0..2 {
                        for dj in 0..2 {
                            let o = ((bi * 2 * h + 2 * i + di) * 2 * w + 2 * j + dj) * c;
                            data[o..o + c].copy_from_slice(src);
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(vec![b, 2 * h, 2 * w, c], data),
            Op::Upsample2x(x),
            needs,
            "upsample2x",
        )
    }

    /// Averages non-overlapping `k`x`k` spatial blocks.
    pub fn block_mean(&mut self, x: Var, k: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "block_mean input must be rank 4, found {s:?}");
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        assert!(k > 0 && h % k == 0 && w % k == 0, "block size {k} must divide {h}x{w}");
        let (oh, ow) = (h / k, w / k);
        let xv = &self.nodes[x.0].value.data;
        let mut data = vec![0.0; b * oh * ow * c];
        let inv = 1.0 / (k * k) as f64;
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let src = &xv[((bi * h + i) * w + j) * c..][..c];
                    let o = ((bi * oh + i / k) * ow + j / k) * c;
                    for (d, &v) in data[o..o + c].iter_mut().zip(src) {
                        *d += v * inv;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(vec![b, oh, ow, c], data),
            Op::BlockMean(x, k),
            needs,
            "block_mean",
        )
    }

    /// Spatial window `[y0..y0+ch, x0..x0+cw]` of a rank-4 tensor.
    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, ch: usize, cw: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "crop input must be rank 4, found {s:?}");
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        assert!(y0 + ch <= h && x0 + cw <= w, "crop window exceeds {h}x{w}");
        assert!(ch > 0 && cw > 0, "crop window must be non-empty");
        let xv = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(b * ch * cw * c);
        for bi in 0..b {
            for i in y0..y0 + ch {
                for j in x0..x0 + cw {
                    data.extend_from_slice(&xv[((bi * h + i) * w + j) * c..][..c]);
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(vec![b, ch, cw, c], data),
            Op::Crop { x, y0, x0, ch, cw },
            needs,
            "crop",
        )
    }

    /// Reverse pass from a scalar loss. Returns d(loss)/d(param) for every
    /// parameter loaded into this graph; parameters cut off by
    /// `stop_gradient` get exact zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if let Some(op) = &self.poisoned {
            return Err(TensorError::NonFinite(op.clone()));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape.clone()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad && !matches!(self.nodes[i].op, Op::Param(_)) {
                continue;
            }
            match self.nodes[i].op.clone() {
                Op::Leaf | Op::StopGrad => {}
                Op::Param(name) => {
                    // handled below when collecting; keep the grad around
                    grads[i] = Some(g);
                    let _ = name;
                }
                Op::Matmul(a, b) => {
                    let (m, k) = {
                        let s = self.shape(a);
                        (s[0], s[1])
                    };
                    let n = self.shape(b)[1];
                    if self.needs(a) {
                        let bv = &self.nodes[b.0].value.data;
                        let da = self.grad_buf(&mut grads, a);
                        for i2 in 0..m {
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            for l in 0..k {
                                let brow = &bv[l * n..(l + 1) * n];
                                let mut acc = 0.0;
                                for (gg, bb) in grow.iter().zip(brow) {
                                    acc += gg * bb;
                                }
                                da[i2 * k + l] += acc;
                            }
                        }
                    }
                    if self.needs(b) {
                        let av = self.nodes[a.0].value.data.clone();
                        let db = self.grad_buf(&mut grads, b);
                        for i2 in 0..m {
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            for l in 0..k {
                                let s = av[i2 * k + l];
                                if s == 0.0 {
                                    continue;
                                }
                                let drow = &mut db[l * n..(l + 1) * n];
                                for (d, gg) in drow.iter_mut().zip(grow) {
                                    *d += s * gg;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        axpy(self.grad_buf(&mut grads, a), &g, 1.0);
                    }
                    if self.needs(b) {
                        axpy(self.grad_buf(&mut grads, b), &g, 1.0);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        axpy(self.grad_buf(&mut grads, a), &g, 1.0);
                    }
                    if self.needs(b) {
                        axpy(self.grad_buf(&mut grads, b), &g, -1.0);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let bv = self.nodes[b.0].value.data.clone();
                        let da = self.grad_buf(&mut grads, a);
                        for ((d, gg), bb) in da.iter_mut().zip(&g).zip(&bv) {
                            *d += gg * bb;
                        }
                    }
                    if self.needs(b) {
                        let av = self.nodes[a.0].value.data.clone();
                        let db = self.grad_buf(&mut grads, b);
                        for ((d, gg), aa) in db.iter_mut().zip(&g).zip(&av) {
                            *d += gg * aa;
                        }
                    }
                }
                Op::Div(a, b) => {
                    if self.needs(a) {
                        let bv = self.nodes[b.0].value.data.clone();
                        let da = self.grad_buf(&mut grads, a);
                        for ((d, gg), bb) in da.iter_mut().zip(&g).zip(&bv) {
                            *d += gg / bb;
                        }
                    }
                    if self.needs(b) {
                        let av = self.nodes[a.0].value.data.clone();
                        let bv = self.nodes[b.0].value.data.clone();
                        let db = self.grad_buf(&mut grads, b);
                        for i2 in 0..db.len() {
                            db[i2] -= g[i2] * av[i2] / (bv[i2] * bv[i2]);
                        }
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.needs(x) {
                        axpy(self.grad_buf(&mut grads, x), &g, 1.0);
                    }
                    if self.needs(bias) {
                        let n = self.shape(bias)[0];
                        let db = self.grad_buf(&mut grads, bias);
                        for chunk in g.chunks(n) {
                            for (d, gg) in db.iter_mut().zip(chunk) {
                                *d += gg;
                            }
                        }
                    }
                }
                Op::Scale(x, s) => {
                    if self.needs(x) {
                        axpy(self.grad_buf(&mut grads, x), &g, s);
                    }
                }
                Op::AddConst(x) => {
                    if self.needs(x) {
                        axpy(self.grad_buf(&mut grads, x), &g, 1.0);
                    }
                }
                Op::LeakyRelu(x, slope) => {
                    if self.needs(x) {
                        let xv = self.nodes[x.0].value.data.clone();
                        let dx = self.grad_buf(&mut grads, x);
                        for ((d, gg), xx) in dx.iter_mut().zip(&g).zip(&xv) {
                            *d += gg * if *xx > 0.0 { 1.0 } else { slope };
                        }
                    }
                }
                Op::Tanh(x) => {
                    if self.needs(x) {
                        let yv = self.nodes[i].value.data.clone();
                        let dx = self.grad_buf(&mut grads, x);
                        for ((d, gg), yy) in dx.iter_mut().zip(&g).zip(&yv) {
                            *d += gg * (1.0 - yy * yy);
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if self.needs(x) {
                        let yv = self.nodes[i].value.data.clone();
                        let dx = self.grad_buf(&mut grads, x);
                        for ((d, gg), yy) in dx.iter_mut().zip(&g).zip(&yv) {
                            *d += gg * yy * (1.0 - yy);
                        }
                    }
                }
                Op::Softplus(x) => {
                    if self.needs(x) {
                        let xv = self.nodes[x.0].value.data.clone();
                        let dx = self.grad_buf(&mut grads, x);
                        for ((d, gg), xx) in dx.iter_mut().zip(&g).zip(&xv) {
                            *d += gg * sigmoid(*xx);
                        }
                    }
                }
                Op::Exp(x) => {
                    if self.needs(x) {
                        let yv = self.nodes[i].value.data.clone();
                        let dx = self.grad_buf(&mut grads, x);
                        for ((d, gg), yy) in dx.iter_mut().zip(&g).zip(&yv) {
                            *d += gg * yy;
                        }
                    }
                }
                Op::Ln(x) => {
                    if self.needs(x) {
                        let xv = self.nodes[x.0].value.data.clone();
                        let dx = self.grad_buf(&mut grads, x);
                        for ((d, gg), xx) in dx.iter_mut().zip(&g).zip(&xv) {
                            *d += gg / xx;
                        }
                    }
                }
                Op::Square(x) => {
                    if self.needs(x) {
                        let xv = self.nodes[x.0].value.data.clone();
                        let dx = self.grad_buf(&mut grads, x);
                        for ((d, gg), xx) in dx.iter_mut().zip(&g).zip(&xv) {
                            *d += gg * 2.0 * xx;
                        }
                    }
                }
                Op::Sum(x) => {
                    if self.needs(x) {
                        let dx = self.grad_buf(&mut grads, x);
                        for d in dx.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::Mean(x) => {
                    if self.needs(x) {
                        let dx = self.grad_buf(&mut grads, x);
                        let s = g[0] / dx.len() as f64;
                        for d in dx.iter_mut() {
                            *d += s;
                        }
                    }
                }
                Op::MaxConst(x, c) => {
                    if self.needs(x) {
                        let xv = self.nodes[x.0].value.data.clone();
                        let dx = self.grad_buf(&mut grads, x);
                        for ((d, gg), xx) in dx.iter_mut().zip(&g).zip(&xv) {
                            if *xx > c {
                                *d += gg;
                            }
                        }
                    }
                }
                Op::ConcatLast(a, b) => {
                    let na = *self.shape(a).last().unwrap();
                    let nb = *self.shape(b).last().unwrap();
                    let step = na + nb;
                    if self.needs(a) {
                        let da = self.grad_buf(&mut grads, a);
                        for (r, chunk) in g.chunks(step).enumerate() {
                            axpy(&mut da[r * na..(r + 1) * na], &chunk[..na], 1.0);
                        }
                    }
                    if self.needs(b) {
                        let db = self.grad_buf(&mut grads, b);
                        for (r, chunk) in g.chunks(step).enumerate() {
                            axpy(&mut db[r * nb..(r + 1) * nb], &chunk[na..], 1.0);
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    if self.needs(x) {
                        let row: usize = self.shape(x)[1..].iter().product();
                        let dx = self.grad_buf(&mut grads, x);
                        axpy(&mut dx[start * row..start * row + g.len()], &g, 1.0);
                    }
                }
                Op::Reshape(x) => {
                    if self.needs(x) {
                        axpy(self.grad_buf(&mut grads, x), &g, 1.0);
                    }
                }
                Op::Conv2d { x, k, stride, pad } => {
                    let gy = Tensor::new(self.shape(Var(i)).to_vec(), g.clone());
                    if self.needs(x) {
                        let dx = conv::backward_input(
                            self.shape(x),
                            &self.nodes[k.0].value,
                            &gy,
                            stride,
                            pad,
                        );
                        axpy(self.grad_buf(&mut grads, x), &dx, 1.0);
                    }
                    if self.needs(k) {
                        let dk = conv::backward_kernel(
                            &self.nodes[x.0].value,
                            self.shape(k),
                            &gy,
                            stride,
                            pad,
                        );
                        axpy(self.grad_buf(&mut grads, k), &dk, 1.0);
                    }
                }
                Op::Upsample2x(x) => {
                    if self.needs(x) {
                        let s = self.shape(x).to_vec();
                        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                        let dx = self.grad_buf(&mut grads, x);
                        for bi in 0..b {
                            for i2 in 0..h {
                                for j in 0..w {
                                    let o = ((bi * h + i2) * w + j) * c;
                                    for di in 0..2 {
                                        for dj in 0..2 {
                                            let src = ((bi * 2 * h + 2 * i2 + di) * 2 * w
                                                + 2 * j
                                                + dj)
                                                * c;
                                            axpy(&mut dx[o..o + c], &g[src..src + c], 1.0);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::BlockMean(x, kk) => {
                    if self.needs(x) {
                        let s = self.shape(x).to_vec();
                        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                        let (oh, ow) = (h / kk, w / kk);
                        let inv = 1.0 / (kk * kk) as f64;
                        let dx = self.grad_buf(&mut grads, x);
                        for bi in 0..b {
                            for i2 in 0..h {
                                for j in 0..w {
                                    let o = ((bi * h + i2) * w + j) * c;
                                    let src = ((bi * oh + i2 / kk) * ow + j / kk) * c;
                                    axpy(&mut dx[o..o + c], &g[src..src + c], inv);
                                }
                            }
                        }
                    }
                }
                Op::Crop { x, y0, x0, ch, cw } => {
                    if self.needs(x) {
                        let s = self.shape(x).to_vec();
                        let (_b, h, w, c) = (s[0], s[1], s[2], s[3]);
                        let b = s[0];
                        let dx = self.grad_buf(&mut grads, x);
                        let mut src = 0;
                        for bi in 0..b {
                            for i2 in y0..y0 + ch {
                                for j in x0..x0 + cw {
                                    let o = ((bi * h + i2) * w + j) * c;
                                    axpy(&mut dx[o..o + c], &g[src..src + c], 1.0);
                                    src += c;
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut out: Gradients = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let data = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                out.insert(name.clone(), Tensor::new(node.value.shape.clone(), data));
            }
        }
        Ok(out)
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

fn axpy(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}
