use std::f64::consts::LN_2;

use nalgebra::{Cholesky, DMatrix};
use ndarray::{ArrayView1, ArrayView2, Axis};
use num_complex::Complex64;

use super::cplx::{matmul, pack_into, unpack, Mat};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    CMatMul { a: Var, b: Var, adjoint_a: bool },
    CMul(Var, Var),
    HermSolve { a: Var, b: Var },
    AbsSq(Var),
    Log2p1(Var),
    Sqrt(Var),
    Recip(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MinLast { x: Var, argmin: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Gather { x: Var, indices: Vec<usize> },
    Reshape(Var),
    ScaleToPower { x: Var, power: f64 },
    WeightedGram { h: Tensor, w: Var, mu: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Affine { .. } => "affine",
            Op::CMatMul { .. } => "complex_matmul",
            Op::CMul(..) => "complex_mul",
            Op::HermSolve { .. } => "hermitian_solve",
            Op::AbsSq(..) => "abs_sq",
            Op::Log2p1(..) => "log2_1p",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::MinLast { .. } => "min_last",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::Reshape(..) => "reshape",
            Op::ScaleToPower { .. } => "scale_to_power",
            Op::WeightedGram { .. } => "weighted_gram",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) | Op::CMul(a, b) => {
                vec![*a, *b]
            }
            Op::CMatMul { a, b, .. } | Op::HermSolve { a, b } => vec![*a, *b],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::AbsSq(x)
            | Op::Log2p1(x)
            | Op::Sqrt(x)
            | Op::Recip(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Abs(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumLast(x)
            | Op::Reshape(x) => vec![*x],
            Op::MinLast { x, .. } | Op::Gather { x, .. } | Op::ScaleToPower { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::WeightedGram { w, mu, .. } => vec![*w, *mu],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Record of a forward computation.  Nodes are appended in evaluation
/// order, which is a topological order of the graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Splits a `[.., rows, cols, 2]` shape into (batch, rows, cols).
fn complex_matrix_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let n = shape.len();
    if n < 3 || shape[n - 1] != 2 {
        return Err(Error::dims("[.., rows, cols, 2]", format!("{shape:?}")));
    }
    Ok((numel(&shape[..n - 3]), shape[n - 3], shape[n - 2]))
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dims(format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

fn hermitian_factor(a: &[Complex64], n: usize) -> Result<Cholesky<Complex64, nalgebra::Dyn>> {
    crate::fp::cholesky(DMatrix::from_row_slice(n, n, a))
}

fn solve_rows(chol: &Cholesky<Complex64, nalgebra::Dyn>, b: &[Complex64], n: usize, m: usize) -> Vec<Complex64> {
    let x = chol.solve(&DMatrix::from_row_slice(n, m, b));
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(x[(i, j)]);
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: self.nodes.len(),
                op: op.name(),
            });
        }
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, op)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn log2_1p(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Log2p1(x), |v| v.ln_1p() / LN_2)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Recip(x), |v| 1.0 / v)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Abs(x), f64::abs)
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dims(format!("[m, n] x [n, p] for {sa:?}"), format!("{sb:?}")));
        }
        let av = ArrayView2::from_shape((sa[0], sa[1]), ta.data()).expect("shape checked");
        let bv = ArrayView2::from_shape((sb[0], sb[1]), tb.data()).expect("shape checked");
        let out = av.dot(&bv);
        let value = Tensor::new(vec![sa[0], sb[1]], out.iter().copied().collect())?;
        self.push(value, Op::MatMul(a, b))
    }

    /// `x W^T + b` for a batch of row vectors `x: [B, n]`, `W: [m, n]`, `b: [m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw, sb) = (tx.shape(), tw.shape(), tb.shape());
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[1] || sb[0] != sw[0] {
            return Err(Error::dims(
                format!("x [B, n], W [m, n], b [m]; W is {sw:?}, b is {sb:?}"),
                format!("{sx:?}"),
            ));
        }
        let xv = ArrayView2::from_shape((sx[0], sx[1]), tx.data()).expect("shape checked");
        let wv = ArrayView2::from_shape((sw[0], sw[1]), tw.data()).expect("shape checked");
        let bv = ArrayView1::from(tb.data());
        let out = xv.dot(&wv.t()) + bv;
        let value = Tensor::new(vec![sx[0], sw[0]], out.iter().copied().collect())?;
        self.push(value, Op::Affine { x, w, b })
    }

    /// Batched complex product `op(A) B` with `A: [.., r, c, 2]`,
    /// `B: [.., n, p, 2]`; `op` is the conjugate transpose when `adjoint_a`.
    pub fn complex_matmul(&mut self, a: Var, b: Var, adjoint_a: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ba, ar, ac) = complex_matrix_dims(ta.shape())?;
        let (bb, br, bc) = complex_matrix_dims(tb.shape())?;
        let (m, n) = if adjoint_a { (ac, ar) } else { (ar, ac) };
        let lead = &ta.shape()[..ta.shape().len() - 3];
        if ba != bb || lead != &tb.shape()[..tb.shape().len() - 3] || n != br {
            return Err(Error::dims(
                format!("inner dimension {n} with batch {lead:?}"),
                format!("{:?}", tb.shape()),
            ));
        }
        let (ca, cb) = (unpack(ta.data()), unpack(tb.data()));
        let mut shape = lead.to_vec();
        shape.extend([m, bc, 2]);
        let mut data = vec![0.0; numel(&shape)];
        for i in 0..ba {
            let mut ma = Mat::new(&ca[i * ar * ac..(i + 1) * ar * ac], ar, ac);
            if adjoint_a {
                ma = ma.adj();
            }
            let mb = Mat::new(&cb[i * br * bc..(i + 1) * br * bc], br, bc);
            pack_into(&matmul(ma, mb), &mut data[i * 2 * m * bc..(i + 1) * 2 * m * bc]);
        }
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::CMatMul { a, b, adjoint_a })
    }

    /// Elementwise complex product of two `[.., 2]` tensors.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb)?;
        if ta.shape().last() != Some(&2) {
            return Err(Error::dims("[.., 2]", format!("{:?}", ta.shape())));
        }
        let mut data = vec![0.0; ta.len()];
        for ((o, x), y) in data.chunks_exact_mut(2).zip(ta.data().chunks_exact(2)).zip(tb.data().chunks_exact(2)) {
            o[0] = x[0] * y[0] - x[1] * y[1];
            o[1] = x[0] * y[1] + x[1] * y[0];
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::CMul(a, b))
    }

    /// Batched `A^-1 B` for Hermitian positive-definite `A: [.., n, n, 2]`
    /// and `B: [.., n, m, 2]`.  Only the lower triangle of `A` is read.
    pub fn hermitian_solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ba, n, n2) = complex_matrix_dims(ta.shape())?;
        let (bb, br, m) = complex_matrix_dims(tb.shape())?;
        if n != n2 || ba != bb || br != n {
            return Err(Error::dims(
                format!("square A with {n} rows matching B"),
                format!("{:?} and {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (ca, cb) = (unpack(ta.data()), unpack(tb.data()));
        let mut data = vec![0.0; tb.len()];
        for i in 0..ba {
            let chol = hermitian_factor(&ca[i * n * n..(i + 1) * n * n], n)?;
            let x = solve_rows(&chol, &cb[i * n * m..(i + 1) * n * m], n, m);
            pack_into(&x, &mut data[i * 2 * n * m..(i + 1) * 2 * n * m]);
        }
        let value = Tensor::new(tb.shape().to_vec(), data)?;
        self.push(value, Op::HermSolve { a, b })
    }

    /// `|z|^2` of a `[.., 2]` tensor; drops the trailing dimension.
    pub fn abs_sq(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if shape.last() != Some(&2) {
            return Err(Error::dims("[.., 2]", format!("{shape:?}")));
        }
        let data = t.data().chunks_exact(2).map(|p| p[0] * p[0] + p[1] * p[1]).collect();
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        self.push(value, Op::AbsSq(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        let Some(&n) = shape.last() else {
            return Err(Error::invalid("sum_last of a scalar"));
        };
        let data = t.data().chunks_exact(n).map(|c| c.iter().sum()).collect();
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        self.push(value, Op::SumLast(x))
    }

    /// Minimum over the last axis; the gradient goes to the first minimiser.
    pub fn min_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        let n = match shape.last() {
            Some(&n) if n > 0 => n,
            _ => return Err(Error::invalid("min over an empty axis")),
        };
        let mut argmin = Vec::with_capacity(t.len() / n);
        let mut data = Vec::with_capacity(t.len() / n);
        for (r, c) in t.data().chunks_exact(n).enumerate() {
            let mut best = 0;
            for j in 1..n {
                if c[j] < c[best] {
                    best = j;
                }
            }
            argmin.push(r * n + best);
            data.push(c[best]);
        }
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        self.push(value, Op::MinLast { x, argmin })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::invalid("concat of nothing"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dims(format!("axis < {}", base.len()), axis));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::dims(format!("{base:?} away from axis {axis}"), format!("{s:?}")));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// `out[i] = x.flat[indices[i]]`, reshaped to `shape`.  Covers slicing,
    /// transposition, diagonals and broadcasting.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(Error::dims(format!("index < {}", t.len()), bad));
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Gather { x, indices })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = Tensor::new(shape, self.value(x).data().to_vec())?;
        self.push(value, Op::Reshape(x))
    }

    /// Scales each slice along the leading axis to squared norm `power`.
    pub fn scale_to_power(&mut self, x: Var, power: f64) -> Result<Var> {
        let t = self.value(x);
        let Some(&batch) = t.shape().first() else {
            return Err(Error::invalid("scale_to_power needs a batch axis"));
        };
        if !(power > 0.0) {
            return Err(Error::invalid(format!("power must be positive, got {power}")));
        }
        let block = if batch == 0 { 0 } else { t.len() / batch };
        let mut data = t.data().to_vec();
        for c in data.chunks_exact_mut(block.max(1)) {
            let norm_sq: f64 = c.iter().map(|v| v * v).sum();
            if norm_sq == 0.0 {
                return Err(Error::invalid("cannot rescale an all-zero block"));
            }
            let f = (power / norm_sq).sqrt();
            c.iter_mut().for_each(|v| *v *= f);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::ScaleToPower { x, power })
    }

    /// `sum_j w_j h_j h_j^H + mu I` per batch element, with constant columns
    /// `h: [.., n, k, 2]`, weights `w: [.., k]` and `mu: [..]`.
    pub fn weighted_gram(&mut self, h: &Tensor, w: Var, mu: Var) -> Result<Var> {
        let (batch, n, k) = complex_matrix_dims(h.shape())?;
        let lead = &h.shape()[..h.shape().len() - 3];
        let (tw, tm) = (self.value(w), self.value(mu));
        let mut wshape = lead.to_vec();
        wshape.push(k);
        if tw.shape() != wshape.as_slice() || tm.shape() != lead {
            return Err(Error::dims(
                format!("w {wshape:?}, mu {lead:?}"),
                format!("w {:?}, mu {:?}", tw.shape(), tm.shape()),
            ));
        }
        let ch = unpack(h.data());
        let mut shape = lead.to_vec();
        shape.extend([n, n, 2]);
        let mut out = vec![Complex64::new(0.0, 0.0); batch * n * n];
        for b in 0..batch {
            let hb = &ch[b * n * k..(b + 1) * n * k];
            let a = &mut out[b * n * n..(b + 1) * n * n];
            for j in 0..k {
                let wj = tw.data()[b * k + j];
                for r in 0..n {
                    let hr = hb[r * k + j] * wj;
                    for c in 0..n {
                        a[r * n + c] += hr * hb[c * k + j].conj();
                    }
                }
            }
            for r in 0..n {
                a[r * n + r] += tm.data()[b];
            }
        }
        let mut data = vec![0.0; 2 * out.len()];
        pack_into(&out, &mut data);
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::WeightedGram { h: h.clone(), w, mu })
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].tracked {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] * vb[i]));
                acc(*b, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] * va[i]));
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                acc(*a, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] / vb[i]));
                acc(*b, &mut |s| (0..s.len()).for_each(|i| s[i] -= g[i] * out[i] / vb[i]));
            }
            Op::Scale(x, c) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Log2p1(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] / ((1.0 + vx[i]) * LN_2)));
            }
            Op::Sqrt(x) => acc(*x, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] / (2.0 * out[i]))),
            Op::Recip(x) => acc(*x, &mut |s| (0..s.len()).for_each(|i| s[i] -= g[i] * out[i] * out[i])),
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| (0..s.len()).for_each(|i| if vx[i] > 0.0 { s[i] += g[i] }));
            }
            Op::Sigmoid(x) => acc(*x, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] * out[i] * (1.0 - out[i]))),
            Op::Abs(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    (0..s.len()).for_each(|i| {
                        if vx[i] != 0.0 {
                            s[i] += g[i] * vx[i].signum()
                        }
                    })
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let av = ArrayView2::from_shape((sa[0], sa[1]), val(*a)).expect("forward shape");
                let bv = ArrayView2::from_shape((sb[0], sb[1]), val(*b)).expect("forward shape");
                let gv = ArrayView2::from_shape((sa[0], sb[1]), g).expect("forward shape");
                let ga = gv.dot(&bv.t());
                let gb = av.t().dot(&gv);
                acc(*a, &mut |s| s.iter_mut().zip(ga.iter()).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(gb.iter()).for_each(|(s, g)| *s += g));
            }
            Op::Affine { x, w, b } => {
                let (sx, sw) = (self.nodes[x.0].value.shape(), self.nodes[w.0].value.shape());
                let xv = ArrayView2::from_shape((sx[0], sx[1]), val(*x)).expect("forward shape");
                let wv = ArrayView2::from_shape((sw[0], sw[1]), val(*w)).expect("forward shape");
                let gv = ArrayView2::from_shape((sx[0], sw[0]), g).expect("forward shape");
                if self.nodes[x.0].tracked {
                    let gx = gv.dot(&wv);
                    acc(*x, &mut |s| s.iter_mut().zip(gx.iter()).for_each(|(s, g)| *s += g));
                }
                if self.nodes[w.0].tracked {
                    let gw = gv.t().dot(&xv);
                    acc(*w, &mut |s| s.iter_mut().zip(gw.iter()).for_each(|(s, g)| *s += g));
                }
                let gb = gv.sum_axis(Axis(0));
                acc(*b, &mut |s| s.iter_mut().zip(gb.iter()).for_each(|(s, g)| *s += g));
            }
            Op::CMatMul { a, b, adjoint_a } => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (batch, ar, ac) = complex_matrix_dims(sa)?;
                let (_, br, bc) = complex_matrix_dims(sb)?;
                let m = if *adjoint_a { ac } else { ar };
                let (ca, cb, cg) = (unpack(val(*a)), unpack(val(*b)), unpack(g));
                let mut ga = vec![0.0; 2 * ca.len()];
                let mut gb = vec![0.0; 2 * cb.len()];
                for i in 0..batch {
                    let ma = Mat::new(&ca[i * ar * ac..(i + 1) * ar * ac], ar, ac);
                    let mb = Mat::new(&cb[i * br * bc..(i + 1) * br * bc], br, bc);
                    let mg = Mat::new(&cg[i * m * bc..(i + 1) * m * bc], m, bc);
                    // Y = op(A) B: grad op(A) = G B^H, grad B = op(A)^H G
                    let da = if *adjoint_a { matmul(mb, mg.adj()) } else { matmul(mg, mb.adj()) };
                    let op_a = if *adjoint_a { ma.adj() } else { ma };
                    let db = matmul(op_a.adj(), mg);
                    pack_into(&da, &mut ga[i * 2 * ar * ac..(i + 1) * 2 * ar * ac]);
                    pack_into(&db, &mut gb[i * 2 * br * bc..(i + 1) * 2 * br * bc]);
                }
                acc(*a, &mut |s| s.iter_mut().zip(&ga).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(&gb).for_each(|(s, g)| *s += g));
            }
            Op::CMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                // grad a = g conj(b), grad b = g conj(a)
                let cmul_conj = |s: &mut [f64], other: &[f64]| {
                    for ((s, g), y) in s.chunks_exact_mut(2).zip(g.chunks_exact(2)).zip(other.chunks_exact(2)) {
                        s[0] += g[0] * y[0] + g[1] * y[1];
                        s[1] += g[1] * y[0] - g[0] * y[1];
                    }
                };
                acc(*a, &mut |s| cmul_conj(s, vb));
                acc(*b, &mut |s| cmul_conj(s, va));
            }
            Op::HermSolve { a, b } => {
                let (batch, n, _) = complex_matrix_dims(self.nodes[a.0].value.shape())?;
                let (_, _, m) = complex_matrix_dims(self.nodes[b.0].value.shape())?;
                let (ca, cx, cg) = (unpack(val(*a)), unpack(out), unpack(g));
                let mut ga = vec![0.0; 2 * ca.len()];
                let mut gb = vec![0.0; 2 * cx.len()];
                for i in 0..batch {
                    let chol = hermitian_factor(&ca[i * n * n..(i + 1) * n * n], n)?;
                    // grad B = A^-H G = A^-1 G, grad A = -grad B X^H
                    let db = solve_rows(&chol, &cg[i * n * m..(i + 1) * n * m], n, m);
                    let mx = Mat::new(&cx[i * n * m..(i + 1) * n * m], n, m);
                    let da: Vec<Complex64> = matmul(Mat::new(&db, n, m), mx.adj()).into_iter().map(|z| -z).collect();
                    pack_into(&da, &mut ga[i * 2 * n * n..(i + 1) * 2 * n * n]);
                    pack_into(&db, &mut gb[i * 2 * n * m..(i + 1) * 2 * n * m]);
                }
                acc(*a, &mut |s| s.iter_mut().zip(&ga).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(&gb).for_each(|(s, g)| *s += g));
            }
            Op::AbsSq(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| (0..s.len()).for_each(|i| s[i] += 2.0 * vx[i] * g[i / 2]));
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::SumLast(x) => {
                let n = *self.nodes[x.0].value.shape().last().expect("forward shape");
                acc(*x, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i / n]));
            }
            Op::MinLast { x, argmin } => acc(*x, &mut |s| argmin.iter().zip(g).for_each(|(&i, g)| s[i] += g)),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let block = self.nodes[v.0].value.shape()[*axis] * inner;
                    acc(v, &mut |s| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + block];
                            s[o * block..(o + 1) * block].iter_mut().zip(src).for_each(|(s, g)| *s += g);
                        }
                    });
                    offset += block;
                }
            }
            Op::Gather { x, indices } => acc(*x, &mut |s| indices.iter().zip(g).for_each(|(&i, g)| s[i] += g)),
            Op::ScaleToPower { x, power } => {
                let vx = val(*x);
                let batch = node.value.shape()[0];
                let block = vx.len() / batch.max(1);
                acc(*x, &mut |s| {
                    for b in 0..batch {
                        let r = b * block..(b + 1) * block;
                        let xb = &vx[r.clone()];
                        let gb = &g[r.clone()];
                        let norm_sq: f64 = xb.iter().map(|v| v * v).sum();
                        let f = (power / norm_sq).sqrt();
                        let dot: f64 = xb.iter().zip(gb).map(|(x, g)| x * g).sum();
                        for (j, sj) in s[r].iter_mut().enumerate() {
                            *sj += f * (gb[j] - xb[j] * dot / norm_sq);
                        }
                    }
                });
            }
            Op::WeightedGram { h, w, mu } => {
                let (batch, n, k) = complex_matrix_dims(h.shape())?;
                let (ch, cg) = (unpack(h.data()), unpack(g));
                let mut gw = vec![0.0; batch * k];
                let mut gmu = vec![0.0; batch];
                for b in 0..batch {
                    let hb = &ch[b * n * k..(b + 1) * n * k];
                    let gm = &cg[b * n * n..(b + 1) * n * n];
                    // d/dw_j = Re(h_j^H G h_j), d/dmu = Re tr G
                    for j in 0..k {
                        let mut acc_j = Complex64::new(0.0, 0.0);
                        for r in 0..n {
                            let mut row = Complex64::new(0.0, 0.0);
                            for c in 0..n {
                                row += gm[r * n + c] * hb[c * k + j];
                            }
                            acc_j += hb[r * k + j].conj() * row;
                        }
                        gw[b * k + j] = acc_j.re;
                    }
                    gmu[b] = (0..n).map(|r| gm[r * n + r].re).sum();
                }
                acc(*w, &mut |s| s.iter_mut().zip(&gw).for_each(|(s, g)| *s += g));
                acc(*mu, &mut |s| s.iter_mut().zip(&gmu).for_each(|(s, g)| *s += g));
            }
        }
        Ok(())
    }
}

/// Reverse-mode gradient of the scalar `loss` with respect to each of
/// `params`.  Parameters the loss does not depend on get zeros.
pub fn gradient(tape: &Tape, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
    if loss.0 >= tape.nodes.len() {
        return Err(Error::invalid("loss is not on this tape"));
    }
    if tape.value(loss).len() != 1 {
        return Err(Error::invalid(format!(
            "loss must be scalar, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
    grads[loss.0] = Some(vec![1.0]);
    for idx in (0..=loss.0).rev() {
        if !tape.nodes[idx].tracked || matches!(tape.nodes[idx].op, Op::Leaf) {
            continue;
        }
        let Some(g) = grads[idx].take() else { continue };
        tape.backward_node(idx, &g, &mut grads)?;
        grads[idx] = Some(g);
    }
    params
        .iter()
        .map(|p| {
            let shape = tape.value(*p).shape().to_vec();
            match grads.get(p.0).and_then(|g| g.clone()) {
                Some(g) => Tensor::new(shape, g),
                None => Ok(Tensor::zeros(shape)),
            }
        })
        .collect()
}
