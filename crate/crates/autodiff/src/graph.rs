//! Define-by-run computation graph.
//!
//! Every operation appends one node; node ids increase in creation order, so
//! the creation order is a topological order and `backward` simply walks the
//! node list in reverse.

use std::borrow::Cow;

use crate::error::{AutodiffError, Result};
use crate::kernels;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;
/// Variance stabilizer inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    Log(Var),
    Exp(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Minimum(Var, Var),
    LogSigmoid(Var),
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    requires_grad: bool,
}

/// A tape of tensor operations. Parameters are borrowed from a
/// [`ParamStore`] for the lifetime of the graph, never copied.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Result of [`Graph::backward`]: one gradient buffer per graph node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zeros when `var` does not
    /// influence the root.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn acc<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node<'_>],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, op: Op, value: Tensor, name: &'static str, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf tensor. Its `requires_grad` flag decides whether
    /// gradients are tracked for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            op: Op::Leaf { param: None },
            value: Cow::Owned(t),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (never differentiated) leaf.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Records a trainable parameter borrowed from `store`.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf { param: Some(id) },
            value: Cow::Borrowed(store.get(id)),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter as a non-trainable constant.
    pub fn frozen_param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf { param: None },
            value: Cow::Borrowed(store.get(id)),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, vars: &[Var]) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            shapes: vars.iter().map(|v| self.shape(*v).to_vec()).collect(),
        }
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let name = if trans_b { "matmul_bt" } else { "matmul" };
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.mismatch(name, &[a, b]));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(self.mismatch(name, &[a, b]));
        }
        let mut out = vec![0.0; m * n];
        let bs = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            bs,
            &mut out,
            0.0,
        );
        self.push(
            Op::MatMul { a, b, trans_b },
            Tensor::matrix(m, n, out),
            name,
            &[a, b],
        )
    }

    /// `a · b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for 2-D operands, without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, &[a, b]));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Elementwise sum. `b` may also be a vector matching the last axis of
    /// `a`, in which case it is added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let t = self.zip_same(a, b, "add", |x, y| x + y)?;
            return self.push(Op::Add(a, b), t, "add", &[a, b]);
        }
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 1 || tb.numel() != ta.cols() {
            return Err(self.mismatch("add", &[a, b]));
        }
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::AddRow(a, b), t, "add", &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), t, "sub", &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), t, "mul", &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect())?;
        self.push(Op::Scale(x, c), t, "scale", &[x])
    }

    /// Softmax over the last axis; each row is shifted by its maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols) {
            kernels::softmax_in_place(row);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(Op::Softmax(x), t, "softmax", &[x])
    }

    /// Natural log with inputs clamped at [`LOG_CLAMP`].
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.max(LOG_CLAMP).ln()).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(Op::Log(x), t, "log", &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.exp()).collect())?;
        self.push(Op::Exp(x), t, "exp", &[x])
    }

    /// Rows of a 2-D `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 || ids.is_empty() {
            return Err(self.mismatch("embedding_gather", &[table]));
        }
        let (rows, cols) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "embedding_gather",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let t = Tensor::matrix(ids.len(), cols, data);
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            t,
            "embedding_gather",
            &[table],
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(self.mismatch("layer_norm", &[x, gain, bias]));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            t,
            "layer_norm",
            &[x, gain, bias],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(Op::Gelu(x), t, "gelu", &[x])
    }

    /// Per-row negative log-likelihood of `targets` under softmax(`logits`).
    /// Returns a vector with one entry per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape().len() != 2 || tl.rows() != targets.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                shapes: vec![tl.shape().to_vec(), vec![targets.len()]],
            });
        }
        let v = tl.cols();
        let mut probs = tl.data().to_vec();
        let mut out = Vec::with_capacity(targets.len());
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let row = &mut probs[r * v..(r + 1) * v];
            let lse = kernels::log_sum_exp(row);
            out.push(lse - row[t]);
            for p in row.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        let t = Tensor::vector(out);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            t,
            "cross_entropy",
            &[logits],
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), "sum", &[x])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s), "mean", &[x])
    }

    /// Sum over the last axis; a `[r, c]` input yields `[r]`.
    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        let data: Vec<f64> = tx.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let shape = if tx.shape().len() == 1 {
            vec![1]
        } else {
            tx.shape()[..tx.shape().len() - 1].to_vec()
        };
        let t = Tensor::new(shape, data)?;
        self.push(Op::SumLastAxis(x), t, "sum_last_axis", &[x])
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                shapes: vec![shape, vec![axis, start, end]],
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let width = (end - start) * inner;
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * len * inner + start * inner;
            data.extend_from_slice(&src[base..base + width]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let t = Tensor::new(out_shape, data)?;
        self.push(Op::Slice { x, axis, start }, t, "slice", &[x])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| {
            AutodiffError::InvalidArgument("concat of zero tensors".into())
        })?)
        .to_vec();
        if axis >= first.len() {
            return Err(self.mismatch("concat", xs));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(self.mismatch("concat", xs));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let w = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        self.push(
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            t,
            "concat",
            xs,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(self.mismatch("transpose", &[x]));
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = tx.data()[i * c + j];
            }
        }
        self.push(Op::Transpose(x), Tensor::matrix(c, r, data), "transpose", &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(shape.to_vec(), tx.data().to_vec()).map_err(|_| {
            AutodiffError::ShapeMismatch {
                op: "reshape",
                shapes: vec![tx.shape().to_vec(), shape.to_vec()],
            }
        })?;
        self.push(Op::Reshape(x), t, "reshape", &[x])
    }

    /// Elementwise clamp into `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(Op::Clamp { x, lo, hi }, t, "clamp", &[x])
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "minimum", f64::min)?;
        self.push(Op::Minimum(a, b), t, "minimum", &[a, b])
    }

    /// `log σ(x)`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| kernels::log_sigmoid(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(Op::LogSigmoid(x), t, "log_sigmoid", &[x])
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = out.shape()[1];
                if let Some(ga) = acc(grads, nodes, *a) {
                    // dA = dC · Bᵀ  (B is k×n, or n×k when stored transposed)
                    let bs = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    kernels::gemm(m, n, k, g, (n as isize, 1), tb.data(), bs, ga, 1.0);
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    if *trans_b {
                        // dBᵀ = dCᵀ · A, shape n×k
                        kernels::gemm(
                            n,
                            m,
                            k,
                            g,
                            (1, n as isize),
                            ta.data(),
                            (k as isize, 1),
                            gb,
                            1.0,
                        );
                    } else {
                        // dB = Aᵀ · dC, shape k×n
                        kernels::gemm(
                            k,
                            m,
                            n,
                            ta.data(),
                            (1, k as isize),
                            g,
                            (n as isize, 1),
                            gb,
                            1.0,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = acc(grads, nodes, *v) {
                        kernels::axpy(1.0, g, gv);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = acc(grads, nodes, *a) {
                    kernels::axpy(1.0, g, ga);
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    let cols = gb.len();
                    for row in g.chunks(cols) {
                        kernels::axpy(1.0, row, gb);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc(grads, nodes, *a) {
                    kernels::axpy(1.0, g, ga);
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    kernels::axpy(-1.0, g, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = acc(grads, nodes, *a) {
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(tb) {
                        *d += gi * bi;
                    }
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(ta) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    kernels::axpy(*c, g, gx);
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    let cols = out.cols();
                    for ((gr, yr), dr) in g
                        .chunks(cols)
                        .zip(out.data().chunks(cols))
                        .zip(gx.chunks_mut(cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Log(x) => {
                let tx = nodes[x.0].value.data();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(tx) {
                        if *xi > LOG_CLAMP {
                            *d += gi / xi;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    for ((d, gi), yi) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * yi;
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = acc(grads, nodes, *table) {
                    let cols = out.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(
                            1.0,
                            &g[r * cols..(r + 1) * cols],
                            &mut gt[id * cols..(id + 1) * cols],
                        );
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gw = nodes[gain.0].value.data();
                if let Some(gg) = acc(grads, nodes, *gain) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, gi), hi) in gg.iter_mut().zip(gr).zip(hr) {
                            *d += gi * hi;
                        }
                    }
                }
                if let Some(gb) = acc(grads, nodes, *bias) {
                    for gr in g.chunks(n) {
                        kernels::axpy(1.0, gr, gb);
                    }
                }
                if let Some(gx) = acc(grads, nodes, *x) {
                    let nf = n as f64;
                    let mut dh = vec![0.0; n];
                    for (r, ((gr, hr), dr)) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        for j in 0..n {
                            dh[j] = gr[j] * gw[j];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let c = inv_std[r] / nf;
                        for j in 0..n {
                            dr[j] += c * (nf * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let tx = nodes[x.0].value.data();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(tx) {
                        *d += gi * kernels::gelu_grad(*xi);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(gl) = acc(grads, nodes, *logits) {
                    let v = probs.len() / targets.len();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut gl[r * v..(r + 1) * v];
                        kernels::axpy(g[r], &probs[r * v..(r + 1) * v], row);
                        row[t] -= g[r];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    let c = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += c);
                }
            }
            Op::SumLastAxis(x) => {
                let cols = nodes[x.0].value.cols();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (dr, gi) in gx.chunks_mut(cols).zip(g) {
                        dr.iter_mut().for_each(|d| *d += gi);
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = nodes[x.0].value.shape();
                let (outer, len, inner) = split_axis(in_shape, *axis);
                let width = out.shape()[*axis] * inner;
                if let Some(gx) = acc(grads, nodes, *x) {
                    for o in 0..outer {
                        let base = o * len * inner + start * inner;
                        kernels::axpy(
                            1.0,
                            &g[o * width..(o + 1) * width],
                            &mut gx[base..base + width],
                        );
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for v in xs {
                    let w = nodes[v.0].value.shape()[*axis] * inner;
                    if let Some(gv) = acc(grads, nodes, *v) {
                        for o in 0..outer {
                            let base = o * total * inner + offset;
                            kernels::axpy(1.0, &g[base..base + w], &mut gv[o * w..(o + 1) * w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Transpose(x) => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    let (r, c) = (out.shape()[0], out.shape()[1]);
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    kernels::axpy(1.0, g, gx);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let tx = nodes[x.0].value.data();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(tx) {
                        if *xi >= *lo && *xi <= *hi {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = acc(grads, nodes, *a) {
                    for (j, d) in ga.iter_mut().enumerate() {
                        if ta[j] <= tb[j] {
                            *d += g[j];
                        }
                    }
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    for (j, d) in gb.iter_mut().enumerate() {
                        if ta[j] > tb[j] {
                            *d += g[j];
                        }
                    }
                }
            }
            Op::LogSigmoid(x) => {
                let tx = nodes[x.0].value.data();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(tx) {
                        *d += gi * kernels::sigmoid(-xi);
                    }
                }
            }
        }
    }

    /// Adds `scale ·` the gradient of every parameter leaf into `out`.
    /// A parameter used by several leaves accumulates all of them.
    pub fn accumulate_param_grads(&self, grads: &Gradients, scale: f64, out: &mut ParamGrads) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = &grads.grads[i] {
                    kernels::axpy(scale, g, out.get_mut(id).data_mut());
                }
            }
        }
    }
}
