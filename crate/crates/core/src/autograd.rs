//! A small shape-checked tensor and an arena tape for reverse-mode
//! differentiation.
//!
//! Operations are recorded on a [`Tape`] in creation order, which is already
//! a topological order, so [`Tape::backward`] is a single reverse sweep.
//! Shapes are validated when an op is recorded; every forward result is
//! checked for NaN/Inf. Tapes compute in f64; the same graph can be built on
//! a `Tape<DoubleDouble>` for forward-only reference evaluations.

use std::any::Any;
use std::collections::HashMap;

use thiserror::Error;

use crate::params::{ParamId, ParamStore};
use crate::real::{DoubleDouble, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("masked_softmax: row {row} has every column masked")]
    FullyMaskedRow { row: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: {detail}")]
    Argument { op: &'static str, detail: String },
}

type Result<T> = std::result::Result<T, TensorError>;

/// Row-major array tagged with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }
}

impl<T: Real> Tensor<T> {
    /// Converts an f64 tensor; free when `T` is f64.
    fn lift(t: Tensor) -> Self {
        match (Box::new(t) as Box<dyn Any>).downcast::<Self>() {
            Ok(same) => *same,
            Err(other) => {
                let t = other.downcast::<Tensor>().expect("f64 tensor");
                Self {
                    shape: t.shape,
                    data: t.data.into_iter().map(T::from_f64).collect(),
                }
            }
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(TensorError::Shape {
                op,
                detail: format!("expected a matrix, got {other:?}"),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MaskedSoftmax(Var),
    GroupNorm {
        x: Var,
        groups: Vec<usize>,
        inv_std: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SegmentSum(Var, usize),
    GatherRows(Var, Vec<usize>),
    MaxRows(Var, Vec<usize>),
    MeanRows(Var),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
    Chamfer {
        x: Var,
        y: Var,
        nn_x: Vec<usize>,
        nn_y: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Debug)]
pub struct Tape<T = f64> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T> Default for Tape<T> {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

/// out[m,n] += a[m,k] * b[k,n]; zero entries of `a` are skipped.
fn gemm_acc<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
fn gemm_nt_acc<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
fn gemm_tn_acc<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::ZERO {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Real> Tape<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, node_op: Op<T>, needs_grad: bool) -> Result<Var> {
        check_finite(op, &value.data)?;
        self.nodes.push(Node {
            value,
            op: node_op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2(op)
    }

    /// A value that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", Tensor::lift(t), Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push("leaf", Tensor::lift(t), Op::Leaf, true)
    }

    /// The current value of a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", Tensor::lift(store.get(id).value.clone()), Op::Param, true)?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::ZERO; m * n];
        gemm_acc(&mut out, &self.nodes[a.0].value.data, &self.nodes[b.0].value.data, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), ng)
    }

    /// `a @ b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![T::ZERO; m * n];
        gemm_nt_acc(&mut out, &self.nodes[a.0].value.data, &self.nodes[b.0].value.data, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul_nt", Tensor { shape: vec![m, n], data: out }, Op::MatMulNT(a, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor { shape: va.shape.clone(), data };
        let ng = self.ng(a) || self.ng(b);
        self.push(op, t, node, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-n vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_row", x)?;
        if self.nodes[row.0].value.numel() != n {
            return Err(shape_err(
                "add_row",
                format!("[{m},{n}] + {:?}", self.shape(row)),
            ));
        }
        let vx = &self.nodes[x.0].value.data;
        let vr = &self.nodes[row.0].value.data;
        let mut out = vx.clone();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(vr) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        self.push("add_row", Tensor { shape: vec![m, n], data: out }, Op::AddRow(x, row), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let st = T::from_f64(s);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a * st).collect(),
        };
        let ng = self.ng(x);
        self.push("scale", t, Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| if a > T::ZERO { a } else { T::ZERO }).collect(),
        };
        let ng = self.ng(x);
        self.push("relu", t, Op::Relu(x), ng)
    }

    /// Row-wise softmax over unmasked columns; `mask[r * cols + c] == true`
    /// hides column `c` from row `r`, which then gets weight exactly 0.
    pub fn masked_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims2("masked_softmax", scores)?;
        if mask.len() != m * n {
            return Err(shape_err(
                "masked_softmax",
                format!("mask has {} entries for [{m},{n}]", mask.len()),
            ));
        }
        let s = &self.nodes[scores.0].value.data;
        let mut out = vec![T::ZERO; m * n];
        for r in 0..m {
            let row = &s[r * n..(r + 1) * n];
            let mrow = &mask[r * n..(r + 1) * n];
            let mut max: Option<T> = None;
            for (&v, &hidden) in row.iter().zip(mrow) {
                if !hidden && max.is_none_or(|m| v > m) {
                    max = Some(v);
                }
            }
            let Some(max) = max else {
                return Err(TensorError::FullyMaskedRow { row: r });
            };
            let orow = &mut out[r * n..(r + 1) * n];
            let mut sum = T::ZERO;
            for ((o, &v), &hidden) in orow.iter_mut().zip(row).zip(mrow) {
                if !hidden {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let ng = self.ng(scores);
        self.push(
            "masked_softmax",
            Tensor { shape: vec![m, n], data: out },
            Op::MaskedSoftmax(scores),
            ng,
        )
    }

    /// Per-column standardization within contiguous row groups of the given
    /// sizes: `(x - mean) / sqrt(var + eps)`.
    pub fn group_norm(&mut self, x: Var, groups: &[usize], eps: f64) -> Result<Var> {
        let (m, n) = self.dims2("group_norm", x)?;
        if groups.iter().sum::<usize>() != m || groups.contains(&0) {
            return Err(shape_err(
                "group_norm",
                format!("groups {groups:?} do not partition {m} rows"),
            ));
        }
        let v = &self.nodes[x.0].value.data;
        let mut out = vec![T::ZERO; m * n];
        let mut inv_std = Vec::with_capacity(groups.len() * n);
        let eps = T::from_f64(eps);
        let mut start = 0;
        for &g in groups {
            let count = T::from_f64(g as f64);
            for j in 0..n {
                let mut mean = T::ZERO;
                for i in start..start + g {
                    mean += v[i * n + j];
                }
                mean /= count;
                let mut var = T::ZERO;
                for i in start..start + g {
                    let d = v[i * n + j] - mean;
                    var += d * d;
                }
                var /= count;
                let inv = T::ONE / (var + eps).sqrt();
                for i in start..start + g {
                    out[i * n + j] = (v[i * n + j] - mean) * inv;
                }
                inv_std.push(inv);
            }
            start += g;
        }
        let ng = self.ng(x);
        self.push(
            "group_norm",
            Tensor { shape: vec![m, n], data: out },
            Op::GroupNorm {
                x,
                groups: groups.to_vec(),
                inv_std,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut widths = Vec::with_capacity(parts.len());
        let mut rows = None;
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if *rows.get_or_insert(r) != r {
                return Err(shape_err("concat_cols", format!("row counts differ: {r} vs {rows:?}")));
            }
            widths.push(c);
        }
        let m = rows.ok_or_else(|| shape_err("concat_cols", "nothing to concatenate".into()))?;
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            "concat_cols",
            Tensor { shape: vec![m, n], data: out },
            Op::ConcatCols(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut cols = None;
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if *cols.get_or_insert(c) != c {
                return Err(shape_err("concat_rows", format!("column counts differ: {c} vs {cols:?}")));
            }
            m += r;
        }
        let n = cols.ok_or_else(|| shape_err("concat_rows", "nothing to concatenate".into()))?;
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            "concat_rows",
            Tensor { shape: vec![m, n], data: out },
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    /// Sums consecutive groups of `k` rows: `[m*k, n] -> [m, n]`. Each group
    /// column is summed in sorted order, so row order within a group is irrelevant.
    pub fn segment_sum(&mut self, x: Var, k: usize) -> Result<Var> {
        let (rows, n) = self.dims2("segment_sum", x)?;
        if k == 0 || rows % k != 0 {
            return Err(shape_err("segment_sum", format!("{rows} rows not divisible into groups of {k}")));
        }
        let m = rows / k;
        let v = &self.nodes[x.0].value.data;
        let mut out = vec![T::ZERO; m * n];
        let mut column = Vec::with_capacity(k);
        for g in 0..m {
            for j in 0..n {
                column.clear();
                column.extend((g * k..(g + 1) * k).map(|r| v[r * n + j]));
                out[g * n + j] = sorted_sum(&mut column);
            }
        }
        let ng = self.ng(x);
        self.push(
            "segment_sum",
            Tensor { shape: vec![m, n], data: out },
            Op::SegmentSum(x, k),
            ng,
        )
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(shape_err("gather_rows", format!("row {bad} of {m}")));
        }
        let v = &self.nodes[x.0].value.data;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&v[i * n..(i + 1) * n]);
        }
        let ng = self.ng(x);
        self.push(
            "gather_rows",
            Tensor { shape: vec![idx.len(), n], data: out },
            Op::GatherRows(x, idx.to_vec()),
            ng,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    /// Column-wise max over rows: `[m, n] -> [1, n]`.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("max_rows", x)?;
        if m == 0 {
            return Err(shape_err("max_rows", "no rows".into()));
        }
        let v = &self.nodes[x.0].value.data;
        let mut arg = vec![0usize; n];
        let mut out = v[..n].to_vec();
        for i in 1..m {
            for j in 0..n {
                if v[i * n + j] > out[j] {
                    out[j] = v[i * n + j];
                    arg[j] = i;
                }
            }
        }
        let ng = self.ng(x);
        self.push("max_rows", Tensor { shape: vec![1, n], data: out }, Op::MaxRows(x, arg), ng)
    }

    /// Column-wise mean over rows: `[m, n] -> [1, n]`. Each column is summed
    /// in sorted order, so the result is bit-identical under row permutation.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("mean_rows", x)?;
        if m == 0 {
            return Err(shape_err("mean_rows", "no rows".into()));
        }
        let v = &self.nodes[x.0].value.data;
        let mut column = Vec::with_capacity(m);
        let out = (0..n)
            .map(|j| {
                column.clear();
                column.extend((0..m).map(|i| v[i * n + j]));
                sorted_sum(&mut column) / T::from_f64(m as f64)
            })
            .collect();
        let ng = self.ng(x);
        self.push("mean_rows", Tensor { shape: vec![1, n], data: out }, Op::MeanRows(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != v.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", v.shape)));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        let ng = self.ng(x);
        self.push("reshape", t, Op::Reshape(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data.iter().fold(T::ZERO, |a, &b| a + b);
        let ng = self.ng(x);
        self.push("sum", Tensor { shape: vec![], data: vec![s] }, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.numel();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax cross-entropy of a single logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let v = &self.nodes[logits.0].value.data;
        if target >= v.len() {
            return Err(TensorError::Argument {
                op: "cross_entropy",
                detail: format!("target {target} with {} classes", v.len()),
            });
        }
        let max = v[1..].iter().fold(v[0], |m, &a| if a > m { a } else { m });
        let exps: Vec<T> = v.iter().map(|&a| (a - max).exp()).collect();
        let z = exps.iter().fold(T::ZERO, |a, &b| a + b);
        let probs: Vec<T> = exps.iter().map(|&e| e / z).collect();
        let loss = -(v[target] - max - z.ln());
        let ng = self.ng(logits);
        self.push(
            "cross_entropy",
            Tensor {
                shape: vec![],
                data: vec![loss],
            },
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            ng,
        )
    }

    /// Symmetric chamfer distance with unsquared norms:
    /// `mean_x min_y |x - y| + mean_y min_x |y - x|`. Nearest-neighbor ties
    /// resolve to the lowest index.
    pub fn chamfer(&mut self, x: Var, y: Var) -> Result<Var> {
        let (n, dx) = self.dims2("chamfer", x)?;
        let (m, dy) = self.dims2("chamfer", y)?;
        if dx != 3 || dy != 3 {
            return Err(shape_err("chamfer", format!("points must be [_, 3], got [{n},{dx}] and [{m},{dy}]")));
        }
        if n == 0 || m == 0 {
            return Err(TensorError::Argument {
                op: "chamfer",
                detail: "point sets must be nonempty".into(),
            });
        }
        let xs = &self.nodes[x.0].value.data;
        let ys = &self.nodes[y.0].value.data;
        let (nn_x, sum_x) = nearest(xs, ys);
        let (nn_y, sum_y) = nearest(ys, xs);
        let value = sum_x / T::from_f64(n as f64) + sum_y / T::from_f64(m as f64);
        let ng = self.ng(x) || self.ng(y);
        self.push(
            "chamfer",
            Tensor {
                shape: vec![],
                data: vec![value],
            },
            Op::Chamfer { x, y, nn_x, nn_y },
            ng,
        )
    }

}

impl Tape {
    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward from `loss` and add parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let g = self.backward(loss)?;
        g.accumulate_params(self, store);
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k) = (va.shape[0], va.shape[1]);
                let n = vb.shape[1];
                acc(*a, &mut |ga| gemm_nt_acc(ga, g, &vb.data, m, n, k));
                acc(*b, &mut |gb| gemm_tn_acc(gb, &va.data, g, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                // y = a b^T: da = g b, db = g^T a
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k) = (va.shape[0], va.shape[1]);
                let n = vb.shape[0];
                acc(*a, &mut |ga| gemm_acc(ga, g, &vb.data, m, n, k));
                acc(*b, &mut |gb| gemm_tn_acc(gb, g, &va.data, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, d)| *o += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, d)| *o += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, d)| *o += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let va = &self.nodes[a.0].value.data;
                let vb = &self.nodes[b.0].value.data;
                acc(*a, &mut |ga| {
                    for ((o, d), y) in ga.iter_mut().zip(g).zip(vb) {
                        *o += d * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, d), x) in gb.iter_mut().zip(g).zip(va) {
                        *o += d * x;
                    }
                });
            }
            Op::AddRow(x, row) => {
                let n = self.nodes[row.0].value.numel();
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, d)| *o += d));
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(o, d)| *o += d);
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, d)| *o += d * s));
            }
            Op::Relu(x) => {
                let vx = &self.nodes[x.0].value.data;
                acc(*x, &mut |gx| {
                    for ((o, d), a) in gx.iter_mut().zip(g).zip(vx) {
                        if *a > 0.0 {
                            *o += d;
                        }
                    }
                });
            }
            Op::MaskedSoftmax(s) => {
                let y = &node.value.data;
                let n = node.value.shape[1];
                acc(*s, &mut |gs| {
                    for ((grow, yrow), orow) in g.chunks(n).zip(y.chunks(n)).zip(gs.chunks_mut(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, d), yy) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yy * (d - dot);
                        }
                    }
                });
            }
            Op::GroupNorm { x, groups, inv_std } => {
                let y = &node.value.data;
                let n = node.value.shape[1];
                acc(*x, &mut |gx| {
                    let mut start = 0;
                    for (gi, &cnt) in groups.iter().enumerate() {
                        for j in 0..n {
                            let inv = inv_std[gi * n + j];
                            let mut mg = 0.0;
                            let mut mgy = 0.0;
                            for r in start..start + cnt {
                                mg += g[r * n + j];
                                mgy += g[r * n + j] * y[r * n + j];
                            }
                            mg /= cnt as f64;
                            mgy /= cnt as f64;
                            for r in start..start + cnt {
                                gx[r * n + j] += inv * (g[r * n + j] - mg - y[r * n + j] * mgy);
                            }
                        }
                        start += cnt;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape[1];
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape[1];
                    acc(*p, &mut |gp| {
                        for (r, orow) in gp.chunks_mut(w).enumerate() {
                            let src = &g[r * total + off..r * total + off + w];
                            orow.iter_mut().zip(src).for_each(|(o, d)| *o += d);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    acc(*p, &mut |gp| {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(o, d)| *o += d);
                    });
                    off += len;
                }
            }
            Op::SegmentSum(x, k) => {
                let n = node.value.shape[1];
                acc(*x, &mut |gx| {
                    for (r, orow) in gx.chunks_mut(n).enumerate() {
                        let src = &g[(r / k) * n..(r / k + 1) * n];
                        orow.iter_mut().zip(src).for_each(|(o, d)| *o += d);
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let n = node.value.shape[1];
                acc(*x, &mut |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        let from = &g[r * n..(r + 1) * n];
                        gx[src * n..(src + 1) * n]
                            .iter_mut()
                            .zip(from)
                            .for_each(|(o, d)| *o += d);
                    }
                });
            }
            Op::MaxRows(x, arg) => {
                let n = arg.len();
                acc(*x, &mut |gx| {
                    for (j, &r) in arg.iter().enumerate() {
                        gx[r * n + j] += g[j];
                    }
                });
            }
            Op::MeanRows(x) => {
                let m = self.nodes[x.0].value.shape[0] as f64;
                let n = node.value.shape[1];
                acc(*x, &mut |gx| {
                    for orow in gx.chunks_mut(n) {
                        orow.iter_mut().zip(g).for_each(|(o, d)| *o += d / m);
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, d)| *o += d));
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                acc(*logits, &mut |gl| {
                    for (j, (o, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *o += g[0] * (p - onehot);
                    }
                });
            }
            Op::Chamfer { x, y, nn_x, nn_y } => {
                let xs = &self.nodes[x.0].value.data;
                let ys = &self.nodes[y.0].value.data;
                let wx = g[0] / nn_x.len() as f64;
                let wy = g[0] / nn_y.len() as f64;
                // d|a - b| / da = (a - b) / |a - b|, zero at coincidence
                let unit = |a: &[f64], b: &[f64]| {
                    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    if len > 0.0 {
                        [d[0] / len, d[1] / len, d[2] / len]
                    } else {
                        [0.0; 3]
                    }
                };
                acc(*x, &mut |gx| {
                    for (i, &j) in nn_x.iter().enumerate() {
                        let u = unit(&xs[i * 3..i * 3 + 3], &ys[j * 3..j * 3 + 3]);
                        for c in 0..3 {
                            gx[i * 3 + c] += wx * u[c];
                        }
                    }
                    for (j, &i) in nn_y.iter().enumerate() {
                        let u = unit(&ys[j * 3..j * 3 + 3], &xs[i * 3..i * 3 + 3]);
                        for c in 0..3 {
                            gx[i * 3 + c] -= wy * u[c];
                        }
                    }
                });
                acc(*y, &mut |gy| {
                    for (j, &i) in nn_y.iter().enumerate() {
                        let u = unit(&ys[j * 3..j * 3 + 3], &xs[i * 3..i * 3 + 3]);
                        for c in 0..3 {
                            gy[j * 3 + c] += wy * u[c];
                        }
                    }
                    for (i, &j) in nn_x.iter().enumerate() {
                        let u = unit(&xs[i * 3..i * 3 + 3], &ys[j * 3..j * 3 + 3]);
                        for c in 0..3 {
                            gy[j * 3 + c] -= wx * u[c];
                        }
                    }
                });
            }
        }
    }
}

/// For each point of `a`, the index of its nearest point in `b` (lowest index
/// on ties) and the sum of those nearest distances.
fn nearest<T: Real>(a: &[T], b: &[T]) -> (Vec<usize>, T) {
    let mut idx = Vec::with_capacity(a.len() / 3);
    let mut total = T::ZERO;
    for p in a.chunks_exact(3) {
        let mut best: Option<T> = None;
        let mut arg = 0;
        for (j, q) in b.chunks_exact(3).enumerate() {
            let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            if best.is_none_or(|b| d2 < b) {
                best = Some(d2);
                arg = j;
            }
        }
        idx.push(arg);
        total += best.expect("nonempty").sqrt();
    }
    (idx, total)
}

/// Sum in ascending order, so the result does not depend on input order.
fn sorted_sum<T: Real>(values: &mut [T]) -> T {
    values.sort_unstable_by(T::total_cmp);
    values.iter().fold(T::ZERO, |a, &b| a + b)
}

/// Per-node gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn accumulate_params(&self, tape: &Tape, store: &mut ParamStore) {
        for (&id, &v) in &tape.params {
            if let Some(g) = self.get(v) {
                store
                    .get_mut(id)
                    .grad
                    .iter_mut()
                    .zip(g)
                    .for_each(|(o, d)| *o += d);
            }
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest relative discrepancy between the tape gradient of `f` at `x` and a
/// central difference with step `eps`, per coordinate. The denominator is
/// `max(|a|, |b|, 1e-8)`.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone())?;
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t)?;
        let l = f(&mut tape, v)?;
        Ok(tape.value(l).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data[i] += eps;
        let mut minus = x.clone();
        minus.data[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// A scalar loss that can be recorded on a tape of any precision.
pub trait Objective {
    fn loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore) -> Result<Var>;
}

/// Gradient-check outcome for one named parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// Worst per-coordinate error with denominator `max(|a|, |b|, 1e-8)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Worst absolute error over `max(|a|_inf, |b|_inf, 1e-8)` for the whole
    /// tensor.
    pub tensor_rel_err: f64,
    /// Largest gradient magnitude seen, analytic or numeric.
    pub grad_scale: f64,
    pub count: usize,
    /// False when the objective never reads the parameter; its gradient is
    /// then identically zero and no differences are taken.
    pub on_tape: bool,
}

/// Central-difference check of every parameter coordinate of `store` against
/// the f64 tape gradient of `objective`.
///
/// The differences are evaluated in double-double arithmetic, so their
/// rounding error (about `1e-32 * |loss| / eps`) is negligible next to the
/// truncation error; at `eps = 1e-6` an f64 evaluation would bottom out near
/// `1e-10` absolute. The step is the exact difference of the two perturbed
/// f64 parameter values.
pub fn check_param_gradients<O: Objective>(store: &mut ParamStore, eps: f64, objective: &O) -> Result<Vec<ParamCheck>> {
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = objective.loss(&mut tape, store)?;
    tape.backward_into(loss, store)?;
    let ids: Vec<ParamId> = store.ids().collect();
    let eval = |store: &ParamStore| -> Result<DoubleDouble> {
        let mut t = Tape::<DoubleDouble>::default();
        let l = objective.loss(&mut t, store)?;
        Ok(t.value(l).item())
    };
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = store.get(id).grad.clone();
        let on_tape = tape.params.contains_key(&id);
        let mut rel: f64 = 0.0;
        let mut abs: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..analytic.len() {
            let numeric = if on_tape {
                let orig = store.get(id).value.data[i];
                let (up, down) = (orig + eps, orig - eps);
                store.get_mut(id).value.data[i] = up;
                let fp = eval(store);
                store.get_mut(id).value.data[i] = down;
                let fm = eval(store);
                store.get_mut(id).value.data[i] = orig;
                let step = DoubleDouble::from_f64(up) - DoubleDouble::from_f64(down);
                ((fp? - fm?) / step).to_f64()
            } else {
                0.0
            };
            rel = rel.max(rel_err(analytic[i], numeric));
            abs = abs.max((analytic[i] - numeric).abs());
            scale = scale.max(analytic[i].abs()).max(numeric.abs());
        }
        out.push(ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_err: rel,
            max_abs_err: abs,
            tensor_rel_err: abs / scale.max(1e-8),
            grad_scale: scale,
            count: analytic.len(),
            on_tape,
        });
    }
    store.zero_grad();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(f).collect()).unwrap()
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let mut t = Tape::new();
        let s = t.constant(mat(1, 4, |_| 0.3)).unwrap();
        let y = t.masked_softmax(s, &[false; 4]).unwrap();
        assert_eq!(t.value(y).data(), &[0.25; 4]);
        let y = t.masked_softmax(s, &[false, false, true, true]).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5, 0.0, 0.0]);
        assert_eq!(
            t.masked_softmax(s, &[true; 4]).unwrap_err(),
            TensorError::FullyMaskedRow { row: 0 }
        );
        assert!(t.masked_softmax(s, &[false; 3]).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
        assert_eq!(g.get(l).unwrap(), &[1.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(mat(2, 2, |i| i as f64)).unwrap();
        assert!(matches!(t.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn shape_errors_at_call_time() {
        let mut t = Tape::new();
        let a = t.leaf(mat(2, 3, |i| i as f64)).unwrap();
        let b = t.leaf(mat(2, 3, |i| i as f64)).unwrap();
        assert!(matches!(t.matmul(a, b), Err(TensorError::Shape { .. })));
        let c = t.leaf(mat(3, 2, |i| i as f64)).unwrap();
        assert!(t.add(a, c).is_err());
        assert!(t.segment_sum(a, 4).is_err());
        assert!(t.group_norm(a, &[1], 1e-5).is_err());
        assert!(t.concat_cols(&[a, c]).is_err());
    }

    #[test]
    fn non_finite_trips_error() {
        let mut t = Tape::new();
        let a = t.leaf(mat(1, 2, |_| 1e300)).unwrap();
        assert_eq!(t.mul(a, a).unwrap_err(), TensorError::NonFinite { op: "mul" });
    }

    #[test]
    fn chamfer_simple_values() {
        let mut t = Tape::new();
        let x = t.constant(mat(1, 3, |_| 0.0)).unwrap();
        let y = t.constant(Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
        let c = t.chamfer(x, y).unwrap();
        assert_eq!(t.value(c).item(), 2.0);
        let c = t.chamfer(y, y).unwrap();
        assert_eq!(t.value(c).item(), 0.0);
        let e = t.constant(Tensor::zeros(&[0, 3])).unwrap();
        assert!(t.chamfer(x, e).is_err());
    }

    #[test]
    fn ops_pass_gradient_check() {
        let x = mat(4, 3, |i| ((i * 7 % 5) as f64 - 2.0) * 0.37 + 0.05);
        let w = mat(3, 2, |i| (i as f64 - 2.5) * 0.21);
        let err = gradient_check(
            |t, x| {
                let w = t.constant(w.clone())?;
                let b = t.constant(Tensor::new(vec![2], vec![0.1, -0.2])?)?;
                let h = t.matmul(x, w)?;
                let h = t.add_row(h, b)?;
                let h2 = t.matmul_nt(h, h)?;
                let n = t.group_norm(h2, &[1, 3], 1e-5)?;
                let c = t.concat_cols(&[n, h])?;
                let s = t.segment_sum(c, 2)?;
                let g = t.gather_rows(s, &[1, 0, 1])?;
                let mx = t.max_rows(g)?;
                let mn = t.mean_rows(g)?;
                let both = t.concat_rows(&[mx, mn])?;
                let r = t.reshape(both, &[12])?;
                let l = t.cross_entropy(r, 3)?;
                let sq = t.mul(x, x)?;
                let s2 = t.sum(sq)?;
                let s2 = t.scale(s2, 0.1)?;
                t.add(l, s2)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
