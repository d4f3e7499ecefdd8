//! Minimal reverse-mode differentiable dense arrays.
//!
//! A [`Tape`] records every primitive applied to its [`DiffArray`]s in
//! creation order; since inputs always precede outputs, walking the record
//! backwards is already a topological order, which makes the reverse pass
//! deterministic without any graph search. Arrays are rank-1 or rank-2,
//! row-major, and immutable once created; only gradient buffers are filled
//! in later.
//!
//! Precision is a per-tape setting: [`Precision::F64`] computes exactly in
//! 64-bit (verification mode), [`Precision::F32`] rounds the result of
//! every primitive (values and gradients) to 32-bit (training mode).
//! Any NaN/Inf produced from finite inputs is reported as an error instead
//! of being propagated.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::Error;
use crate::params::ParamStore;
use crate::Result;

/// Arithmetic width of a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Full 64-bit arithmetic (verification mode).
    F64,
    /// Results of every primitive rounded to 32-bit (training mode).
    F32,
}

impl Precision {
    #[inline]
    pub(crate) fn quantize(self, x: f64) -> f64 {
        match self {
            Precision::F64 => x,
            Precision::F32 => x as f32 as f64,
        }
    }

    pub(crate) fn quantize_buf(self, buf: &mut [f64]) {
        if self == Precision::F32 {
            for v in buf.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

enum Op {
    Leaf,
    Detach,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    MulScalar { x: usize, s: usize },
    AddBias { x: usize, b: usize },
    MulGate { x: usize, g: usize },
    MatMul { a: usize, b: usize },
    MatMulNt { a: usize, b: usize },
    SoftmaxRows { x: usize },
    MaskRenormRows { x: usize, mask: Vec<f64>, sums: Vec<f64>, fallback: Vec<bool> },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Gelu { x: usize },
    Sigmoid { x: usize },
    MeanAxis { x: usize, axis: usize },
    MeanAll { x: usize },
    SumAll { x: usize },
    Concat { parts: Vec<usize>, axis: usize },
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    Reshape { x: usize },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

struct TapeInner {
    precision: Precision,
    nodes: RefCell<Vec<Node>>,
    /// Parameter bindings (name, leaf id), unique by name.
    bindings: RefCell<Vec<(String, usize)>>,
}

/// A recording of one differentiable computation.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

/// Handle to one array recorded on a [`Tape`].
#[derive(Clone)]
pub struct DiffArray {
    tape: Rc<TapeInner>,
    id: usize,
}

impl core::fmt::Debug for DiffArray {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("DiffArray").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Interpret a rank-1 or rank-2 shape as rows x cols.
fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => unreachable!("arrays are rank-1 or rank-2"),
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                precision,
                nodes: RefCell::new(Vec::new()),
                bindings: RefCell::new(Vec::new()),
            }),
        }
    }

    pub fn precision(&self) -> Precision {
        self.inner.precision
    }

    pub fn node_count(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    /// Record a leaf array. Leaves with `requires_grad` receive gradients
    /// during the reverse pass.
    pub fn leaf(&self, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<DiffArray> {
        if shape.is_empty() || shape.len() > 2 || shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!("leaf: unsupported shape {shape:?}")));
        }
        if numel(shape) != values.len() {
            return Err(Error::Dimension(format!(
                "leaf: shape {:?} wants {} values, got {}",
                shape,
                numel(shape),
                values.len()
            )));
        }
        self.push(shape.to_vec(), values, requires_grad, Op::Leaf)
    }

    /// Record a constant (no gradient).
    pub fn constant(&self, values: Vec<f64>, shape: &[usize]) -> Result<DiffArray> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&self, value: f64) -> Result<DiffArray> {
        self.constant(vec![value], &[1])
    }

    /// Bind a named parameter from `store` as a gradient-carrying leaf.
    /// Binding the same name twice returns the same node.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<DiffArray> {
        let cached = self.inner.bindings.borrow().iter().find(|(n, _)| n == name).map(|(_, id)| *id);
        if let Some(id) = cached {
            return Ok(DiffArray { tape: Rc::clone(&self.inner), id });
        }
        let p = store.get(name)?;
        let arr = self.leaf(p.values.clone(), &p.shape, true)?;
        self.inner.bindings.borrow_mut().push((name.to_string(), arr.id));
        Ok(arr)
    }

    /// Concatenate along `axis` (0 = rows, 1 = cols; rank-1 arrays only on axis 0).
    pub fn concat(&self, parts: &[&DiffArray], axis: usize) -> Result<DiffArray> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat: empty part list".into()));
        }
        for p in parts {
            self.check_same_tape(p)?;
        }
        let first = parts[0].shape();
        let rank = first.len();
        if axis >= rank.max(1) || (rank == 1 && axis != 0) {
            return Err(Error::Dimension(format!("concat: axis {axis} out of range for rank {rank}")));
        }
        let needs = parts.iter().any(|p| p.node_needs_grad());
        if rank == 1 {
            let mut values = Vec::new();
            for p in parts {
                if p.shape().len() != 1 {
                    return Err(Error::Dimension(format!(
                        "concat: mixed ranks {:?} vs {:?}",
                        first,
                        p.shape()
                    )));
                }
                values.extend_from_slice(&p.values_ref());
            }
            let len = values.len();
            return self.push(
                vec![len],
                values,
                needs,
                Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis: 0 },
            );
        }
        let (m0, n0) = as_2d(&first);
        if axis == 0 {
            let mut rows = 0usize;
            let mut values = Vec::new();
            for p in parts {
                let (m, n) = as_2d(&p.shape());
                if n != n0 {
                    return Err(Error::Dimension(format!(
                        "concat rows: column counts differ, {:?} vs {:?}",
                        first,
                        p.shape()
                    )));
                }
                rows += m;
                values.extend_from_slice(&p.values_ref());
            }
            self.push(
                vec![rows, n0],
                values,
                needs,
                Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis: 0 },
            )
        } else {
            let mut cols = 0usize;
            for p in parts {
                let (m, _) = as_2d(&p.shape());
                if m != m0 {
                    return Err(Error::Dimension(format!(
                        "concat cols: row counts differ, {:?} vs {:?}",
                        first,
                        p.shape()
                    )));
                }
                cols += p.shape()[1];
            }
            let mut values = vec![0.0; m0 * cols];
            let mut off = 0usize;
            for p in parts {
                let n = p.shape()[1];
                let pv = p.values_ref();
                for r in 0..m0 {
                    values[r * cols + off..r * cols + off + n].copy_from_slice(&pv[r * n..(r + 1) * n]);
                }
                off += n;
            }
            self.push(
                vec![m0, cols],
                values,
                needs,
                Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis: 1 },
            )
        }
    }

    fn check_same_tape(&self, other: &DiffArray) -> Result<()> {
        if Rc::ptr_eq(&self.inner, &other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("arrays belong to different tapes".into()))
        }
    }

    fn push(&self, shape: Vec<usize>, mut values: Vec<f64>, needs_grad: bool, op: Op) -> Result<DiffArray> {
        self.inner.precision.quantize_buf(&mut values);
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { shape, values, grad: None, needs_grad, op });
        Ok(DiffArray { tape: Rc::clone(&self.inner), id })
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Detach => "detach",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::MulScalar { .. } => "mul_scalar",
        Op::AddBias { .. } => "add_bias",
        Op::MulGate { .. } => "mul_gate",
        Op::MatMul { .. } => "matmul",
        Op::MatMulNt { .. } => "matmul_nt",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::MaskRenormRows { .. } => "masked_renorm_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu { .. } => "gelu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::MeanAxis { .. } => "mean_axis",
        Op::MeanAll { .. } => "mean_all",
        Op::SumAll { .. } => "sum_all",
        Op::Concat { .. } => "concat",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::Reshape { .. } => "reshape",
    }
}

impl DiffArray {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn values(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].values.clone()
    }

    fn values_ref(&self) -> Vec<f64> {
        // RefCell forbids handing out a plain slice; cloning keeps the API simple.
        self.values()
    }

    pub fn requires_grad(&self) -> bool {
        self.node_needs_grad()
    }

    fn node_needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Gradient buffer populated by the latest reverse pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    /// Value of a single-element array.
    pub fn item(&self) -> Result<f64> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if n.values.len() != 1 {
            return Err(Error::Contract(format!(
                "item: expected a scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.values[0])
    }

    fn tape_handle(&self) -> Tape {
        Tape { inner: Rc::clone(&self.tape) }
    }

    fn binary_same_shape(&self, other: &DiffArray, op: &'static str) -> Result<()> {
        self.tape_handle().check_same_tape(other)?;
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &DiffArray) -> Result<DiffArray> {
        self.binary_same_shape(other, "add")?;
        let (a, b) = (self.values_ref(), other.values_ref());
        let values = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        self.tape_handle().push(
            self.shape(),
            values,
            self.node_needs_grad() || other.node_needs_grad(),
            Op::Add { a: self.id, b: other.id },
        )
    }

    pub fn sub(&self, other: &DiffArray) -> Result<DiffArray> {
        self.binary_same_shape(other, "sub")?;
        let (a, b) = (self.values_ref(), other.values_ref());
        let values = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        self.tape_handle().push(
            self.shape(),
            values,
            self.node_needs_grad() || other.node_needs_grad(),
            Op::Sub { a: self.id, b: other.id },
        )
    }

    pub fn mul(&self, other: &DiffArray) -> Result<DiffArray> {
        self.binary_same_shape(other, "mul")?;
        let (a, b) = (self.values_ref(), other.values_ref());
        let values = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        self.tape_handle().push(
            self.shape(),
            values,
            self.node_needs_grad() || other.node_needs_grad(),
            Op::Mul { a: self.id, b: other.id },
        )
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, c: f64) -> Result<DiffArray> {
        let values = self.values_ref().iter().map(|x| x * c).collect();
        self.tape_handle()
            .push(self.shape(), values, self.node_needs_grad(), Op::Scale { x: self.id, c })
    }

    /// Multiply every element by a learnable single-element array.
    pub fn mul_scalar(&self, s: &DiffArray) -> Result<DiffArray> {
        self.tape_handle().check_same_tape(s)?;
        if s.values_ref().len() != 1 {
            return Err(Error::Dimension(format!(
                "mul_scalar: scale must be single-element, got {:?}",
                s.shape()
            )));
        }
        let sv = s.values_ref()[0];
        let values = self.values_ref().iter().map(|x| x * sv).collect();
        self.tape_handle().push(
            self.shape(),
            values,
            self.node_needs_grad() || s.node_needs_grad(),
            Op::MulScalar { x: self.id, s: s.id },
        )
    }

    /// `[m x n] + [n]`, the bias broadcast over rows.
    pub fn add_bias(&self, bias: &DiffArray) -> Result<DiffArray> {
        self.tape_handle().check_same_tape(bias)?;
        let (m, n) = as_2d(&self.shape());
        if bias.shape() != vec![n] {
            return Err(Error::Dimension(format!(
                "add_bias: {:?} + {:?} (want bias [{n}])",
                self.shape(),
                bias.shape()
            )));
        }
        let x = self.values_ref();
        let b = bias.values_ref();
        let mut values = vec![0.0; m * n];
        for r in 0..m {
            for j in 0..n {
                values[r * n + j] = x[r * n + j] + b[j];
            }
        }
        self.tape_handle().push(
            self.shape(),
            values,
            self.node_needs_grad() || bias.node_needs_grad(),
            Op::AddBias { x: self.id, b: bias.id },
        )
    }

    /// `[m x n] * [n]`, per-channel gate broadcast over rows.
    pub fn mul_gate(&self, gate: &DiffArray) -> Result<DiffArray> {
        self.tape_handle().check_same_tape(gate)?;
        let (m, n) = as_2d(&self.shape());
        if gate.shape() != vec![n] {
            return Err(Error::Dimension(format!(
                "mul_gate: {:?} * {:?} (want gate [{n}])",
                self.shape(),
                gate.shape()
            )));
        }
        let x = self.values_ref();
        let g = gate.values_ref();
        let mut values = vec![0.0; m * n];
        for r in 0..m {
            for j in 0..n {
                values[r * n + j] = x[r * n + j] * g[j];
            }
        }
        self.tape_handle().push(
            self.shape(),
            values,
            self.node_needs_grad() || gate.node_needs_grad(),
            Op::MulGate { x: self.id, g: gate.id },
        )
    }

    /// Standard matrix product `[m x k] x [k x n]`.
    pub fn matmul(&self, other: &DiffArray) -> Result<DiffArray> {
        self.tape_handle().check_same_tape(other)?;
        let (m, k) = as_2d(&self.shape());
        let bs = other.shape();
        if bs.len() != 2 || bs[0] != k {
            return Err(Error::Dimension(format!(
                "matmul: {:?} x {:?} (inner extents differ)",
                self.shape(),
                bs
            )));
        }
        let n = bs[1];
        let a = self.values_ref();
        let b = other.values_ref();
        let values = matmul_raw(&a, &b, m, k, n);
        self.tape_handle().push(
            vec![m, n],
            values,
            self.node_needs_grad() || other.node_needs_grad(),
            Op::MatMul { a: self.id, b: other.id },
        )
    }

    /// `self x other^T` where `self` is `[m x k]` and `other` is `[n x k]`.
    pub fn matmul_nt(&self, other: &DiffArray) -> Result<DiffArray> {
        self.tape_handle().check_same_tape(other)?;
        let (m, k) = as_2d(&self.shape());
        let bs = other.shape();
        if bs.len() != 2 || bs[1] != k {
            return Err(Error::Dimension(format!(
                "matmul_nt: {:?} x {:?}^T (inner extents differ)",
                self.shape(),
                bs
            )));
        }
        let n = bs[0];
        let a = self.values_ref();
        let b = other.values_ref();
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[j * k + p];
                }
                values[i * n + j] = s;
            }
        }
        self.tape_handle().push(
            vec![m, n],
            values,
            self.node_needs_grad() || other.node_needs_grad(),
            Op::MatMulNt { a: self.id, b: other.id },
        )
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<DiffArray> {
        let (m, n) = as_2d(&self.shape());
        let x = self.values_ref();
        let mut values = vec![0.0; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for j in 0..n {
                let e = libm::exp(row[j] - mx);
                values[r * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                values[r * n + j] /= sum;
            }
        }
        self.tape_handle()
            .push(self.shape(), values, self.node_needs_grad(), Op::SoftmaxRows { x: self.id })
    }

    /// Zero entries where `mask` is 0 and renormalize each row to sum 1.
    /// Rows that lose every entry fall back to attending to self (the
    /// diagonal), so the matrix must be square. Mask entries are constants.
    pub fn masked_renorm_rows(&self, mask: &[f64]) -> Result<DiffArray> {
        let (m, n) = as_2d(&self.shape());
        if m != n {
            return Err(Error::Dimension(format!(
                "masked_renorm_rows: square matrix required, got {:?}",
                self.shape()
            )));
        }
        if mask.len() != m * n {
            return Err(Error::Dimension(format!(
                "masked_renorm_rows: mask length {} does not match {:?}",
                mask.len(),
                self.shape()
            )));
        }
        let x = self.values_ref();
        let mut values = vec![0.0; m * n];
        let mut sums = vec![0.0; m];
        let mut fallback = vec![false; m];
        for r in 0..m {
            let mut s = 0.0;
            for j in 0..n {
                s += x[r * n + j] * mask[r * n + j];
            }
            sums[r] = s;
            if s <= 0.0 {
                // Every entry dropped: keep self-attention only.
                values[r * n + r] = 1.0;
                fallback[r] = true;
            } else {
                for j in 0..n {
                    values[r * n + j] = x[r * n + j] * mask[r * n + j] / s;
                }
            }
        }
        self.tape_handle().push(
            self.shape(),
            values,
            self.node_needs_grad(),
            Op::MaskRenormRows { x: self.id, mask: mask.to_vec(), sums, fallback },
        )
    }

    /// Standardize over the last axis, then apply the affine `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &DiffArray, beta: &DiffArray, eps: f64) -> Result<DiffArray> {
        self.tape_handle().check_same_tape(gamma)?;
        self.tape_handle().check_same_tape(beta)?;
        let (m, c) = as_2d(&self.shape());
        if gamma.shape() != vec![c] || beta.shape() != vec![c] {
            return Err(Error::Dimension(format!(
                "layer_norm: input {:?} wants gamma/beta [{c}], got {:?}/{:?}",
                self.shape(),
                gamma.shape(),
                beta.shape()
            )));
        }
        let x = self.values_ref();
        let gm = gamma.values_ref();
        let bt = beta.values_ref();
        let mut values = vec![0.0; m * c];
        for r in 0..m {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / libm::sqrt(var + eps);
            for j in 0..c {
                values[r * c + j] = (row[j] - mean) * rstd * gm[j] + bt[j];
            }
        }
        self.tape_handle().push(
            self.shape(),
            values,
            self.node_needs_grad() || gamma.node_needs_grad() || beta.node_needs_grad(),
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, eps },
        )
    }

    /// Exact GELU, `0.5 x (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&self) -> Result<DiffArray> {
        let values = self.values_ref().iter().map(|&x| gelu_raw(x)).collect();
        self.tape_handle()
            .push(self.shape(), values, self.node_needs_grad(), Op::Gelu { x: self.id })
    }

    pub fn sigmoid(&self) -> Result<DiffArray> {
        let values = self.values_ref().iter().map(|&x| sigmoid_raw(x)).collect();
        self.tape_handle()
            .push(self.shape(), values, self.node_needs_grad(), Op::Sigmoid { x: self.id })
    }

    /// Mean over one axis of a rank-2 array: axis 0 gives `[n]`, axis 1 gives `[m]`.
    pub fn mean_axis(&self, axis: usize) -> Result<DiffArray> {
        let shape = self.shape();
        if shape.len() != 2 || axis > 1 {
            return Err(Error::Dimension(format!(
                "mean_axis: rank-2 input required (got {:?}, axis {axis})",
                shape
            )));
        }
        let (m, n) = (shape[0], shape[1]);
        let x = self.values_ref();
        let values = if axis == 0 {
            let mut out = vec![0.0; n];
            for r in 0..m {
                for j in 0..n {
                    out[j] += x[r * n + j];
                }
            }
            for v in out.iter_mut() {
                *v /= m as f64;
            }
            out
        } else {
            let mut out = vec![0.0; m];
            for r in 0..m {
                out[r] = x[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64;
            }
            out
        };
        let out_shape = if axis == 0 { vec![n] } else { vec![m] };
        self.tape_handle()
            .push(out_shape, values, self.node_needs_grad(), Op::MeanAxis { x: self.id, axis })
    }

    pub fn mean_all(&self) -> Result<DiffArray> {
        let x = self.values_ref();
        let v = x.iter().sum::<f64>() / x.len() as f64;
        self.tape_handle()
            .push(vec![1], vec![v], self.node_needs_grad(), Op::MeanAll { x: self.id })
    }

    pub fn sum_all(&self) -> Result<DiffArray> {
        let x = self.values_ref();
        let v = x.iter().sum::<f64>();
        self.tape_handle()
            .push(vec![1], vec![v], self.node_needs_grad(), Op::SumAll { x: self.id })
    }

    /// Rows `start..start+len` of a rank-2 array.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<DiffArray> {
        let shape = self.shape();
        if shape.len() != 2 || start + len > shape[0] || len == 0 {
            return Err(Error::Dimension(format!(
                "slice_rows: rows {start}..{} out of {:?}",
                start + len,
                shape
            )));
        }
        let n = shape[1];
        let x = self.values_ref();
        let values = x[start * n..(start + len) * n].to_vec();
        self.tape_handle().push(
            vec![len, n],
            values,
            self.node_needs_grad(),
            Op::SliceRows { x: self.id, start },
        )
    }

    /// Columns `start..start+len` of a rank-2 array.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<DiffArray> {
        let shape = self.shape();
        if shape.len() != 2 || start + len > shape[1] || len == 0 {
            return Err(Error::Dimension(format!(
                "slice_cols: cols {start}..{} out of {:?}",
                start + len,
                shape
            )));
        }
        let (m, n) = (shape[0], shape[1]);
        let x = self.values_ref();
        let mut values = vec![0.0; m * len];
        for r in 0..m {
            values[r * len..(r + 1) * len].copy_from_slice(&x[r * n + start..r * n + start + len]);
        }
        self.tape_handle().push(
            vec![m, len],
            values,
            self.node_needs_grad(),
            Op::SliceCols { x: self.id, start },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<DiffArray> {
        if numel(shape) != self.values_ref().len() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::Dimension(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        self.tape_handle().push(
            shape.to_vec(),
            self.values_ref(),
            self.node_needs_grad(),
            Op::Reshape { x: self.id },
        )
    }

    /// Identity on values; gradients do not flow past this point.
    pub fn detach(&self) -> Result<DiffArray> {
        self.tape_handle()
            .push(self.shape(), self.values_ref(), false, Op::Detach)
    }

    /// Reverse pass from a scalar loss. Populates the gradient buffer of
    /// every reachable gradient-carrying node; accumulation order is the
    /// reverse of creation order, so results are bit-reproducible.
    pub fn backward(&self) -> Result<()> {
        let mut nodes = self.tape.nodes.borrow_mut();
        if nodes[self.id].values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                nodes[self.id].shape
            )));
        }
        let precision = self.tape.precision;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=self.id).map(|_| None).collect();
        grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let Some(mut g) = grads[id].take() else { continue };
            if !nodes[id].needs_grad {
                continue;
            }
            precision.quantize_buf(&mut g);
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            backprop(&nodes, id, &g, &mut grads);
            nodes[id].grad = Some(g);
        }
        Ok(())
    }

    /// Run [`DiffArray::backward`] and add every bound parameter's gradient
    /// into `store` in sorted-name order. Parameters the loss never reached
    /// (including ones never bound on this tape) get zero gradients.
    pub fn backward_into(&self, store: &mut ParamStore) -> Result<()> {
        self.backward()?;
        let nodes = self.tape.nodes.borrow();
        let mut bindings = self.tape.bindings.borrow().clone();
        bindings.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, id) in bindings {
            match &nodes[id].grad {
                Some(g) => store.accumulate_grad(&name, g)?,
                None => store.accumulate_zero_grad(&name)?,
            }
        }
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            store.accumulate_zero_grad(&name)?;
        }
        Ok(())
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += a_ip * brow[j];
            }
        }
    }
    c
}

fn gelu_raw(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
        + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

fn sigmoid_raw(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Propagate `g` (gradient at `id`) into this node's inputs.
fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let add_into = |grads: &mut [Option<Vec<f64>>], target: usize, contribution: &[f64]| {
        if !nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contribution) {
                    *b += c;
                }
            }
            None => grads[target] = Some(contribution.to_vec()),
        }
    };

    match &nodes[id].op {
        Op::Leaf | Op::Detach => {}
        Op::Add { a, b } => {
            add_into(grads, *a, g);
            add_into(grads, *b, g);
        }
        Op::Sub { a, b } => {
            add_into(grads, *a, g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            add_into(grads, *b, &neg);
        }
        Op::Mul { a, b } => {
            let av = &nodes[*a].values;
            let bv = &nodes[*b].values;
            let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
            let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
            add_into(grads, *a, &da);
            add_into(grads, *b, &db);
        }
        Op::Scale { x, c } => {
            let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
            add_into(grads, *x, &dx);
        }
        Op::MulScalar { x, s } => {
            let sv = nodes[*s].values[0];
            let xv = &nodes[*x].values;
            let dx: Vec<f64> = g.iter().map(|v| v * sv).collect();
            let ds = [g.iter().zip(xv).map(|(gv, xvv)| gv * xvv).sum::<f64>()];
            add_into(grads, *x, &dx);
            add_into(grads, *s, &ds);
        }
        Op::AddBias { x, b } => {
            add_into(grads, *x, g);
            let (m, n) = as_2d(&nodes[*x].shape);
            let mut db = vec![0.0; n];
            for r in 0..m {
                for j in 0..n {
                    db[j] += g[r * n + j];
                }
            }
            add_into(grads, *b, &db);
        }
        Op::MulGate { x, g: gate } => {
            let (m, n) = as_2d(&nodes[*x].shape);
            let xv = &nodes[*x].values;
            let gv = &nodes[*gate].values;
            let mut dx = vec![0.0; m * n];
            let mut dg = vec![0.0; n];
            for r in 0..m {
                for j in 0..n {
                    dx[r * n + j] = g[r * n + j] * gv[j];
                    dg[j] += g[r * n + j] * xv[r * n + j];
                }
            }
            add_into(grads, *x, &dx);
            add_into(grads, *gate, &dg);
        }
        Op::MatMul { a, b } => {
            let (m, k) = as_2d(&nodes[*a].shape);
            let n = nodes[*b].shape[1];
            let av = &nodes[*a].values;
            let bv = &nodes[*b].values;
            // da = g . b^T
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += g[i * n + j] * bv[p * n + j];
                    }
                    da[i * k + p] = s;
                }
            }
            // db = a^T . g
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let a_ip = av[i * k + p];
                    if a_ip == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        db[p * n + j] += a_ip * g[i * n + j];
                    }
                }
            }
            add_into(grads, *a, &da);
            add_into(grads, *b, &db);
        }
        Op::MatMulNt { a, b } => {
            let (m, k) = as_2d(&nodes[*a].shape);
            let n = nodes[*b].shape[0];
            let av = &nodes[*a].values;
            let bv = &nodes[*b].values;
            // out = a . b^T; da = g . b
            let da = matmul_raw(g, bv, m, n, k);
            // db = g^T . a
            let mut db = vec![0.0; n * k];
            for i in 0..m {
                for j in 0..n {
                    let gij = g[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for p in 0..k {
                        db[j * k + p] += gij * av[i * k + p];
                    }
                }
            }
            add_into(grads, *a, &da);
            add_into(grads, *b, &db);
        }
        Op::SoftmaxRows { x } => {
            let (m, n) = as_2d(&nodes[id].shape);
            let y = &nodes[id].values;
            let mut dx = vec![0.0; m * n];
            for r in 0..m {
                let dot: f64 = (0..n).map(|j| g[r * n + j] * y[r * n + j]).sum();
                for j in 0..n {
                    dx[r * n + j] = y[r * n + j] * (g[r * n + j] - dot);
                }
            }
            add_into(grads, *x, &dx);
        }
        Op::MaskRenormRows { x, mask, sums, fallback } => {
            let (m, n) = as_2d(&nodes[id].shape);
            let y = &nodes[id].values;
            let mut dx = vec![0.0; m * n];
            for r in 0..m {
                if fallback[r] {
                    continue; // constant one-hot row, no gradient
                }
                let dot: f64 = (0..n).map(|j| g[r * n + j] * y[r * n + j]).sum();
                for j in 0..n {
                    dx[r * n + j] = mask[r * n + j] / sums[r] * (g[r * n + j] - dot);
                }
            }
            add_into(grads, *x, &dx);
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (m, c) = as_2d(&nodes[*x].shape);
            let xv = &nodes[*x].values;
            let gm = &nodes[*gamma].values;
            let mut dx = vec![0.0; m * c];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for r in 0..m {
                let row = &xv[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rstd = 1.0 / libm::sqrt(var + eps);
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for j in 0..c {
                    let xhat = (row[j] - mean) * rstd;
                    let gj = g[r * c + j];
                    dgamma[j] += gj * xhat;
                    dbeta[j] += gj;
                    let dxhat = gj * gm[j];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                }
                mean_dxhat /= c as f64;
                mean_dxhat_xhat /= c as f64;
                for j in 0..c {
                    let xhat = (row[j] - mean) * rstd;
                    let dxhat = g[r * c + j] * gm[j];
                    dx[r * c + j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
            add_into(grads, *x, &dx);
            add_into(grads, *gamma, &dgamma);
            add_into(grads, *beta, &dbeta);
        }
        Op::Gelu { x } => {
            let xv = &nodes[*x].values;
            let dx: Vec<f64> = g.iter().zip(xv).map(|(gv, &x)| gv * gelu_grad(x)).collect();
            add_into(grads, *x, &dx);
        }
        Op::Sigmoid { x } => {
            let y = &nodes[id].values;
            let dx: Vec<f64> = g.iter().zip(y).map(|(gv, &yv)| gv * yv * (1.0 - yv)).collect();
            add_into(grads, *x, &dx);
        }
        Op::MeanAxis { x, axis } => {
            let (m, n) = as_2d(&nodes[*x].shape);
            let mut dx = vec![0.0; m * n];
            if *axis == 0 {
                for r in 0..m {
                    for j in 0..n {
                        dx[r * n + j] = g[j] / m as f64;
                    }
                }
            } else {
                for r in 0..m {
                    for j in 0..n {
                        dx[r * n + j] = g[r] / n as f64;
                    }
                }
            }
            add_into(grads, *x, &dx);
        }
        Op::MeanAll { x } => {
            let len = nodes[*x].values.len();
            let dx = vec![g[0] / len as f64; len];
            add_into(grads, *x, &dx);
        }
        Op::SumAll { x } => {
            let len = nodes[*x].values.len();
            let dx = vec![g[0]; len];
            add_into(grads, *x, &dx);
        }
        Op::Concat { parts, axis } => {
            if *axis == 0 {
                let mut off = 0usize;
                for &p in parts {
                    let len = nodes[p].values.len();
                    add_into(grads, p, &g[off..off + len]);
                    off += len;
                }
            } else {
                let (m, cols) = as_2d(&nodes[id].shape);
                let mut off = 0usize;
                for &p in parts {
                    let n = nodes[p].shape[1];
                    let mut dp = vec![0.0; m * n];
                    for r in 0..m {
                        dp[r * n..(r + 1) * n]
                            .copy_from_slice(&g[r * cols + off..r * cols + off + n]);
                    }
                    add_into(grads, p, &dp);
                    off += n;
                }
            }
        }
        Op::SliceRows { x, start } => {
            let (m, n) = as_2d(&nodes[*x].shape);
            let len = nodes[id].shape[0];
            let mut dx = vec![0.0; m * n];
            dx[start * n..(start + len) * n].copy_from_slice(g);
            add_into(grads, *x, &dx);
        }
        Op::SliceCols { x, start } => {
            let (m, n) = as_2d(&nodes[*x].shape);
            let len = nodes[id].shape[1];
            let mut dx = vec![0.0; m * n];
            for r in 0..m {
                dx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            add_into(grads, *x, &dx);
        }
        Op::Reshape { x } => {
            add_into(grads, *x, g);
        }
    }
}
