//! Dense `f64` tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values live in [`Tensor`], a plain row-major array. Differentiable
//! computations are recorded on a [`Tape`]; every operation returns a
//! lightweight [`Var`] handle pointing at a tape node. Calling
//! [`Var::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients into every leaf created with [`Tape::param`].
//!
//! ```
//! use msegnn::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! y.backward().unwrap();
//! assert_eq!(tape.grad(x).unwrap().item(), 6.0);
//! ```

use std::cell::{Ref, RefCell};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: value count {got} does not match shape {shape:?}")]
    Size {
        op: &'static str,
        shape: Vec<usize>,
        got: usize,
    },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: reduction over an empty axis")]
    EmptyReduction { op: &'static str },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("backward requires a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape error: {0}")]
    Tape(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major array of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Size {
                op: "tensor",
                shape,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    ///
    /// Panics if the tensor holds more than one value.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.data.len(), other.data.len());
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// a (m×k) times bᵀ where b is (n×k).
fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// aᵀ (a is m×k) times b (m×n), giving k×n.
fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let o = &mut out[p * n..(p + 1) * n];
            for (x, &bv) in o.iter_mut().zip(b_row) {
                *x += av * bv;
            }
        }
    }
    out
}

/// Numerically stable logistic function, kept strictly inside (0, 1).
pub fn stable_sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `broadcast` is true when the right operand is a row repeated over the
    /// rows of the left operand.
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
        broadcast: bool,
    },
    Exp(usize),
    Log(usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Relu(usize),
    Abs(usize),
    Sum {
        a: usize,
        axis: Option<usize>,
    },
    Mean {
        a: usize,
        axis: Option<usize>,
        count: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    RepeatRows(usize),
    Transpose(usize),
    Reshape(usize),
    LogSoftmax(usize),
    IndexRows {
        a: usize,
        index: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    /// True for leaves created with [`Tape::param`].
    requires_grad: bool,
    /// True when some `requires_grad` leaf is reachable from this node.
    tracked: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    generation: u64,
}

/// Records differentiable operations in execution order.
///
/// A tape is single-threaded. Independent tapes can be used concurrently.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    generation: u64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let grad = requires_grad.then(|| Tensor::zeros(value.shape()));
        inner.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            tracked: requires_grad,
            grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
            generation: inner.generation,
        }
    }

    /// A trainable leaf; its gradient is accumulated by `backward`.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Accumulated gradient of a `param` leaf.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let inner = self.inner.borrow();
        if var.generation != inner.generation {
            return None;
        }
        inner.nodes.get(var.id).and_then(|n| n.grad.clone())
    }

    /// Resets every leaf gradient to zero.
    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        for node in inner.nodes.iter_mut() {
            if let Some(g) = node.grad.as_mut() {
                g.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Drops every recorded node. Handles created before the reset become
    /// invalid and any operation on them fails with a tape error.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.generation += 1;
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            tracked,
            grad: None,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
            generation: inner.generation,
        }
    }

    fn check(&self, v: Var<'_>) -> Result<()> {
        if !std::ptr::eq(self, v.tape) {
            return Err(TensorError::Tape("variable belongs to a different tape"));
        }
        if v.generation != self.inner.borrow().generation {
            return Err(TensorError::Tape("variable refers to a consumed tape"));
        }
        Ok(())
    }
}

fn broadcast_row_shape(a: &[usize], b: &[usize]) -> bool {
    if a.len() != 2 {
        return false;
    }
    match b {
        [d] => *d == a[1],
        [1, d] => *d == a[1],
        _ => false,
    }
}

fn sum_rows(t: &Tensor, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in t.data.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

// Fallible arithmetic returns `Result`, so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the underlying value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.inner.borrow(), |i| &i.nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    fn tracked(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].tracked
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        self.tape.check(self)?;
        let out = f(&self.value())?;
        Ok(self.tape.push(out, op, self.tracked()))
    }

    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let out = {
            let a = self.value();
            let b = other.value();
            let broadcast = if a.shape == b.shape {
                false
            } else if broadcast_row_shape(&a.shape, &b.shape) {
                true
            } else {
                return Err(TensorError::Shape {
                    op: name,
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            };
            if kind == Binary::Div && b.data.contains(&0.0) {
                return Err(TensorError::Domain {
                    op: "div",
                    detail: "division by zero".into(),
                });
            }
            let cols = b.data.len();
            let f = |x: f64, y: f64| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            };
            let data = if broadcast {
                a.data
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b.data[i % cols]))
                    .collect()
            } else {
                a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
            };
            (
                Tensor {
                    shape: a.shape.clone(),
                    data,
                },
                broadcast,
            )
        };
        let tracked = self.tracked() || other.tracked();
        Ok(self.tape.push(
            out.0,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                broadcast: out.1,
            },
            tracked,
        ))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        let out = self.value().matmul(&other.value())?;
        let tracked = self.tracked() || other.tracked();
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), tracked))
    }

    /// Elementwise sum; `other` may also be a row broadcast over the rows of `self`.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    /// Hadamard product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Exp(id), |a| {
            let out = a.map(f64::exp);
            if out.all_finite() {
                Ok(out)
            } else {
                Err(TensorError::Domain {
                    op: "exp",
                    detail: "overflow".into(),
                })
            }
        })
    }

    pub fn log(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Log(id), |a| {
            if let Some(x) = a.data.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: format!("non-positive input {x}"),
                });
            }
            Ok(a.map(f64::ln))
        })
    }

    pub fn neg(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Neg(id), |a| Ok(a.map(|x| -x)))
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Scale(id, factor), |a| Ok(a.map(|x| x * factor)))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::AddScalar(id), |a| Ok(a.map(|x| x + c)))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Sigmoid(id), |a| Ok(a.map(stable_sigmoid)))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Relu(id), |a| Ok(a.map(|x| x.max(0.0))))
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Abs(id), |a| Ok(a.map(f64::abs)))
    }

    /// Sum over `axis`, or over every element when `axis` is `None`.
    pub fn sum(self, axis: Option<usize>) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Sum { a: id, axis }, |a| reduce_sum(a, axis, "sum"))
    }

    pub fn mean(self, axis: Option<usize>) -> Result<Var<'t>> {
        self.tape.check(self)?;
        let (out, count) = {
            let a = self.value();
            let count = match axis {
                None => a.len(),
                Some(ax) => *a.shape.get(ax).ok_or(TensorError::Axis {
                    op: "mean",
                    axis: ax,
                    rank: a.rank(),
                })?,
            };
            if count == 0 {
                return Err(TensorError::EmptyReduction { op: "mean" });
            }
            let mut s = reduce_sum(&a, axis, "mean")?;
            s.data.iter_mut().for_each(|x| *x /= count as f64);
            (s, count)
        };
        Ok(self.tape.push(
            out,
            Op::Mean {
                a: self.id,
                axis,
                count,
            },
            self.tracked(),
        ))
    }

    /// Repeats a single-row tensor (`[d]` or `[1, d]`) into an `n × d` matrix.
    pub fn repeat_rows(self, n: usize) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::RepeatRows(id), |a| {
            let d = match a.shape.as_slice() {
                [d] | [1, d] => *d,
                _ => {
                    return Err(TensorError::Shape {
                        op: "repeat_rows",
                        left: a.shape.clone(),
                        right: vec![1, a.cols()],
                    })
                }
            };
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                data.extend_from_slice(&a.data);
            }
            Ok(Tensor {
                shape: vec![n, d],
                data,
            })
        })
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Transpose(id), Tensor::transpose)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::Reshape(id), |a| {
            a.reshape(shape).map_err(|_| TensorError::Shape {
                op: "reshape",
                left: a.shape.clone(),
                right: shape.to_vec(),
            })
        })
    }

    /// Row-wise log-softmax of a matrix (or of a single vector).
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(Op::LogSoftmax(id), |a| {
            let cols = a.cols();
            if cols == 0 {
                return Err(TensorError::EmptyReduction { op: "log_softmax" });
            }
            let mut out = a.clone();
            for row in out.data.chunks_mut(cols) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            Ok(out)
        })
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        self.log_softmax()?.exp()
    }

    /// Gathers rows of a matrix; indices may repeat.
    pub fn index_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(
            Op::IndexRows {
                a: id,
                index: index.to_vec(),
            },
            |a| {
                if a.rank() != 2 {
                    return Err(TensorError::Rank {
                        op: "index_rows",
                        expected: 2,
                        shape: a.shape.clone(),
                    });
                }
                let cols = a.shape[1];
                let mut data = Vec::with_capacity(index.len() * cols);
                for &i in index {
                    if i >= a.shape[0] {
                        return Err(TensorError::Axis {
                            op: "index_rows",
                            axis: i,
                            rank: a.shape[0],
                        });
                    }
                    data.extend_from_slice(a.row(i));
                }
                Ok(Tensor {
                    shape: vec![index.len(), cols],
                    data,
                })
            },
        )
    }

    /// Concatenates along `axis`. Empty tensors (zero elements) are skipped.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = *parts
            .first()
            .ok_or(TensorError::Tape("concat of nothing"))?;
        let tape = first.tape;
        for p in parts {
            tape.check(*p)?;
        }
        let kept: Vec<Var<'t>> = parts
            .iter()
            .copied()
            .filter(|p| !p.value().is_empty())
            .collect();
        if kept.is_empty() {
            return Ok(first);
        }
        let out = {
            let values: Vec<Ref<'_, Tensor>> = kept.iter().map(|p| p.value()).collect();
            let refs: Vec<&Tensor> = values.iter().map(|r| &**r).collect();
            concat_values(&refs, axis)?
        };
        let tracked = kept.iter().any(|p| p.tracked());
        Ok(tape.push(
            out,
            Op::Concat {
                inputs: kept.iter().map(|p| p.id).collect(),
                axis,
            },
            tracked,
        ))
    }

    /// Reverse pass from this single-element loss. Gradients accumulate into
    /// every `param` leaf; repeated calls add up until [`Tape::zero_grad`].
    pub fn backward(self) -> Result<()> {
        self.tape.check(self)?;
        let mut inner = self.tape.inner.borrow_mut();
        let nodes = &mut inner.nodes;
        if nodes[self.id].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(
                nodes[self.id].value.shape.clone(),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.id + 1];
        adj[self.id] = Some(Tensor::ones(&nodes[self.id].value.shape));

        for id in (0..=self.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    if let Some(acc) = nodes[id].grad.as_mut() {
                        acc.add_assign(&g);
                    }
                }
                continue;
            }
            for (input, contrib) in local_grads(nodes, id, &g) {
                if !nodes[input].tracked {
                    continue;
                }
                match adj[input].as_mut() {
                    Some(acc) => acc.add_assign(&contrib),
                    None => adj[input] = Some(contrib),
                }
            }
        }
        Ok(())
    }
}

fn reduce_sum(a: &Tensor, axis: Option<usize>, op: &'static str) -> Result<Tensor> {
    let Some(axis) = axis else {
        return Ok(Tensor::scalar(a.sum()));
    };
    if axis >= a.rank() {
        return Err(TensorError::Axis {
            op,
            axis,
            rank: a.rank(),
        });
    }
    if a.shape[axis] == 0 {
        return Err(TensorError::EmptyReduction { op });
    }
    let outer: usize = a.shape[..axis].iter().product();
    let len = a.shape[axis];
    let inner: usize = a.shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            for i in 0..inner {
                out[o * inner + i] += a.data[base + i];
            }
        }
    }
    let mut shape = a.shape.clone();
    shape.remove(axis);
    Ok(Tensor { shape, data: out })
}

/// Spreads `g` (shape with `axis` removed) back over the original shape.
fn expand_axis(g: &Tensor, shape: &[usize], axis: Option<usize>, factor: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let Some(axis) = axis else {
        return Tensor::full(shape, g.data[0] * factor);
    };
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = vec![0.0; n];
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            for i in 0..inner {
                data[base + i] = g.data[o * inner + i] * factor;
            }
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

fn concat_values(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0];
    let rank = first.rank();
    if axis >= rank.max(1) {
        return Err(TensorError::Axis {
            op: "concat",
            axis,
            rank,
        });
    }
    for p in parts {
        let compatible = p.rank() == rank
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(TensorError::Shape {
                op: "concat",
                left: first.shape.clone(),
                right: p.shape.clone(),
            });
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor { shape, data })
}

fn local_grads(nodes: &[Node], id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            let mut out = Vec::with_capacity(2);
            if nodes[*a].tracked {
                out.push((
                    *a,
                    Tensor {
                        shape: vec![m, k],
                        data: matmul_bt(&g.data, &bv.data, m, n, k),
                    },
                ));
            }
            if nodes[*b].tracked {
                out.push((
                    *b,
                    Tensor {
                        shape: vec![k, n],
                        data: matmul_at(&av.data, &g.data, m, k, n),
                    },
                ));
            }
            out
        }
        Op::Binary {
            kind,
            a,
            b,
            broadcast,
        } => {
            let (av, bv) = (val(*a), val(*b));
            let cols = bv.len();
            let bx = |i: usize| {
                if *broadcast {
                    bv.data[i % cols]
                } else {
                    bv.data[i]
                }
            };
            let ga: Tensor = match kind {
                Binary::Add | Binary::Sub => g.clone(),
                Binary::Mul => Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().enumerate().map(|(i, x)| x * bx(i)).collect(),
                },
                Binary::Div => Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().enumerate().map(|(i, x)| x / bx(i)).collect(),
                },
            };
            let gb_full: Tensor = match kind {
                Binary::Add => g.clone(),
                Binary::Sub => g.map(|x| -x),
                Binary::Mul => g.zip_map(av, |x, y| x * y),
                Binary::Div => Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, x)| -x * av.data[i] / (bx(i) * bx(i)))
                        .collect(),
                },
            };
            let gb = if *broadcast {
                Tensor {
                    shape: bv.shape.clone(),
                    data: sum_rows(&gb_full, cols),
                }
            } else {
                gb_full
            };
            vec![(*a, ga), (*b, gb)]
        }
        Op::Exp(a) => vec![(*a, g.zip_map(&node.value, |x, y| x * y))],
        Op::Log(a) => vec![(*a, g.zip_map(val(*a), |x, y| x / y))],
        Op::Neg(a) => vec![(*a, g.map(|x| -x))],
        Op::Scale(a, f) => vec![(*a, g.map(|x| x * f))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Sigmoid(a) => vec![(*a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s)))],
        Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 }))],
        Op::Abs(a) => vec![(
            *a,
            g.zip_map(val(*a), |x, y| {
                if y > 0.0 {
                    x
                } else if y < 0.0 {
                    -x
                } else {
                    0.0
                }
            }),
        )],
        Op::Sum { a, axis } => vec![(*a, expand_axis(g, &val(*a).shape, *axis, 1.0))],
        Op::Mean { a, axis, count } => vec![(
            *a,
            expand_axis(g, &val(*a).shape, *axis, 1.0 / *count as f64),
        )],
        Op::Concat { inputs, axis } => {
            let first = val(inputs[0]);
            let outer: usize = first.shape[..*axis].iter().product();
            let inner: usize = first.shape[*axis + 1..].iter().product();
            let total = node.value.shape[*axis];
            let mut offset = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for &i in inputs {
                let v = val(i);
                let ext = v.shape[*axis];
                let mut data = Vec::with_capacity(v.len());
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    data.extend_from_slice(&g.data[start..start + ext * inner]);
                }
                offset += ext;
                out.push((
                    i,
                    Tensor {
                        shape: v.shape.clone(),
                        data,
                    },
                ));
            }
            out
        }
        Op::RepeatRows(a) => {
            let av = val(*a);
            vec![(
                *a,
                Tensor {
                    shape: av.shape.clone(),
                    data: sum_rows(g, av.len()),
                },
            )]
        }
        Op::Transpose(a) => vec![(*a, g.transpose().expect("rank-2 gradient"))],
        Op::Reshape(a) => vec![(
            *a,
            Tensor {
                shape: val(*a).shape.clone(),
                data: g.data.clone(),
            },
        )],
        Op::LogSoftmax(a) => {
            let cols = node.value.cols();
            let mut data = Vec::with_capacity(g.len());
            for (grow, orow) in g.data.chunks(cols).zip(node.value.data.chunks(cols)) {
                let s: f64 = grow.iter().sum();
                data.extend(grow.iter().zip(orow).map(|(gi, lo)| gi - lo.exp() * s));
            }
            vec![(
                *a,
                Tensor {
                    shape: g.shape.clone(),
                    data,
                },
            )]
        }
        Op::IndexRows { a, index } => {
            let av = val(*a);
            let cols = av.shape[1];
            let mut data = vec![0.0; av.len()];
            for (r, &i) in index.iter().enumerate() {
                for c in 0..cols {
                    data[i * cols + c] += g.data[r * cols + c];
                }
            }
            vec![(
                *a,
                Tensor {
                    shape: av.shape.clone(),
                    data,
                },
            )]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    /// Central differences of `f` at `x`, step 1e-5.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn assert_close(analytic: &Tensor, numeric: &Tensor, tol: f64) {
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < tol, "analytic {a} vs numeric {n} (rel {rel})");
        }
    }

    fn check_unary(shape: &[usize], seed: u64, f: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(shape, &mut rng);
        let eval = |x: &Tensor| {
            let tape = Tape::new();
            let v = tape.constant(x.clone());
            f(v).unwrap().sum(None).unwrap().item()
        };
        let tape = Tape::new();
        let v = tape.param(x.clone());
        f(v).unwrap().sum(None).unwrap().backward().unwrap();
        assert_close(&tape.grad(v).unwrap(), &numeric_grad(&x, eval), 1e-4);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(
            e.matmul(&Tensor::zeros(&[2, 2])).unwrap(),
            Tensor::zeros(&[2, 2])
        );
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 3], &mut rng);
        let b = random(&[3, 3], &mut rng);
        let tape = Tape::new();
        let av = tape.param(a.clone());
        let bv = tape.param(b.clone());
        av.matmul(bv)
            .unwrap()
            .sum(None)
            .unwrap()
            .backward()
            .unwrap();
        let num_a = numeric_grad(&a, |a| a.matmul(&b).unwrap().sum());
        let num_b = numeric_grad(&b, |b| a.matmul(b).unwrap().sum());
        assert_close(&tape.grad(av).unwrap(), &num_a, 1e-4);
        assert_close(&tape.grad(bv).unwrap(), &num_b, 1e-4);
    }

    #[test]
    fn elementwise_values() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let z = tape.constant(Tensor::zeros(&[3]));
        assert_eq!(a.mul(z).unwrap().to_tensor().data(), &[0.0, 0.0, 0.0]);
        let zero = tape.constant(Tensor::vector(vec![0.0]));
        assert_eq!(zero.exp().unwrap().to_tensor().data(), &[1.0]);
    }

    #[test]
    fn elementwise_gradients() {
        let x = Tensor::vector(vec![0.3, -0.7]);
        let tape = Tape::new();
        let v = tape.param(x.clone());
        v.exp().unwrap().sum(None).unwrap().backward().unwrap();
        let num = numeric_grad(&x, |x| x.data().iter().map(|v| v.exp()).sum());
        assert_close(&tape.grad(v).unwrap(), &num, 1e-4);

        check_unary(&[2, 3], 2, |v| v.neg());
        check_unary(&[2, 3], 3, |v| v.scale(-1.7));
        check_unary(&[2, 3], 4, |v| v.sigmoid());
        check_unary(&[2, 3], 5, |v| v.mul(v)?.add_scalar(1.0)?.log());
        check_unary(&[2, 3], 6, |v| {
            let d = v.mul(v)?.add_scalar(0.5)?;
            v.div(d)
        });
        check_unary(&[3, 4], 7, |v| v.log_softmax());
        check_unary(&[3, 4], 8, |v| v.softmax()?.mul(v));
        check_unary(&[3, 4], 9, |v| v.transpose()?.mul(v.transpose()?));
    }

    #[test]
    fn broadcast_row_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random(&[4, 3], &mut rng);
        let b = random(&[1, 3], &mut rng).map(|x| x + 3.0);
        for kind in [Binary::Add, Binary::Sub, Binary::Mul, Binary::Div] {
            let run = |a: &Tensor, b: &Tensor, grads: bool| {
                let tape = Tape::new();
                let (av, bv) = if grads {
                    (tape.param(a.clone()), tape.param(b.clone()))
                } else {
                    (tape.constant(a.clone()), tape.constant(b.clone()))
                };
                let out = av.binary(bv, kind).unwrap();
                let loss = out.mul(out).unwrap().sum(None).unwrap();
                let value = loss.item();
                if grads {
                    loss.backward().unwrap();
                    (value, tape.grad(av), tape.grad(bv))
                } else {
                    (value, None, None)
                }
            };
            let (_, ga, gb) = run(&a, &b, true);
            assert_close(
                &ga.unwrap(),
                &numeric_grad(&a, |a| run(a, &b, false).0),
                1e-4,
            );
            assert_close(
                &gb.unwrap(),
                &numeric_grad(&b, |b| run(&a, b, false).0),
                1e-4,
            );
        }
    }

    #[test]
    fn broadcast_rejects_other_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[4, 3]));
        let col = tape.constant(Tensor::zeros(&[4, 1]));
        assert!(matches!(a.add(col), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn log_and_div_domain_errors() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(
            a.log(),
            Err(TensorError::Domain { op: "log", .. })
        ));
        let b = tape.constant(Tensor::vector(vec![2.0, 2.0]));
        assert!(matches!(
            b.div(a),
            Err(TensorError::Domain { op: "div", .. })
        ));
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(stable_sigmoid(0.0), 0.5);
        assert!((stable_sigmoid(-3.7) + stable_sigmoid(3.7) - 1.0).abs() < 1e-15);
        let s = stable_sigmoid(100.0);
        assert!(s > 1.0 - 1e-12 && s <= 1.0 && s.is_finite());
        for x in [-1e6, -745.0, -50.0, 50.0, 1e6] {
            let s = stable_sigmoid(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![2.0, 2.0], vec![4.0, 4.0]]).unwrap());
        assert_eq!(a.mean(Some(0)).unwrap().to_tensor().data(), &[3.0, 3.0]);
        let z = tape.constant(Tensor::zeros(&[3, 2]));
        assert_eq!(z.sum(None).unwrap().item(), 0.0);
        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(
            empty.mean(Some(0)),
            Err(TensorError::EmptyReduction { .. })
        ));
        assert!(matches!(a.sum(Some(2)), Err(TensorError::Axis { .. })));
        check_unary(&[4, 3], 11, |v| v.mean(Some(0))?.mul(v.mean(Some(0))?));
        check_unary(&[4, 3], 12, |v| v.mean(Some(1))?.exp());
        check_unary(&[4, 3], 13, |v| v.mean(None)?.exp());
    }

    #[test]
    fn concat_behaviour() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0]));
        let c = Var::concat(&[a, b], 0).unwrap();
        assert_eq!(c.to_tensor().data(), &[1.0, 2.0, 3.0]);
        let empty = tape.constant(Tensor::zeros(&[0]));
        assert_eq!(
            Var::concat(&[a, empty], 0).unwrap().to_tensor(),
            a.to_tensor()
        );

        let m = tape.constant(Tensor::zeros(&[2, 3]));
        let k = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(
            Var::concat(&[m, k], 1),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn concat_split_recovers_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let parts = [
            random(&[3, 2], &mut rng),
            random(&[3, 4], &mut rng),
            random(&[3, 1], &mut rng),
        ];
        let tape = Tape::new();
        let vars: Vec<_> = parts.iter().map(|p| tape.constant(p.clone())).collect();
        let out = Var::concat(&vars, 1).unwrap().to_tensor();
        let mut offset = 0;
        for p in &parts {
            let w = p.shape()[1];
            for r in 0..3 {
                assert_eq!(&out.row(r)[offset..offset + w], p.row(r));
            }
            offset += w;
        }
        check_unary(&[3, 2], 15, |v| {
            let e = v.exp()?;
            Var::concat(&[v, e, v], 1)?.mul(Var::concat(&[e, v, v], 1)?)
        });
        check_unary(&[3, 2], 16, |v| {
            let e = v.exp()?;
            Var::concat(&[v, e], 0)?.mul(Var::concat(&[e, v], 0)?)
        });
    }

    #[test]
    fn repeat_and_index_rows_gradients() {
        check_unary(&[1, 3], 17, |v| {
            let r = v.repeat_rows(4)?;
            r.mul(r)
        });
        check_unary(&[4, 3], 18, |v| {
            let r = v.index_rows(&[0, 2, 2, 3, 0])?;
            r.mul(r)?.exp()
        });
    }

    #[test]
    fn backward_simple_cases() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.param(Tensor::scalar(-1.0));
        let loss = x.mul(x).unwrap();
        loss.backward().unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
        assert_eq!(tape.grad(y).unwrap().item(), 0.0);
        // accumulation without reset
        loss.backward().unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 12.0);
        tape.zero_grad();
        assert_eq!(tape.grad(x).unwrap().item(), 0.0);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(
            x.backward().unwrap_err(),
            TensorError::NonScalarLoss(vec![2])
        );
        let s = x.sum(None).unwrap();
        tape.reset();
        assert!(matches!(s.backward(), Err(TensorError::Tape(_))));
        assert!(matches!(s.exp(), Err(TensorError::Tape(_))));
    }

    #[test]
    fn backward_is_linear_over_sub_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = random(&[3, 2], &mut rng);
        fn f1(v: Var<'_>) -> Var<'_> {
            v.exp().unwrap().sum(None).unwrap()
        }
        fn f2(v: Var<'_>) -> Var<'_> {
            v.mul(v).unwrap().sum(None).unwrap()
        }

        let tape = Tape::new();
        let v = tape.param(x.clone());
        f1(v).add(f2(v)).unwrap().backward().unwrap();
        let joint = tape.grad(v).unwrap();

        let tape = Tape::new();
        let v = tape.param(x.clone());
        f1(v).backward().unwrap();
        f2(v).backward().unwrap();
        let separate = tape.grad(v).unwrap();
        for (a, b) in joint.data().iter().zip(separate.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
