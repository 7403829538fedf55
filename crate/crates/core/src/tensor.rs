//! Dense row-major tensors and the numeric kernels every other module builds on.
//!
//! Every kernel checks shapes up front and returns a [`TensorError`] instead of
//! panicking. Kernels are sequential: the accumulation order of every reduction
//! is fixed, so results are reproducible bit-for-bit.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use thiserror::Error;

/// Storage precision tag, shared with the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Floating point element type. Training runs in `f32`, verification in `f64`.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("data length {data} does not match shape {shape:?} ({expected} elements)")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        data: usize,
    },
    #[error("shape {0:?} must be non-empty with positive extents")]
    InvalidShape(Vec<usize>),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("division by zero at element {0}")]
    DivisionByZero(usize),
    #[error("{op} produced a non-finite value at element {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("invalid axis {axis} for a rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("invalid geometry: {0}")]
    Geometry(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Dense row-major N-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp<T> {
    Neg,
    Relu,
    Exp,
    Log,
    Clamp { lo: T, hi: T },
}

/// Right-hand side of a binary element-wise op: a same-shape tensor or a scalar.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

impl<'a, T> From<&'a Tensor<T>> for Operand<'a, T> {
    fn from(t: &'a Tensor<T>) -> Self {
        Operand::Tensor(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    /// Flat index of the maximum inside the reduced block; ties go to the lowest index.
    Argmax,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected = check_shape(shape)?;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                data: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Same-shape tensor filled with `value`. Never fails because `self` is valid.
    pub fn full_like(&self, value: T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![value; self.data.len()],
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.full_like(T::zero())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        if index.len() != self.shape.len() {
            return Err(TensorError::ShapeMismatch {
                op: "get",
                lhs: self.shape.clone(),
                rhs: index.to_vec(),
            });
        }
        let mut flat = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            if i >= extent {
                return Err(TensorError::IndexOutOfRange { index: i, extent });
            }
            flat = flat * extent + i;
        }
        Ok(self.data[flat])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected: n,
                data: self.data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(TensorError::Geometry(format!(
                "{op} expects a rank-{rank} tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    // ---- element-wise -------------------------------------------------------

    pub fn binary<'a>(&self, op: BinaryOp, rhs: impl Into<Operand<'a, T>>) -> Result<Self> {
        let rhs = rhs.into();
        let apply = |a: T, b: T, i: usize| -> Result<T> {
            let v = match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
                BinaryOp::Div => {
                    if b == T::zero() {
                        return Err(TensorError::DivisionByZero(i));
                    }
                    a / b
                }
            };
            Ok(v)
        };
        let data = match rhs {
            Operand::Tensor(b) => {
                self.expect_same_shape(binary_name(op), b)?;
                self.data
                    .iter()
                    .zip(&b.data)
                    .enumerate()
                    .map(|(i, (&x, &y))| apply(x, y, i))
                    .collect::<Result<Vec<_>>>()?
            }
            Operand::Scalar(s) => self
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| apply(x, s, i))
                .collect::<Result<Vec<_>>>()?,
        };
        Self::finite_or_err(binary_name(op), self.shape.clone(), data)
    }

    pub fn unary(&self, op: UnaryOp<T>) -> Result<Self> {
        let data: Vec<T> = match op {
            UnaryOp::Neg => self.data.iter().map(|&v| -v).collect(),
            UnaryOp::Relu => self.data.iter().map(|&v| relu(v)).collect(),
            UnaryOp::Exp => self.data.iter().map(|&v| v.exp()).collect(),
            UnaryOp::Log => self
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if v <= T::zero() {
                        Err(TensorError::NonFinite { op: "log", index: i })
                    } else {
                        Ok(v.ln())
                    }
                })
                .collect::<Result<_>>()?,
            UnaryOp::Clamp { lo, hi } => self.data.iter().map(|&v| v.max(lo).min(hi)).collect(),
        };
        Self::finite_or_err(unary_name(&op), self.shape.clone(), data)
    }

    fn finite_or_err(op: &'static str, shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op, index });
        }
        Ok(Self { shape, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Div, other)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn relu(&self) -> Self {
        self.map(relu)
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn transpose(&self) -> Result<Self> {
        self.expect_rank("transpose", 2)?;
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); self.data.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Ok(Self {
            shape: vec![cols, rows],
            data: out,
        })
    }

    /// `[M,K] x [K,P] -> [M,P]`.
    ///
    /// Each output element accumulates its K products in increasing `k`,
    /// starting from zero, exactly like the textbook triple loop.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.expect_rank("matmul", 2)?;
        other.expect_rank("matmul", 2)?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, p) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * p];
        gemm(&self.data, &other.data, &mut out, m, k, p);
        Ok(Self {
            shape: vec![m, p],
            data: out,
        })
    }

    // ---- reductions ---------------------------------------------------------

    /// Reduces over `axes`, removing them from the shape. Reducing every axis
    /// yields shape `[1]`.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(TensorError::InvalidAxis { axis, rank });
            }
            reduced[axis] = true;
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&e, _)| e)
            .collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let out_len: usize = out_shape.iter().product();
        let block: usize = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&e, _)| e)
            .product();

        let mut acc = vec![T::zero(); out_len];
        let mut best = vec![T::neg_infinity(); out_len];
        let mut best_at = vec![0usize; out_len];
        let mut seen = vec![0usize; out_len];
        let strides = strides(&self.shape);
        let out_strides = strides_for_kept(&self.shape, &reduced);
        for (flat, &v) in self.data.iter().enumerate() {
            let mut o = 0;
            for (axis, &stride) in strides.iter().enumerate() {
                if !reduced[axis] {
                    o += ((flat / stride) % self.shape[axis]) * out_strides[axis];
                }
            }
            match op {
                ReduceOp::Sum | ReduceOp::Mean => acc[o] += v,
                ReduceOp::Max | ReduceOp::Argmax => {
                    if v > best[o] {
                        best[o] = v;
                        best_at[o] = seen[o];
                    }
                }
            }
            seen[o] += 1;
        }
        let data = match op {
            ReduceOp::Sum => acc,
            ReduceOp::Mean => {
                let n = T::lit(block as f64);
                acc.into_iter().map(|v| v / n).collect()
            }
            ReduceOp::Max => best,
            ReduceOp::Argmax => best_at.into_iter().map(|i| T::lit(i as f64)).collect(),
        };
        Ok(Self { shape: out_shape, data })
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::lit(self.data.len() as f64)
    }

    /// Row-wise argmax over the last axis, ties toward the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = *self.shape.last().expect("shape is non-empty");
        self.data
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_rows(&self) -> Self {
        let cols = *self.shape.last().expect("shape is non-empty");
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(cols) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let total = exps.iter().fold(T::zero(), |a, &b| a + b);
            data.extend(exps.into_iter().map(|e| e / total));
        }
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax_rows(&self) -> Self {
        let cols = *self.shape.last().expect("shape is non-empty");
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(cols) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let total = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
            let log_z = max + total.ln();
            data.extend(row.iter().map(|&v| v - log_z));
        }
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    // ---- batch-axis gather / scatter --------------------------------------

    fn slice_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    /// Copies the leading-axis slices named by `indices`, in order.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(TensorError::InvalidShape(vec![0]));
        }
        let len = self.slice_len();
        let mut data = Vec::with_capacity(len * indices.len());
        for &i in indices {
            if i >= self.shape[0] {
                return Err(TensorError::IndexOutOfRange {
                    index: i,
                    extent: self.shape[0],
                });
            }
            data.extend_from_slice(&self.data[i * len..(i + 1) * len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    /// Returns a copy of `self` where slice `indices[j]` is replaced by slice
    /// `j` of `src`. Later duplicates overwrite earlier ones.
    pub fn with_scattered(&self, src: &Self, indices: &[usize]) -> Result<Self> {
        let mut out = self.clone();
        out.scatter_into(src, indices)?;
        Ok(out)
    }

    /// In-place form of [`Tensor::with_scattered`].
    pub fn scatter_into(&mut self, src: &Self, indices: &[usize]) -> Result<()> {
        if src.shape[0] != indices.len() || src.shape[1..] != self.shape[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_batch",
                lhs: self.shape.clone(),
                rhs: src.shape.clone(),
            });
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.shape[0]) {
            return Err(TensorError::IndexOutOfRange {
                index: i,
                extent: self.shape[0],
            });
        }
        let len = self.slice_len();
        for (j, &i) in indices.iter().enumerate() {
            self.data[i * len..(i + 1) * len].copy_from_slice(&src.data[j * len..(j + 1) * len]);
        }
        Ok(())
    }

    /// Inverse of [`Tensor::gather_batch`] for a permutation: slice `j` of
    /// `src` lands at `indices[j]` in a tensor with `indices.len()` slices.
    pub fn scatter_batch(src: &Self, indices: &[usize]) -> Result<Self> {
        let base = Self::zeros(src.shape())?;
        base.with_scattered(src, indices)
    }

    /// One slice along the leading axis, keeping the axis with extent 1.
    pub fn slice_batch(&self, index: usize) -> Result<Self> {
        self.gather_batch(&[index])
    }

    // ---- channel helpers for [B,C,...] tensors -----------------------------

    /// Concatenates along axis 1.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        if self.rank() < 2
            || self.rank() != other.rank()
            || self.shape[0] != other.shape[0]
            || self.shape[2..] != other.shape[2..]
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let batch = self.shape[0];
        let (la, lb) = (self.slice_len(), other.slice_len());
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for b in 0..batch {
            data.extend_from_slice(&self.data[b * la..(b + 1) * la]);
            data.extend_from_slice(&other.data[b * lb..(b + 1) * lb]);
        }
        let mut shape = self.shape.clone();
        shape[1] += other.shape[1];
        Ok(Self { shape, data })
    }

    /// Channels `[start, start+len)` along axis 1.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        if self.rank() < 2 || len == 0 || start + len > self.shape[1] {
            return Err(TensorError::Geometry(format!(
                "channel slice {start}..{} out of range for {:?}",
                start + len,
                self.shape
            )));
        }
        let inner: usize = self.shape[2..].iter().product();
        let channels = self.shape[1];
        let mut data = Vec::with_capacity(self.shape[0] * len * inner);
        for b in 0..self.shape[0] {
            let base = (b * channels + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = len;
        Ok(Self { shape, data })
    }

    /// `[B,C] -> [B,C,H,W]` by repeating each value over the spatial grid.
    pub fn broadcast_spatial(&self, height: usize, width: usize) -> Result<Self> {
        self.expect_rank("broadcast_spatial", 2)?;
        check_shape(&[height, width])?;
        let hw = height * width;
        let mut data = Vec::with_capacity(self.data.len() * hw);
        for &v in &self.data {
            data.extend(std::iter::repeat_n(v, hw));
        }
        Ok(Self {
            shape: vec![self.shape[0], self.shape[1], height, width],
            data,
        })
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Self> {
        self.expect_rank("global_avg_pool", 4)?;
        let hw = self.shape[2] * self.shape[3];
        let n = T::lit(hw as f64);
        let data = self
            .data
            .chunks(hw)
            .map(|c| c.iter().fold(T::zero(), |a, &b| a + b) / n)
            .collect();
        Ok(Self {
            shape: vec![self.shape[0], self.shape[1]],
            data,
        })
    }
}

#[inline]
fn relu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

fn binary_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}

fn unary_name<T>(op: &UnaryOp<T>) -> &'static str {
    match op {
        UnaryOp::Neg => "neg",
        UnaryOp::Relu => "relu",
        UnaryOp::Exp => "exp",
        UnaryOp::Log => "log",
        UnaryOp::Clamp { .. } => "clamp",
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn strides_for_kept(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if !reduced[i] {
            s[i] = acc;
            acc *= shape[i];
        }
    }
    s
}

/// Column tile width; keeps a `[K, TILE]` panel of `b` resident in cache.
const GEMM_TILE: usize = 256;

/// `out[M,P] += a[M,K] * b[K,P]`, row-major, accumulating over `k` in order.
pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    let mut j0 = 0;
    while j0 < p {
        let j1 = (j0 + GEMM_TILE).min(p);
        let width = j1 - j0;
        let mut i = 0;
        // Four output rows at a time so each `b` element is loaded once per
        // four multiply-adds. Per-element accumulation order is unchanged.
        while i + 4 <= m {
            let (r0, rest) = out[i * p..(i + 4) * p].split_at_mut(p);
            let (r1, rest) = rest.split_at_mut(p);
            let (r2, r3) = rest.split_at_mut(p);
            let (r0, r1, r2, r3) = (&mut r0[j0..j1], &mut r1[j0..j1], &mut r2[j0..j1], &mut r3[j0..j1]);
            for kk in 0..k {
                let (a0, a1, a2, a3) = (
                    a[i * k + kk],
                    a[(i + 1) * k + kk],
                    a[(i + 2) * k + kk],
                    a[(i + 3) * k + kk],
                );
                let b_row = &b[kk * p + j0..kk * p + j1];
                for j in 0..width {
                    let bv = b_row[j];
                    r0[j] += a0 * bv;
                    r1[j] += a1 * bv;
                    r2[j] += a2 * bv;
                    r3[j] += a3 * bv;
                }
            }
            i += 4;
        }
        for i in i..m {
            let out_row = &mut out[i * p + j0..i * p + j1];
            let a_row = &a[i * k..(i + 1) * k];
            for (kk, &aik) in a_row.iter().enumerate() {
                let b_row = &b[kk * p + j0..kk * p + j1];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bv;
                }
            }
        }
        j0 = j1;
    }
}

// ---- convolution & pooling ------------------------------------------------

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        input.expect_rank("conv2d input", 4)?;
        weight.expect_rank("conv2d weight", 4)?;
        let [batch, in_channels, height, width] = input.shape[..] else {
            unreachable!()
        };
        let [out_channels, w_in, kh, kw] = weight.shape[..] else {
            unreachable!()
        };
        if w_in != in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: input.shape.clone(),
                rhs: weight.shape.clone(),
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::Geometry(format!(
                "kernel must be square with odd extent, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::Geometry("stride must be positive".into()));
        }
        let out_extent = |n: usize| -> Result<usize> {
            let padded = n + 2 * padding;
            if padded < kh {
                return Err(TensorError::Geometry(format!(
                    "kernel {kh} larger than padded extent {padded}"
                )));
            }
            Ok((padded - kh) / stride + 1)
        };
        Ok(Self {
            batch,
            in_channels,
            out_channels,
            height,
            width,
            kernel: kh,
            stride,
            padding,
            out_height: out_extent(height)?,
            out_width: out_extent(width)?,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`, if inside.
    #[cfg(test)]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some((y, x))
    }

    /// Output positions along one axis whose tap `tap` lands inside an input
    /// of length `input`.
    fn valid_outputs(&self, tap: usize, input: usize, output: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let lo = self.padding.saturating_sub(tap).div_ceil(s);
        let hi = (input + self.padding).saturating_sub(tap).div_ceil(s).min(output);
        lo.min(hi)..hi
    }
}

/// Unfolds the whole batch into `[Cin*k*k, B*H'*W']` columns.
fn im2col<T: Real>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.batch * g.out_pixels();
    let mut out = vec![T::zero(); g.patch_len() * cols];
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            let oys = g.valid_outputs(ky, g.height, g.out_height);
            for kx in 0..g.kernel {
                let oxs = g.valid_outputs(kx, g.width, g.out_width);
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let src = &input[(b * g.in_channels + c) * plane..][..plane];
                    for oy in oys.clone() {
                        let y = oy * g.stride + ky - g.padding;
                        let src_row = &src[y * g.width..][..g.width];
                        let dst_row = &mut dst[(b * g.out_height + oy) * g.out_width..][..g.out_width];
                        if g.stride == 1 {
                            let x0 = oxs.start + kx - g.padding;
                            dst_row[oxs.clone()].copy_from_slice(&src_row[x0..x0 + oxs.len()]);
                        } else {
                            for ox in oxs.clone() {
                                dst_row[ox] = src_row[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Folds `[Cin*k*k, B*H'*W']` columns back into an input-shaped gradient.
fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let ncols = g.batch * g.out_pixels();
    let plane = g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.in_channels * plane];
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            let oys = g.valid_outputs(ky, g.height, g.out_height);
            for kx in 0..g.kernel {
                let oxs = g.valid_outputs(kx, g.width, g.out_width);
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut out[(b * g.in_channels + c) * plane..][..plane];
                    for oy in oys.clone() {
                        let y = oy * g.stride + ky - g.padding;
                        let dst_row = &mut dst[y * g.width..][..g.width];
                        let src_row = &src[(b * g.out_height + oy) * g.out_width..][..g.out_width];
                        for ox in oxs.clone() {
                            dst_row[ox * g.stride + kx - g.padding] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[Cout, B*P] -> [B, Cout, P]`
fn channel_major_to_batch<T: Real>(src: &[T], batch: usize, channels: usize, pixels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for c in 0..channels {
        for b in 0..batch {
            let s = &src[c * batch * pixels + b * pixels..][..pixels];
            out[(b * channels + c) * pixels..][..pixels].copy_from_slice(s);
        }
    }
    out
}

/// `[B, Cout, P] -> [Cout, B*P]`
fn batch_to_channel_major<T: Real>(src: &[T], batch: usize, channels: usize, pixels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        for c in 0..channels {
            let s = &src[(b * channels + c) * pixels..][..pixels];
            out[c * batch * pixels + b * pixels..][..pixels].copy_from_slice(s);
        }
    }
    out
}

fn transpose_raw<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Cross-correlation with zero padding: `[B,Cin,H,W] * [Cout,Cin,k,k] -> [B,Cout,H',W']`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.shape != [g.out_channels] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![g.out_channels],
                rhs: b.shape.clone(),
            });
        }
    }
    let cols = im2col(&input.data, &g);
    let ncols = g.batch * g.out_pixels();
    let mut out = vec![T::zero(); g.out_channels * ncols];
    gemm(&weight.data, &cols, &mut out, g.out_channels, g.patch_len(), ncols);
    if let Some(b) = bias {
        for (c, &bv) in b.data.iter().enumerate() {
            for v in &mut out[c * ncols..(c + 1) * ncols] {
                *v += bv;
            }
        }
    }
    let data = channel_major_to_batch(&out, g.batch, g.out_channels, g.out_pixels());
    Ok(Tensor {
        shape: vec![g.batch, g.out_channels, g.out_height, g.out_width],
        data,
    })
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input, weight, stride, padding)?;
    let expected = [g.batch, g.out_channels, g.out_height, g.out_width];
    if grad_out.shape != expected {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            lhs: expected.to_vec(),
            rhs: grad_out.shape.clone(),
        });
    }
    let ncols = g.batch * g.out_pixels();
    let k = g.patch_len();
    let dout = batch_to_channel_major(&grad_out.data, g.batch, g.out_channels, g.out_pixels());

    let bias = dout
        .chunks(ncols)
        .map(|row| row.iter().fold(T::zero(), |a, &b| a + b))
        .collect();

    let cols = im2col(&input.data, &g);
    let cols_t = transpose_raw(&cols, k, ncols);
    let mut dweight = vec![T::zero(); g.out_channels * k];
    gemm(&dout, &cols_t, &mut dweight, g.out_channels, ncols, k);

    let w_t = transpose_raw(&weight.data, g.out_channels, k);
    let mut dcols = vec![T::zero(); k * ncols];
    gemm(&w_t, &dout, &mut dcols, k, g.out_channels, ncols);
    let dinput = col2im(&dcols, &g);

    Ok(ConvGrads {
        input: Tensor {
            shape: input.shape.clone(),
            data: dinput,
        },
        weight: Tensor {
            shape: weight.shape.clone(),
            data: dweight,
        },
        bias: Tensor {
            shape: vec![g.out_channels],
            data: bias,
        },
    })
}

/// Non-overlapping `size x size` max pooling. Returns the pooled tensor and,
/// for each output element, the flat input index that won (lowest on ties).
pub fn max_pool2d<T: Real>(input: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    input.expect_rank("max_pool2d", 4)?;
    let [b, c, h, w] = input.shape[..] else { unreachable!() };
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(TensorError::Geometry(format!(
            "pool size {size} must divide spatial extent {h}x{w}"
        )));
    }
    let (oh, ow) = (h / size, w / size);
    let mut data = Vec::with_capacity(b * c * oh * ow);
    let mut winners = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if input.data[idx] > input.data[best_idx] {
                            best_idx = idx;
                        }
                    }
                }
                data.push(input.data[best_idx]);
                winners.push(best_idx);
            }
        }
    }
    Ok((
        Tensor {
            shape: vec![b, c, oh, ow],
            data,
        },
        winners,
    ))
}
