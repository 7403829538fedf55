//! Tape-based reverse-mode differentiation over [`Tensor`] kernels.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order. [`Tape::backward`] walks the records in strict reverse order,
//! summing gradient contributions at shared nodes. A tape is consumed by its
//! first backward pass; a second call is an error.
//!
//! ```
//! use paa_core::autodiff::Tape;
//! use paa_core::tensor::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(&[1], vec![3.0]).unwrap(), true);
//! let y = x.mul(x).unwrap().sum_all();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use thiserror::Error;

use crate::tensor::{self, Real, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("output does not depend on any variable that requires gradients")]
    Detached,
    #[error("variable belongs to a different tape")]
    ForeignVariable,
    #[error("tape was already consumed by a previous backward pass")]
    Consumed,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

/// Backward rule: maps the output gradient to one gradient per parent.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> tensor::Result<Vec<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Operation record for one differentiation pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients of one backward pass, keyed by leaf node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| var.value().zeros_like())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Rc::new(value), Vec::new(), None, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(
        &self,
        value: Rc<Tensor<T>>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records an operation with a caller-supplied backward rule. The rule must
    /// return one gradient per parent, each shaped like that parent's value.
    pub fn custom<'t>(
        &'t self,
        parents: &[Var<'t, T>],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var<'t, T>> {
        for p in parents {
            self.own(*p)?;
        }
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = ids.iter().any(|&id| self.requires_grad(id));
        let backward = requires_grad.then_some(backward);
        Ok(self.push(Rc::new(value), ids, backward, requires_grad))
    }

    fn own(&self, var: Var<'_, T>) -> Result<()> {
        if std::ptr::eq(var.tape, self) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVariable)
        }
    }

    /// Reverse pass from a scalar output. Returns gradients for every leaf
    /// that requires them. Consumes the tape.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        self.own(output)?;
        if self.consumed.get() {
            return Err(AutodiffError::Consumed);
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(AutodiffError::NonScalarOutput(out.value.shape().to_vec()));
        }
        if !out.requires_grad {
            return Err(AutodiffError::Detached);
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.id + 1];
        grads[output.id] = Some(out.value.full_like(T::one()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = rule(&g)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                if pg.shape() != nodes[p].value.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "backward rule",
                        lhs: nodes[p].value.shape().to_vec(),
                        rhs: pg.shape().to_vec(),
                    }
                    .into());
                }
                grads[p] = Some(match grads[p].take() {
                    Some(acc) => acc.add(&pg)?,
                    None => pg,
                });
            }
        }
        Ok(Gradients { grads })
    }
}

/// Sums `[.., C, S]`-laid-out values per channel for a tensor of shape
/// `[B, C, spatial..]`.
fn per_channel_sum<T: Real>(values: &[T], channels: usize, spatial: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for (i, &v) in values.iter().enumerate() {
        out[(i / spatial) % channels] += v;
    }
    out
}

fn channel_layout<T: Real>(x: &Tensor<T>) -> tensor::Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(TensorError::Geometry(format!(
            "channel op expects [B, C, ..], got {:?}",
            x.shape()
        )));
    }
    let spatial: usize = x.shape()[2..].iter().product();
    Ok((x.shape()[0], x.shape()[1], spatial))
}

// Fallible arithmetic, so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn unary(self, value: Tensor<T>, backward: BackwardFn<T>) -> Var<'t, T> {
        let requires_grad = self.requires_grad();
        self.tape.push(
            Rc::new(value),
            vec![self.id],
            requires_grad.then_some(backward),
            requires_grad,
        )
    }

    fn nary(self, others: &[Var<'t, T>], value: Tensor<T>, backward: BackwardFn<T>) -> Result<Var<'t, T>> {
        let mut parents = vec![self];
        parents.extend_from_slice(others);
        self.tape.custom(&parents, value, backward)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = self.value().add(&other.value())?;
        self.nary(&[other], value, Box::new(|g| Ok(vec![g.clone(), g.clone()])))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = self.value().sub(&other.value())?;
        self.nary(&[other], value, Box::new(|g| Ok(vec![g.clone(), g.scale(-T::one())])))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let value = a.mul(&b)?;
        self.nary(&[other], value, Box::new(move |g| Ok(vec![g.mul(&b)?, g.mul(&a)?])))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let value = self.value().scale(s);
        self.unary(value, Box::new(move |g| Ok(vec![g.scale(s)])))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    /// Subgradient 0 at the kink.
    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let value = x.relu();
        self.unary(
            value,
            Box::new(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                Ok(vec![Tensor::new(g.shape(), data)?])
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let original = self.shape();
        let value = self.value().reshape(shape)?;
        Ok(self.unary(value, Box::new(move |g| Ok(vec![g.reshape(&original)?]))))
    }

    /// `[B, ...] -> [B, prod(...)]`
    pub fn flatten(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let rest: usize = shape[1..].iter().product();
        self.reshape(&[shape[0], rest])
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let value = a.matmul(&b)?;
        self.nary(
            &[other],
            value,
            Box::new(move |g| {
                let da = g.matmul(&b.transpose()?)?;
                let db = a.transpose()?.matmul(g)?;
                Ok(vec![da, db])
            }),
        )
    }

    /// `x[B,in] * weight[out,in]^T + bias[out]`
    pub fn linear(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let out_features = w.shape()[0];
        if bias.shape() != [out_features] {
            return Err(TensorError::ShapeMismatch {
                op: "linear bias",
                lhs: vec![out_features],
                rhs: bias.shape(),
            }
            .into());
        }
        let mut value = x.matmul(&w.transpose()?)?;
        let b = bias.value();
        for row in value.data_mut().chunks_mut(out_features) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        self.nary(
            &[weight, bias],
            value,
            Box::new(move |g| {
                let dx = g.matmul(&w)?;
                let dw = g.transpose()?.matmul(&x)?;
                let db = g.reduce(tensor::ReduceOp::Sum, &[0])?;
                Ok(vec![dx, dw, db])
            }),
        )
    }

    pub fn conv2d(self, weight: Var<'t, T>, bias: Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let value = tensor::conv2d(&x, &w, Some(&bias.value()), stride, padding)?;
        self.nary(
            &[weight, bias],
            value,
            Box::new(move |g| {
                let grads = tensor::conv2d_backward(&x, &w, g, stride, padding)?;
                Ok(vec![grads.input, grads.weight, grads.bias])
            }),
        )
    }

    /// Training-mode batch normalisation over every axis except 1. Returns the
    /// normalised output plus the biased batch mean and variance per channel.
    pub fn batch_norm_train(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<(Var<'t, T>, Vec<T>, Vec<T>)> {
        let x = self.value();
        let (batch, channels, spatial) = channel_layout(&x)?;
        if gamma.shape() != [channels] || beta.shape() != [channels] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: vec![channels],
                rhs: gamma.shape(),
            }
            .into());
        }
        let count = T::lit((batch * spatial) as f64);
        let sums = per_channel_sum(x.data(), channels, spatial);
        let mean: Vec<T> = sums.iter().map(|&s| s / count).collect();
        let sq: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let d = v - mean[(i / spatial) % channels];
                d * d
            })
            .collect();
        let var: Vec<T> = per_channel_sum(&sq, channels, spatial)
            .into_iter()
            .map(|s| s / count)
            .collect();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / spatial) % channels;
                (v - mean[c]) * inv_std[c]
            })
            .collect();
        let (gv, bv) = (gamma.value(), beta.value());
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let c = (i / spatial) % channels;
                gv.data()[c] * h + bv.data()[c]
            })
            .collect();
        let value = Tensor::new(x.shape(), out)?;
        let shape = x.shape().to_vec();
        let y = self.nary(
            &[gamma, beta],
            value,
            Box::new(move |g| {
                let gd = g.data();
                let dbeta = per_channel_sum(gd, channels, spatial);
                let gx: Vec<T> = gd.iter().zip(&xhat).map(|(&a, &b)| a * b).collect();
                let dgamma = per_channel_sum(&gx, channels, spatial);
                // dxhat = g * gamma; sum(dxhat) = gamma*dbeta; sum(dxhat*xhat) = gamma*dgamma
                let dx: Vec<T> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let c = (i / spatial) % channels;
                        let gamma_c = gv.data()[c];
                        let dxhat = gi * gamma_c;
                        inv_std[c] / count * (count * dxhat - gamma_c * dbeta[c] - xhat[i] * gamma_c * dgamma[c])
                    })
                    .collect();
                Ok(vec![
                    Tensor::new(&shape, dx)?,
                    Tensor::new(&[channels], dgamma)?,
                    Tensor::new(&[channels], dbeta)?,
                ])
            }),
        )?;
        Ok((y, mean, var))
    }

    /// Inference-mode batch normalisation with fixed statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let (_, channels, spatial) = channel_layout(&x)?;
        if gamma.shape() != [channels] || beta.shape() != [channels] || mean.len() != channels {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: vec![channels],
                rhs: gamma.shape(),
            }
            .into());
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / spatial) % channels;
                (v - mean[c]) * inv_std[c]
            })
            .collect();
        let (gv, bv) = (gamma.value(), beta.value());
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let c = (i / spatial) % channels;
                gv.data()[c] * h + bv.data()[c]
            })
            .collect();
        let value = Tensor::new(x.shape(), out)?;
        let shape = x.shape().to_vec();
        self.nary(
            &[gamma, beta],
            value,
            Box::new(move |g| {
                let gd = g.data();
                let dbeta = per_channel_sum(gd, channels, spatial);
                let gx: Vec<T> = gd.iter().zip(&xhat).map(|(&a, &b)| a * b).collect();
                let dgamma = per_channel_sum(&gx, channels, spatial);
                let dx: Vec<T> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let c = (i / spatial) % channels;
                        gi * gv.data()[c] * inv_std[c]
                    })
                    .collect();
                Ok(vec![
                    Tensor::new(&shape, dx)?,
                    Tensor::new(&[channels], dgamma)?,
                    Tensor::new(&[channels], dbeta)?,
                ])
            }),
        )
    }

    /// Gradient is routed to the lowest-index maximum of each window.
    pub fn max_pool2d(self, size: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (value, winners) = tensor::max_pool2d(&x, size)?;
        let shape = x.shape().to_vec();
        Ok(self.unary(
            value,
            Box::new(move |g| {
                let mut dx = Tensor::zeros(&shape)?;
                let d = dx.data_mut();
                for (&w, &gv) in winners.iter().zip(g.data()) {
                    d[w] += gv;
                }
                Ok(vec![dx])
            }),
        ))
    }

    /// `[B,C,H,W] -> [B,C]`
    pub fn global_avg_pool(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let value = x.global_avg_pool()?;
        let [_, _, h, w] = x.shape()[..] else { unreachable!() };
        let n = T::lit((h * w) as f64);
        Ok(self.unary(
            value,
            Box::new(move |g| {
                let up = g.broadcast_spatial(h, w)?;
                Ok(vec![up.map(|v| v / n)])
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t, T> {
        let p = Rc::new(self.value().softmax_rows());
        let p2 = p.clone();
        let cols = *p.shape().last().expect("non-empty shape");
        self.unary(
            (*p).clone(),
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(g.numel());
                for (grow, prow) in g.data().chunks(cols).zip(p2.data().chunks(cols)) {
                    let dot = grow.iter().zip(prow).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    dx.extend(grow.iter().zip(prow).map(|(&gv, &pv)| pv * (gv - dot)));
                }
                Ok(vec![Tensor::new(g.shape(), dx)?])
            }),
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t, T> {
        let x = self.value();
        let value = x.log_softmax_rows();
        let p = x.softmax_rows();
        let cols = *p.shape().last().expect("non-empty shape");
        self.unary(
            value,
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(g.numel());
                for (grow, prow) in g.data().chunks(cols).zip(p.data().chunks(cols)) {
                    let total = grow.iter().fold(T::zero(), |a, &v| a + v);
                    dx.extend(grow.iter().zip(prow).map(|(&gv, &pv)| gv - pv * total));
                }
                Ok(vec![Tensor::new(g.shape(), dx)?])
            }),
        )
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let shape = self.shape();
        let value = Tensor::scalar(self.value().sum_all());
        self.unary(value, Box::new(move |g| Ok(vec![Tensor::full(&shape, g.data()[0])?])))
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.value().numel();
        self.sum_all().scale(T::one() / T::lit(n as f64))
    }

    /// `[M, C] -> [M]` sum over the last axis.
    pub fn sum_rows(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(TensorError::Geometry(format!("sum_rows expects rank 2, got {:?}", x.shape())).into());
        }
        let cols = x.shape()[1];
        let value = x.reduce(tensor::ReduceOp::Sum, &[1])?;
        let shape = x.shape().to_vec();
        Ok(self.unary(
            value,
            Box::new(move |g| {
                let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
                Ok(vec![Tensor::new(&shape, data)?])
            }),
        ))
    }

    /// `[M, C]` with one column index per row `-> [M]`.
    pub fn pick(self, columns: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != columns.len() {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: x.shape().to_vec(),
                rhs: vec![columns.len()],
            }
            .into());
        }
        let cols = x.shape()[1];
        if let Some(&bad) = columns.iter().find(|&&c| c >= cols) {
            return Err(TensorError::IndexOutOfRange {
                index: bad,
                extent: cols,
            }
            .into());
        }
        let data = columns
            .iter()
            .enumerate()
            .map(|(r, &c)| x.data()[r * cols + c])
            .collect();
        let value = Tensor::new(&[columns.len()], data)?;
        let shape = x.shape().to_vec();
        let columns = columns.to_vec();
        Ok(self.unary(
            value,
            Box::new(move |g| {
                let mut dx = Tensor::zeros(&shape)?;
                let d = dx.data_mut();
                for (r, &c) in columns.iter().enumerate() {
                    d[r * cols + c] += g.data()[r];
                }
                Ok(vec![dx])
            }),
        ))
    }
}

/// Worst coordinate-wise relative error between the tape gradient of `f` at
/// `x` and a central difference with step `eps`:
/// `|analytic - numeric| / (|analytic| + eps)`. A NaN anywhere yields NaN.
pub fn finite_diff_check<F, E>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>, E>,
    E: From<AutodiffError>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&tape, xv)?;
    let analytic = tape.backward(y).map_err(E::from)?.get_or_zeros(xv);

    let eval = |probe: Tensor<f64>| -> Result<f64, E> {
        let tape = Tape::new();
        let v = tape.leaf(probe, false);
        let out = f(&tape, v)?.value();
        Ok(out.item().unwrap_or(f64::NAN))
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + eps);
        if err.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
