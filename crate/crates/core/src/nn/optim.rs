use super::{NnError, Result};
use crate::tensor::{Real, Tensor, TensorError};

/// Plain SGD update `w <- w - lr * (g + weight_decay * w)`.
pub fn sgd_step<T: Real>(params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: T, weight_decay: T) -> Result<()> {
    check_pairs(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * (gv + weight_decay * *w);
        }
    }
    Ok(())
}

fn check_pairs<T: Real>(params: &[&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(NnError::ParamCount {
            expected: params.len(),
            found: grads.len(),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            }
            .into());
        }
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum:
/// `v <- momentum * v + (g + weight_decay * w)`, `w <- w - lr * v`.
/// With zero momentum this is exactly [`sgd_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Tensor<T>>) {
        self.velocity = velocity;
    }

    pub fn step(&mut self, mut params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        if self.momentum == T::zero() {
            return sgd_step(&mut params, grads, self.lr, self.weight_decay);
        }
        check_pairs(&params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| p.zeros_like()).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((w, &gv), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vel = self.momentum * *vel + gv + self.weight_decay * *w;
                *w -= self.lr * *vel;
            }
        }
        Ok(())
    }
}
