use super::{NnError, Result};
use crate::autodiff::Var;
use crate::tensor::{Real, Tensor};

/// Checks that every row of `labels` is a probability vector: non-negative
/// entries summing to one within `1e-6` (or a few ulps for wide rows).
pub fn check_soft_labels<T: Real>(labels: &Tensor<T>) -> Result<()> {
    let cols = *labels.shape().last().expect("non-empty shape");
    let tol = 1e-6f64.max(T::epsilon().as_f64() * cols as f64);
    for (row, values) in labels.data().chunks(cols).enumerate() {
        let sum: f64 = values.iter().map(|v| v.as_f64()).sum();
        if values.iter().any(|&v| v < T::zero() || !v.is_finite()) || (sum - 1.0).abs() > tol {
            return Err(NnError::NonSimplexLabels { row, sum });
        }
    }
    Ok(())
}

/// Batch mean of `-sum_c y_c * log_softmax(logits)_c`.
pub fn soft_cross_entropy<'t, T: Real>(logits: Var<'t, T>, soft_labels: &Tensor<T>) -> Result<Var<'t, T>> {
    if logits.shape() != soft_labels.shape() || soft_labels.rank() != 2 {
        return Err(NnError::InputMismatch {
            expected: format!("labels shaped like logits {:?}", logits.shape()),
            found: soft_labels.shape().to_vec(),
        });
    }
    check_soft_labels(soft_labels)?;
    let batch = soft_labels.shape()[0];
    let labels = logits.tape().constant(soft_labels.clone());
    let weighted = logits.log_softmax().mul(labels)?;
    Ok(weighted.sum_all().scale(-T::one() / T::lit(batch as f64)))
}
