use super::{AugAction, AugmentError, OpKind, Result};
use crate::tensor::Real;

fn check_one_hot<T: Real>(label: &[T], what: impl FnOnce() -> String) -> Result<()> {
    let ones = label.iter().filter(|&&v| v == T::one()).count();
    let zeros = label.iter().filter(|&&v| v == T::zero()).count();
    if ones != 1 || ones + zeros != label.len() {
        return Err(AugmentError::NotOneHot(what()));
    }
    Ok(())
}

/// Soft label of one augmented image.
///
/// Each of the `N = actions.len()` patches contributes a label worth `1/N`:
/// its own label, unless Mixup was applied (`lambda` of its own label plus
/// the rest from the partner's) or CutMix was applied (the partner's label).
/// `partner_labels[i]` is the label of patch `i`'s partner image and is only
/// read for applied mixing patches.
pub fn mix_labels<T: Real>(actions: &[AugAction], own_label: &[T], partner_labels: &[Option<&[T]>]) -> Result<Vec<T>> {
    let n = actions.len();
    if n == 0 || partner_labels.len() != n {
        return Err(AugmentError::ActionCount {
            expected: n,
            found: partner_labels.len(),
        });
    }
    check_one_hot(own_label, || "own label".into())?;
    let mut acc = vec![0.0f64; own_label.len()];
    let add = |acc: &mut [f64], label: &[T], weight: f64| {
        for (a, &y) in acc.iter_mut().zip(label) {
            *a += weight * y.as_f64();
        }
    };
    for (i, (action, partner)) in actions.iter().zip(partner_labels).enumerate() {
        if !(action.applied && action.op.is_mixing()) {
            add(&mut acc, own_label, 1.0);
            continue;
        }
        let partner = partner.ok_or(AugmentError::MissingPartner(action.op))?;
        if partner.len() != own_label.len() {
            return Err(AugmentError::NotOneHot(format!(
                "partner label of patch {i} (length {})",
                partner.len()
            )));
        }
        check_one_hot(partner, || format!("partner label of patch {i}"))?;
        match action.op {
            OpKind::Mixup => {
                add(&mut acc, own_label, action.lambda);
                add(&mut acc, partner, 1.0 - action.lambda);
            }
            _ => add(&mut acc, partner, 1.0),
        }
    }
    Ok(acc.into_iter().map(|v| T::lit(v / n as f64)).collect())
}
