use rand::Rng;

use super::{
    apply_operation, merge_patches, mix_labels, split_patches, AugAction, AugmentError, OpKind, PatchGrid, PatchRef,
    Result,
};
use crate::tensor::{Real, Tensor};

/// Actions for a whole `[B,N]` batch, row-major, with mixing partners
/// resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    batch: usize,
    patches: usize,
    actions: Vec<AugAction>,
    degraded: Vec<PatchRef>,
}

impl Plan {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn actions(&self) -> &[AugAction] {
        &self.actions
    }

    pub fn action(&self, image: usize, patch: usize) -> &AugAction {
        &self.actions[image * self.patches + patch]
    }

    /// Mixing patches that found no partner and were turned into no-ops.
    pub fn degraded(&self) -> &[PatchRef] {
        &self.degraded
    }

    fn flat(&self, r: PatchRef) -> usize {
        r.image * self.patches + r.patch
    }

    /// Flat indices of applied patches, grouped by operation in action-slot
    /// order. Empty groups are omitted.
    pub fn groups(&self) -> Vec<(OpKind, Vec<usize>)> {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); OpKind::COUNT];
        for (k, a) in self.actions.iter().enumerate() {
            if a.applied {
                groups[a.op.index()].push(k);
            }
        }
        OpKind::ALL
            .iter()
            .zip(groups)
            .filter(|(_, g)| !g.is_empty())
            .map(|(&op, g)| (op, g))
            .collect()
    }
}

/// Picks a partner for every applied Mixup and CutMix patch, uniformly among
/// applied patches of the same operation in other images. Existing partners
/// are overwritten. A patch with no candidate is switched off and recorded as
/// degraded.
pub fn assign_partners(mut actions: Vec<AugAction>, batch: usize, patches: usize, rng: &mut impl Rng) -> Result<Plan> {
    if actions.len() != batch * patches {
        return Err(AugmentError::ActionCount {
            expected: batch * patches,
            found: actions.len(),
        });
    }
    let at = |k: usize| PatchRef {
        image: k / patches,
        patch: k % patches,
    };
    let mut degraded = Vec::new();
    for a in actions.iter_mut() {
        a.partner = None;
    }
    for op in [OpKind::CutMix, OpKind::Mixup] {
        let members: Vec<usize> = (0..actions.len())
            .filter(|&k| actions[k].applied && actions[k].op == op)
            .collect();
        for &k in &members {
            let me = at(k);
            let candidates: Vec<usize> = members.iter().copied().filter(|&j| at(j).image != me.image).collect();
            if candidates.is_empty() {
                actions[k].applied = false;
                degraded.push(me);
            } else {
                actions[k].partner = Some(at(candidates[rng.random_range(0..candidates.len())]));
            }
        }
    }
    degraded.sort();
    Ok(Plan {
        batch,
        patches,
        actions,
        degraded,
    })
}

/// Result of running a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution<T> {
    pub images: Tensor<T>,
    pub labels: Tensor<T>,
    /// Number of `apply_operation` calls issued.
    pub launches: usize,
}

fn check_inputs<T: Real>(images: &Tensor<T>, labels: &Tensor<T>, plan: &Plan, grid: &PatchGrid) -> Result<()> {
    if images.rank() != 4 || images.shape()[0] != plan.batch {
        return Err(AugmentError::Shape {
            expected: format!("[{},C,H,W] images", plan.batch),
            found: images.shape().to_vec(),
        });
    }
    if labels.rank() != 2 || labels.shape()[0] != plan.batch {
        return Err(AugmentError::Shape {
            expected: format!("[{},classes] labels", plan.batch),
            found: labels.shape().to_vec(),
        });
    }
    if grid.count() != plan.patches {
        return Err(AugmentError::ActionCount {
            expected: grid.count(),
            found: plan.patches,
        });
    }
    Ok(())
}

fn plan_labels<T: Real>(labels: &Tensor<T>, plan: &Plan) -> Result<Tensor<T>> {
    let classes = labels.shape()[1];
    let row = |b: usize| &labels.data()[b * classes..(b + 1) * classes];
    let mut out = Vec::with_capacity(labels.numel());
    for b in 0..plan.batch {
        let actions = &plan.actions[b * plan.patches..(b + 1) * plan.patches];
        let partners: Vec<Option<&[T]>> = actions.iter().map(|a| a.partner.map(|p| row(p.image))).collect();
        out.extend(mix_labels(actions, row(b), &partners)?);
    }
    Ok(Tensor::new(labels.shape(), out)?)
}

/// `[B,N,C,h,w] -> [B*N,C,h,w]`.
fn flat_patches<T: Real>(images: &Tensor<T>, grid: &PatchGrid) -> Result<Tensor<T>> {
    let p = split_patches(images, grid)?;
    let s = p.shape();
    Ok(p.reshape(&[s[0] * s[1], s[2], s[3], s[4]])?)
}

fn unflatten<T: Real>(flat: Tensor<T>, plan: &Plan, grid: &PatchGrid) -> Result<Tensor<T>> {
    let s = flat.shape().to_vec();
    let shaped = flat.reshape(&[plan.batch, plan.patches, s[1], s[2], s[3]])?;
    merge_patches(&shaped, grid)
}

/// Batched execution: one [`apply_operation`] call per operation present.
/// Mixing partners always read the un-augmented patch.
pub fn run_grouped<T: Real>(
    images: &Tensor<T>,
    labels: &Tensor<T>,
    plan: &Plan,
    grid: &PatchGrid,
) -> Result<Execution<T>> {
    check_inputs(images, labels, plan, grid)?;
    let original = flat_patches(images, grid)?;
    let mut out = original.clone();
    let groups = plan.groups();
    for (op, members) in &groups {
        let group = original.gather_batch(members)?;
        let actions: Vec<AugAction> = members.iter().map(|&k| plan.actions[k]).collect();
        let partners = if op.is_mixing() {
            let idx: Vec<usize> = actions
                .iter()
                .map(|a| a.partner.map(|p| plan.flat(p)))
                .collect::<Option<_>>()
                .ok_or(AugmentError::MissingPartner(*op))?;
            Some(original.gather_batch(&idx)?)
        } else {
            None
        };
        let result = apply_operation(*op, &group, &actions, partners.as_ref())?;
        out.scatter_into(&result, members)?;
    }
    Ok(Execution {
        images: unflatten(out, plan, grid)?,
        labels: plan_labels(labels, plan)?,
        launches: groups.len(),
    })
}

/// Reference executor: visits patches one at a time in row-major order.
pub fn execute_sequential<T: Real>(
    images: &Tensor<T>,
    labels: &Tensor<T>,
    plan: &Plan,
    grid: &PatchGrid,
) -> Result<Execution<T>> {
    check_inputs(images, labels, plan, grid)?;
    let original = flat_patches(images, grid)?;
    let mut out = original.clone();
    let mut launches = 0;
    for (k, a) in plan.actions.iter().enumerate() {
        if !a.applied {
            continue;
        }
        let patch = original.slice_batch(k)?;
        let partner = match (a.op.is_mixing(), a.partner) {
            (true, Some(p)) => Some(original.slice_batch(plan.flat(p))?),
            (true, None) => return Err(AugmentError::MissingPartner(a.op)),
            (false, _) => None,
        };
        let result = apply_operation(a.op, &patch, &[*a], partner.as_ref())?;
        out.scatter_into(&result, &[k])?;
        launches += 1;
    }
    Ok(Execution {
        images: unflatten(out, plan, grid)?,
        labels: plan_labels(labels, plan)?,
        launches,
    })
}

/// Resolves partners for `actions` (row-major `[B,N]`) with `rng`, then runs
/// the batched executor.
pub fn execute_plan<T: Real>(
    images: &Tensor<T>,
    labels: &Tensor<T>,
    actions: Vec<AugAction>,
    grid: &PatchGrid,
    rng: &mut impl Rng,
) -> Result<(Plan, Execution<T>)> {
    let batch = images.shape().first().copied().unwrap_or(0);
    let plan = assign_partners(actions, batch, grid.count(), rng)?;
    let execution = run_grouped(images, labels, &plan, grid)?;
    Ok((plan, execution))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::draw_actions;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(seed: u64, b: usize) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Tensor::new(&[b, 3, 8, 8], (0..b * 192).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mut labels = vec![0.0; b * 3];
        for i in 0..b {
            labels[i * 3 + i % 3] = 1.0;
        }
        (images, Tensor::new(&[b, 3], labels).unwrap())
    }

    #[test]
    fn nothing_applied_is_identity() {
        let (x, y) = batch(0, 4);
        let grid = PatchGrid::new(4).unwrap();
        let actions = vec![AugAction::skip(OpKind::Mixup); 16];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (plan, out) = execute_plan(&x, &y, actions, &grid, &mut rng).unwrap();
        assert_eq!(out.images, x);
        assert_eq!(out.labels, y);
        assert_eq!(out.launches, 0);
        assert!(plan.degraded().is_empty());
    }

    #[test]
    fn lone_mixing_patch_degrades() {
        let (x, y) = batch(0, 2);
        let grid = PatchGrid::new(4).unwrap();
        let mut actions = vec![AugAction::skip(OpKind::Invert); 8];
        actions[0] = AugAction::forced(OpKind::CutMix, 0.0);
        actions[1] = AugAction::forced(OpKind::CutMix, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (plan, out) = execute_plan(&x, &y, actions, &grid, &mut rng).unwrap();
        assert_eq!(plan.degraded().len(), 2);
        assert_eq!(out.images, x);
    }

    #[test]
    fn partners_come_from_other_images_with_same_op() {
        let ops: Vec<OpKind> = (0..64).map(|k| OpKind::ALL[k % 15]).collect();
        let mut actions = draw_actions(&ops, 4, 0.5, 3, 0);
        for a in &mut actions {
            a.applied = true;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = assign_partners(actions, 16, 4, &mut rng).unwrap();
        for (k, a) in plan.actions().iter().enumerate() {
            match a.partner {
                Some(p) => {
                    assert!(a.op.is_mixing());
                    assert_ne!(p.image, k / 4);
                    assert_eq!(plan.action(p.image, p.patch).op, a.op);
                }
                None => assert!(!a.op.is_mixing() || !a.applied),
            }
        }
    }

    #[test]
    fn grouped_matches_sequential() {
        let grid = PatchGrid::new(4).unwrap();
        for seed in 0..10 {
            let (x, y) = batch(seed, 6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ops: Vec<OpKind> = (0..24).map(|_| OpKind::ALL[rng.random_range(0..15)]).collect();
            let actions = draw_actions(&ops, 4, 0.7, seed, 1);
            let plan = assign_partners(actions, 6, 4, &mut rng).unwrap();
            let a = run_grouped(&x, &y, &plan, &grid).unwrap();
            let b = execute_sequential(&x, &y, &plan, &grid).unwrap();
            assert_eq!(a.images, b.images);
            assert_eq!(a.labels, b.labels);
            assert!(a.launches <= 15);
        }
    }

    #[test]
    fn shape_errors() {
        let (x, y) = batch(0, 2);
        let grid = PatchGrid::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let short = vec![AugAction::skip(OpKind::Invert); 7];
        assert!(execute_plan(&x, &y, short, &grid, &mut rng).is_err());
        let plan = assign_partners(vec![AugAction::skip(OpKind::Invert); 12], 3, 4, &mut rng).unwrap();
        assert!(run_grouped(&x, &y, &plan, &grid).is_err());
    }
}
