use paa_core::augment::{
    apply_operation, assign_partners, draw_actions, execute_sequential, merge_patches, mix_labels, run_grouped,
    sample_action, split_patches, AugAction, OpKind, PatchGrid, PatchRef,
};
use paa_core::tensor::{ReduceOp, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn one_hot(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> Tensor<f64> {
    let mut data = vec![0.0; rows * classes];
    for r in 0..rows {
        data[r * classes + rng.random_range(0..classes)] = 1.0;
    }
    Tensor::new(&[rows, classes], data).unwrap()
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..5)
}

fn patches_for(op: OpKind, x: &Tensor<f64>, action: AugAction, y: &Tensor<f64>) -> Tensor<f64> {
    let partners = op.is_mixing().then_some(y);
    apply_operation(op, x, &vec![action; x.shape()[0]], partners).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gather_then_scatter_restores_a_permutation(b in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[b, 2, 3]);
        let mut perm: Vec<usize> = (0..b).collect();
        for i in (1..b).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let gathered = x.gather_batch(&perm).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(gathered.slice_batch(j).unwrap(), x.slice_batch(i).unwrap());
        }
        prop_assert_eq!(Tensor::scatter_batch(&gathered, &perm).unwrap(), x);
    }

    #[test]
    fn out_of_range_gather_is_rejected(b in 1usize..6, extra in 0usize..4) {
        let x = Tensor::<f64>::zeros(&[b, 2]).unwrap();
        prop_assert!(x.gather_batch(&[b + extra]).is_err());
    }

    #[test]
    fn reductions_match_a_direct_loop(shape in shape_strategy(), seed in any::<u64>(), pick in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &shape);
        let rank = shape.len();
        let axes: Vec<usize> = (0..rank).filter(|a| pick >> a & 1 == 1).collect();

        // Direct oracle: walk every multi-index and bucket by the kept axes.
        let kept: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).collect();
        let out_len: usize = kept.iter().map(|&a| shape[a]).product();
        let mut sums = vec![0.0f64; out_len];
        let mut maxes = vec![f64::NEG_INFINITY; out_len];
        for (flat, &v) in x.data().iter().enumerate() {
            let mut rem = flat;
            let mut idx = vec![0; rank];
            for a in (0..rank).rev() {
                idx[a] = rem % shape[a];
                rem /= shape[a];
            }
            let o = kept.iter().fold(0, |acc, &a| acc * shape[a] + idx[a]);
            sums[o] += v;
            maxes[o] = maxes[o].max(v);
        }
        let block = (x.numel() / out_len) as f64;
        let sum = x.reduce(ReduceOp::Sum, &axes).unwrap();
        let mean = x.reduce(ReduceOp::Mean, &axes).unwrap();
        let max = x.reduce(ReduceOp::Max, &axes).unwrap();
        prop_assert_eq!(sum.numel(), out_len);
        for o in 0..out_len {
            prop_assert!((sum.data()[o] - sums[o]).abs() <= 1e-12);
            prop_assert!((mean.data()[o] - sums[o] / block).abs() <= 1e-12);
            prop_assert_eq!(max.data()[o], maxes[o]);
        }
        let all: Vec<usize> = (0..rank).collect();
        prop_assert!((x.reduce(ReduceOp::Sum, &all).unwrap().data()[0] - x.sum_all()).abs() <= 1e-12);
    }

    #[test]
    fn split_then_merge_is_the_identity(side in 1usize..4, cell in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PatchGrid::new(side * side).unwrap();
        let x = random_tensor(&mut rng, &[2, 3, side * cell, side * cell]);
        let patches = split_patches(&x, &grid).unwrap();
        prop_assert_eq!(patches.shape(), &[2, side * side, 3, cell, cell][..]);
        prop_assert_eq!(merge_patches(&patches, &grid).unwrap(), x);
    }

    #[test]
    fn invert_is_an_involution(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[3, 3, 8, 8]);
        let a = AugAction::forced(OpKind::Invert, 0.0);
        let twice = patches_for(OpKind::Invert, &patches_for(OpKind::Invert, &x, a, &x), a, &x);
        prop_assert!(twice.max_abs_diff(&x).unwrap() <= 1e-12);
    }

    #[test]
    fn equalize_and_cutout_are_idempotent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[3, 3, 8, 8]);
        for op in [OpKind::Equalize, OpKind::Cutout] {
            let a = AugAction::forced(op, 0.0);
            let once = patches_for(op, &x, a, &x);
            prop_assert_eq!(patches_for(op, &once, a, &x), once);
        }
    }

    #[test]
    fn cutout_fills_each_channel_with_its_mean(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[2, 3, 4, 4]);
        let out = patches_for(OpKind::Cutout, &x, AugAction::forced(OpKind::Cutout, 0.0), &x);
        for (src, dst) in x.data().chunks(16).zip(out.data().chunks(16)) {
            let mean = src.iter().sum::<f64>() / 16.0;
            prop_assert!(dst.iter().all(|&v| v == mean));
        }
    }

    #[test]
    fn identity_magnitudes_leave_patches_unchanged(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[2, 3, 8, 8]);
        let y = random_tensor(&mut rng, &[2, 3, 8, 8]);
        prop_assert_eq!(patches_for(OpKind::Brightness, &x, AugAction::forced(OpKind::Brightness, 1.0), &y), x.clone());
        let mixup = AugAction::forced(OpKind::Mixup, 0.0).with_lambda(1.0);
        prop_assert_eq!(patches_for(OpKind::Mixup, &x, mixup, &y), x.clone());
        let rotated = patches_for(OpKind::Rotate, &x, AugAction::forced(OpKind::Rotate, 0.0), &y);
        prop_assert!(rotated.max_abs_diff(&x).unwrap() <= 1e-12);
    }

    #[test]
    fn every_operation_stays_in_the_unit_range(op_index in 0usize..OpKind::COUNT, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let op = OpKind::ALL[op_index];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[2, 3, 8, 8]);
        let y = random_tensor(&mut rng, &[2, 3, 8, 8]);
        let mut action = sample_action(op, frac, &mut rng);
        action.applied = true;
        let out = patches_for(op, &x, action, &y);
        prop_assert_eq!(out.shape(), x.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mixed_labels_lie_on_the_simplex(
        n in prop::sample::select(vec![1usize, 4, 9, 16]),
        classes in 2usize..10,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let own = one_hot(&mut rng, 1, classes);
        let others = one_hot(&mut rng, n, classes);
        let actions: Vec<AugAction> = (0..n)
            .map(|_| {
                let op = OpKind::ALL[rng.random_range(0..OpKind::COUNT)];
                let a = sample_action(op, rng.random(), &mut rng);
                if op.is_mixing() && a.applied {
                    a.with_partner(PatchRef { image: 1, patch: 0 })
                } else {
                    a
                }
            })
            .collect();
        let partners: Vec<Option<&[f64]>> = actions
            .iter()
            .enumerate()
            .map(|(i, a)| a.partner.map(|_| &others.data()[i * classes..(i + 1) * classes]))
            .collect();
        let mixed = mix_labels(&actions, own.data(), &partners).unwrap();
        prop_assert!(mixed.iter().all(|&p| p >= 0.0));
        prop_assert!((mixed.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn grouped_and_per_patch_execution_agree(
        b in 2usize..10,
        n in prop::sample::select(vec![4usize, 16]),
        frac in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PatchGrid::new(n).unwrap();
        let images = random_tensor(&mut rng, &[b, 3, 16, 16]);
        let labels = one_hot(&mut rng, b, 5);
        let ops: Vec<OpKind> = (0..b * n).map(|_| OpKind::ALL[rng.random_range(0..OpKind::COUNT)]).collect();
        let plan = assign_partners(draw_actions(&ops, n, frac, seed, 0), b, n, &mut rng).unwrap();
        for a in plan.actions() {
            if a.applied && a.op.is_mixing() {
                let p = a.partner.expect("applied mixing patch has a partner");
                prop_assert!(p.image < b && p.patch < n);
            }
        }
        let grouped = run_grouped(&images, &labels, &plan, &grid).unwrap();
        let reference = execute_sequential(&images, &labels, &plan, &grid).unwrap();
        prop_assert_eq!(grouped.images.max_abs_diff(&reference.images).unwrap(), 0.0);
        prop_assert_eq!(grouped.labels.max_abs_diff(&reference.labels).unwrap(), 0.0);
        for row in grouped.labels.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
