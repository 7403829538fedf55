//! The acceptance suite: one PASS/FAIL line per criterion, printed straight
//! to stdout so it shows up without `--nocapture`.
//!
//! The end-to-end criterion trains ten 30-epoch models and dominates the
//! runtime (about 25 minutes on one core).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use paa_core::augment::{mix_labels, AugAction, OpKind, PatchRef};
use paa_core::autodiff::Tape;
use paa_core::marl::{compute_reward, PolicyKind, RewardSign};
use paa_core::nn::Pass;
use paa_core::selfcheck::{executor_equivalence, op_properties, run_bandit_checks, run_grad_checks, GradCase};
use paa_core::trainer::{
    bin_patch_importance, bin_scores, checkpoint_path, grad_cam, load_datasets, resume_run, train_run, ImportanceBin,
    RunSummary, TrainConfig, Trainer, EPOCHS_FILE, METRICS_FILE, USAGE_FILE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let used = start.elapsed();
    ensure(
        used <= limit,
        format!("took {:.1}s, limit {}s", used.as_secs_f64(), limit.as_secs()),
    )
}

fn kernel_equivalence() -> Verdict {
    let start = Instant::now();
    let outcome = executor_equivalence(100, 2024);
    ensure(outcome.passed, outcome.detail.clone())?;
    within(start, Duration::from_secs(60))?;
    Ok(outcome.detail)
}

fn operation_properties() -> Verdict {
    let start = Instant::now();
    let mut checked = 0;
    for seed in 0..10 {
        for o in op_properties(seed) {
            ensure(o.passed, format!("{o} (seed {seed})"))?;
            checked += 1;
        }
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!("{checked} property checks over 10 seeds"))
}

fn label_algebra() -> Verdict {
    let own = [1.0f64, 0.0];
    let other = [0.0f64, 1.0];
    let mut actions = vec![AugAction::skip(OpKind::Invert); 4];
    actions[2] = AugAction::forced(OpKind::Mixup, 0.0)
        .with_lambda(0.5)
        .with_partner(PatchRef { image: 1, patch: 2 });
    let partners = [None, None, Some(&other[..]), None];
    let mixed = mix_labels(&actions, &own, &partners).map_err(|e| e.to_string())?;
    ensure(mixed == vec![0.875, 0.125], format!("mixup example gave {mixed:?}"))?;

    let mut cut = actions.clone();
    cut[2] = AugAction::forced(OpKind::CutMix, 0.0).with_partner(PatchRef { image: 1, patch: 2 });
    let mixed_cut = mix_labels(&cut, &own, &partners).map_err(|e| e.to_string())?;
    ensure(
        mixed_cut == vec![0.75, 0.25],
        format!("cutmix example gave {mixed_cut:?}"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..2000 {
        let n = [1, 4, 9, 16][rng.random_range(0..4)];
        let classes = rng.random_range(2..=10);
        let hot = |rng: &mut ChaCha8Rng| {
            let mut v = vec![0.0f64; classes];
            v[rng.random_range(0..classes)] = 1.0;
            v
        };
        let own = hot(&mut rng);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| hot(&mut rng)).collect();
        let actions: Vec<AugAction> = (0..n)
            .map(|_| {
                let op = OpKind::ALL[rng.random_range(0..OpKind::COUNT)];
                let mut a = AugAction::forced(op, 0.0).with_lambda(rng.random());
                a.applied = rng.random_bool(0.5);
                if op.is_mixing() && a.applied {
                    a = a.with_partner(PatchRef { image: 1, patch: 0 });
                }
                a
            })
            .collect();
        let partners: Vec<Option<&[f64]>> = actions
            .iter()
            .zip(&rows)
            .map(|(a, r)| a.partner.map(|_| r.as_slice()))
            .collect();
        let v = mix_labels(&actions, &own, &partners).map_err(|e| e.to_string())?;
        let sum: f64 = v.iter().sum();
        ensure(
            v.iter().all(|&p| p >= 0.0) && (sum - 1.0).abs() <= 1e-12,
            format!("off the simplex: {v:?}"),
        )?;
    }
    Ok("[0.875, 0.125] exact; 2000 random plans on the simplex".into())
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let outcomes = run_grad_checks(20, 77, None);
    ensure(
        outcomes.len() == GradCase::ALL.len(),
        format!("{} cases checked", outcomes.len()),
    )?;
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| o.to_string()).collect();
    ensure(failed.is_empty(), failed.join("; "))?;
    within(start, Duration::from_secs(300))?;
    Ok(format!("{} cases x 20 instances within 1e-5", outcomes.len()))
}

fn reward_semantics() -> Verdict {
    let r = compute_reward(2.0f64, 1.5, RewardSign::Paper).map_err(|e| e.to_string())?;
    ensure(r == 0.5, format!("(2.0, 1.5) gave {r}"))?;

    // Identity augmentation: every patch skipped, so the augmented batch is
    // the clean batch and both losses coincide.
    let config = TrainConfig {
        train_size: 64,
        test_size: 16,
        ..TrainConfig::default()
    };
    let (train, _) = load_datasets(&config).map_err(|e| e.to_string())?;
    let trainer = Trainer::new(config.clone(), train.image_size()).map_err(|e| e.to_string())?;
    let (x, y) = train.batch(&(0..32).collect::<Vec<_>>());
    let actions = vec![AugAction::skip(OpKind::Rotate); 32 * config.patches];
    let grid = paa_core::augment::PatchGrid::new(config.patches).map_err(|e| e.to_string())?;
    let (_, exec) = paa_core::augment::execute_plan(&x, &y, actions, &grid, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| e.to_string())?;
    let loss = |a: &paa_core::tensor::Tensor<f32>, b: &paa_core::tensor::Tensor<f32>| -> Result<f32, String> {
        let tape = Tape::new();
        let logits = tape.constant(trainer.target.predict(a, Pass::Measure).map_err(|e| e.to_string())?);
        Ok(paa_core::nn::soft_cross_entropy(logits, b)
            .map_err(|e| e.to_string())?
            .value()
            .data()[0])
    };
    let r = compute_reward(loss(&x, &y)?, loss(&exec.images, &exec.labels)?, RewardSign::Paper)
        .map_err(|e| e.to_string())?;
    ensure(r == 0.0, format!("identity augmentation gave reward {r}"))?;
    Ok("r(2.0, 1.5) = 0.5; identity reward exactly 0".into())
}

fn a2c_learning() -> Verdict {
    let start = Instant::now();
    let outcomes = run_bandit_checks(&[0, 1, 2, 3, 4], 0.9);
    let details: Vec<String> = outcomes.iter().map(|o| o.detail.clone()).collect();
    ensure(outcomes.iter().all(|o| o.passed), details.join("; "))?;
    within(start, Duration::from_secs(300))?;
    Ok(format!("5/5 seeds: {}", details.join("; ")))
}

fn run(config: TrainConfig, dir: &Path) -> Result<RunSummary, String> {
    let (train, test) = load_datasets(&config).map_err(|e| e.to_string())?;
    train_run(config, dir, &train, &test).map_err(|e| e.to_string())
}

fn end_to_end_trend() -> Verdict {
    let start = Instant::now();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut paa = Vec::new();
    let mut baseline = Vec::new();
    for seed in 0..5u64 {
        for policy in [PolicyKind::Marl, PolicyKind::Off] {
            let config = TrainConfig {
                policy,
                seed,
                ..TrainConfig::default()
            };
            let summary = run(config, &root.path().join(format!("{policy}-{seed}")))?;
            if policy == PolicyKind::Off {
                baseline.push(summary.final_accuracy);
                continue;
            }
            let rewards: Vec<f64> = summary.epochs.iter().map(|e| e.mean_reward).collect();
            ensure(
                rewards.iter().all(|r| r.is_finite()),
                format!("seed {seed}: non-finite reward"),
            )?;
            ensure(
                rewards.iter().any(|&r| r != rewards[0]),
                format!("seed {seed}: per-epoch reward constant at {}", rewards[0]),
            )?;
            paa.push(summary.final_accuracy);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (p, b) = (mean(&paa), mean(&baseline));
    let detail = format!(
        "patch policy {p:.4} vs baseline {b:.4} over 5 seeds in {:.0}s",
        start.elapsed().as_secs_f64()
    );
    ensure(p >= b - 0.005, detail.clone())?;
    within(start, Duration::from_secs(30 * 60))?;
    Ok(detail)
}

fn ablation_parity() -> Verdict {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut headers = Vec::new();
    let mut parts = Vec::new();
    for policy in [PolicyKind::Marl, PolicyKind::Random, PolicyKind::Independent] {
        let dir = root.path().join(policy.to_string());
        let config = TrainConfig {
            policy,
            epochs: 3,
            seed: 4,
            ..TrainConfig::default()
        };
        let summary = run(config, &dir)?;
        ensure(
            summary.epochs.len() == 3,
            format!("{policy}: {} epochs", summary.epochs.len()),
        )?;
        let metrics = fs::read_to_string(dir.join(METRICS_FILE)).map_err(|e| e.to_string())?;
        let usage = fs::read_to_string(dir.join(USAGE_FILE)).map_err(|e| e.to_string())?;
        ensure(usage.lines().count() > 1, format!("{policy}: empty policy usage"))?;
        headers.push((
            metrics.lines().next().unwrap_or("").to_string(),
            metrics.lines().count(),
        ));
        parts.push(format!("{policy} {:.3}", summary.final_accuracy));
    }
    ensure(
        headers.windows(2).all(|w| w[0] == w[1]),
        format!("metrics differ in shape: {headers:?}"),
    )?;
    Ok(format!("same metrics columns and rows; accuracy {}", parts.join(", ")))
}

fn small(policy: PolicyKind) -> TrainConfig {
    TrainConfig {
        policy,
        seed: 21,
        epochs: 3,
        train_size: 512,
        test_size: 128,
        batch_size: 64,
        probe_size: 64,
        ..TrainConfig::default()
    }
}

fn determinism_and_resume() -> Verdict {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let files = [METRICS_FILE, USAGE_FILE, EPOCHS_FILE];
    let read = |dir: &Path| -> Result<Vec<Vec<u8>>, String> {
        files
            .iter()
            .map(|f| fs::read(dir.join(f)).map_err(|e| e.to_string()))
            .collect()
    };
    for policy in [PolicyKind::Marl, PolicyKind::Off] {
        let (a, b) = (
            root.path().join(format!("{policy}-a")),
            root.path().join(format!("{policy}-b")),
        );
        let full = run(small(policy), &a)?;
        run(small(policy), &b)?;
        let logs = read(&a)?;
        ensure(logs == read(&b)?, format!("{policy}: repeated run differs"))?;

        let last = fs::read(checkpoint_path(&a, 3)).map_err(|e| e.to_string())?;
        let (train, test) = load_datasets(&small(policy)).map_err(|e| e.to_string())?;
        let resumed = resume_run(&a, &checkpoint_path(&a, 1), &train, &test).map_err(|e| e.to_string())?;
        ensure(
            resumed.trainer == full.trainer,
            format!("{policy}: resumed state differs"),
        )?;
        ensure(read(&a)? == logs, format!("{policy}: resumed logs differ"))?;
        ensure(
            fs::read(checkpoint_path(&a, 3)).map_err(|e| e.to_string())? == last,
            format!("{policy}: resumed checkpoint differs"),
        )?;
    }
    Ok("byte-identical logs; resume from epoch 1 of 3 is bit-exact".into())
}

fn analysis_pipeline() -> Verdict {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = TrainConfig {
        patches: 16,
        ..small(PolicyKind::Marl)
    };
    let summary = run(config.clone(), root.path())?;
    let target = &summary.trainer.target;
    let (train, _) = load_datasets(&config).map_err(|e| e.to_string())?;
    let probe = train.head(8);
    let (x, _) = probe.batch(&(0..8).collect::<Vec<_>>());

    // Expected map size: the feature maps right after the last convolution.
    let last = target.last_conv_index().ok_or("target has no convolution")?;
    let tape = Tape::new();
    let features = target
        .forward_layers(&tape, tape.constant(x.clone()), 0..last + 1, Pass::Eval)
        .map_err(|e| e.to_string())?;
    let fshape = features.value().shape().to_vec();
    let cam = grad_cam(target, &x, &probe.classes).map_err(|e| e.to_string())?;
    ensure(
        cam.shape() == [8, fshape[2], fshape[3]],
        format!("map shape {:?}", cam.shape()),
    )?;
    ensure(
        cam.data().iter().all(|&v| v >= 0.0 && v.is_finite()),
        "negative or non-finite activation",
    )?;
    ensure(cam.data().iter().any(|&v| v > 0.0), "all-zero maps")?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let mut scores: Vec<f64> = (0..16).map(|i| i as f64 + rng.random::<f64>() * 0.5).collect();
        for i in (1..16).rev() {
            scores.swap(i, rng.random_range(0..=i));
        }
        let bins = bin_scores(&scores);
        for bin in ImportanceBin::ALL {
            ensure(
                bins.iter().filter(|&&b| b == bin).count() == 4,
                format!("{bin} not of size 4"),
            )?;
        }
    }
    let plane = fshape[2] * fshape[3];
    let (h, w) = train.image_size();
    let grid = paa_core::augment::PatchGrid::new(16).map_err(|e| e.to_string())?;
    let bins = bin_patch_importance(&cam.data()[..plane], (fshape[2], fshape[3]), (h, w), &grid);
    ensure(bins.len() == 16, format!("{} patch bins", bins.len()))?;

    let mut reader = csv::Reader::from_path(root.path().join(USAGE_FILE)).map_err(|e| e.to_string())?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(String::from)
        .collect();
    ensure(
        header == ["epoch", "bin", "op", "fraction"],
        format!("usage header {header:?}"),
    )?;
    let mut sums: BTreeMap<(usize, String), f64> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| e.to_string())?;
        let epoch: usize = row[0].parse().map_err(|_| "bad epoch")?;
        let fraction: f64 = row[3].parse().map_err(|_| "bad fraction")?;
        *sums.entry((epoch, row[1].to_string())).or_default() += fraction;
    }
    ensure(sums.len() == 3 * 4, format!("{} (epoch, bin) groups", sums.len()))?;
    for (key, s) in &sums {
        ensure((s - 1.0).abs() <= 1e-9, format!("{key:?} sums to {s}"))?;
    }
    Ok(format!(
        "maps [8,{},{}] non-negative; quartile bins of 4; {} usage groups sum to 1",
        fshape[2],
        fshape[3],
        sums.len()
    ))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("kernel-oracle-equivalence", kernel_equivalence),
        ("operation-properties", operation_properties),
        ("label-algebra", label_algebra),
        ("gradient-correctness", gradient_correctness),
        ("reward-semantics", reward_semantics),
        ("a2c-learning", a2c_learning),
        ("end-to-end-trend", end_to_end_trend),
        ("ablation-parity", ablation_parity),
        ("determinism-and-persistence", determinism_and_resume),
        ("analysis-pipeline", analysis_pipeline),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let line = match &verdict {
            Ok(detail) => format!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => format!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
        };
        let mut out = std::io::stdout().lock();
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
        if verdict.is_err() {
            failed.push(name.to_string());
        }
    }
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
