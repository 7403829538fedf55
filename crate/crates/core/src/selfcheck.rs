//! Checks the library can run against itself at any time: central-difference
//! gradient checks, kernel properties and the bandit learning test.
//!
//! Each check reports a named [`CheckOutcome`]; the command-line `selftest`
//! and the acceptance tests share them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{
    apply_operation, assign_partners, draw_actions, execute_sequential, mix_labels, run_grouped, split_patches,
    AugAction, OpKind, PatchGrid, PatchRef,
};
use crate::autodiff::{AutodiffError, Tape, Var};
use crate::marl::{
    a2c_losses, run_bandit, BanditConfig, PolicyBundle, PolicyKind, SelectMode, StateFeatures, Transition,
};
use crate::nn::{soft_cross_entropy, Network, Pass};
use crate::tensor::{self, Tensor};

/// Worst relative error a gradient check may show in `f64`.
pub const GRAD_TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-5;
/// Parameter entries probed per instance of the A2C checks.
const PARAM_SAMPLES: usize = 48;

/// Something to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCase {
    Conv2d,
    BatchNormTrain,
    BatchNormEval,
    Linear,
    Relu,
    Softmax,
    GlobalAvgPool,
    Flatten,
    MaxPool2d,
    SoftCrossEntropy,
    CriticLoss,
    ActorLoss,
}

impl GradCase {
    pub const ALL: [GradCase; 12] = [
        GradCase::Conv2d,
        GradCase::BatchNormTrain,
        GradCase::BatchNormEval,
        GradCase::Linear,
        GradCase::Relu,
        GradCase::Softmax,
        GradCase::GlobalAvgPool,
        GradCase::Flatten,
        GradCase::MaxPool2d,
        GradCase::SoftCrossEntropy,
        GradCase::CriticLoss,
        GradCase::ActorLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradCase::Conv2d => "conv2d",
            GradCase::BatchNormTrain => "batchnorm-train",
            GradCase::BatchNormEval => "batchnorm-eval",
            GradCase::Linear => "linear",
            GradCase::Relu => "relu",
            GradCase::Softmax => "softmax",
            GradCase::GlobalAvgPool => "global-avg-pool",
            GradCase::Flatten => "flatten",
            GradCase::MaxPool2d => "maxpool2d",
            GradCase::SoftCrossEntropy => "soft-cross-entropy",
            GradCase::CriticLoss => "critic-loss",
            GradCase::ActorLoss => "actor-loss",
        }
    }
}

impl fmt::Display for GradCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A deliberately broken rule, used to show the checks catch it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Convolution input gradient computed with a flipped kernel.
    ConvBackward,
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "conv-backward" => Ok(Fault::ConvBackward),
            _ => Err(format!("unknown fault `{s}` (expected conv-backward)")),
        }
    }
}

/// Result of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("consistent shape")
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + STEP)
}

type Graph = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>], &Extra) -> Result<Var<'t, f64>, String>;

/// Fixed, non-differentiated inputs of a layer check.
struct Extra {
    weights: Tensor<f64>,
    stride: usize,
    padding: usize,
    labels: Tensor<f64>,
    stats: (Vec<f64>, Vec<f64>),
    fault: Option<Fault>,
}

/// Worst relative error over every entry of every input of `graph`, whose
/// output is contracted with `extra.weights` unless already scalar.
fn check_graph(inputs: &[Tensor<f64>], extra: &Extra, graph: Graph) -> Result<f64, String> {
    let eval = |values: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Tensor<f64>>), String> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = values.iter().map(|v| tape.leaf(v.clone(), grad)).collect();
        let out = graph(&tape, &vars, extra)?;
        let value = out.value().item().ok_or("graph output is not scalar")?;
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(out).map_err(|e| e.to_string())?;
        Ok((value, vars.iter().map(|&v| grads.get_or_zeros(v)).collect()))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let mut probe = inputs.to_vec();
            probe[which].data_mut()[i] += STEP;
            let plus = eval(&probe, false)?.0;
            probe[which].data_mut()[i] -= 2.0 * STEP;
            let minus = eval(&probe, false)?.0;
            let err = rel_err(grad.data()[i], (plus - minus) / (2.0 * STEP));
            if err.is_nan() {
                return Ok(f64::NAN);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn contract<'t>(y: Var<'t, f64>, extra: &Extra) -> Result<Var<'t, f64>, String> {
    let w = y
        .tape()
        .constant(extra.weights.reshape(&y.shape()).map_err(|e| e.to_string())?);
    Ok(y.mul(w).map_err(|e| e.to_string())?.sum_all())
}

fn err<E: fmt::Display>(e: E) -> String {
    e.to_string()
}

fn conv_graph<'t>(tape: &'t Tape<f64>, v: &[Var<'t, f64>], extra: &Extra) -> Result<Var<'t, f64>, String> {
    let (stride, padding) = (extra.stride, extra.padding);
    let y = match extra.fault {
        None => v[0].conv2d(v[1], v[2], stride, padding).map_err(err)?,
        Some(Fault::ConvBackward) => {
            let (x, w, b) = (v[0].value(), v[1].value(), v[2].value());
            let value = tensor::conv2d(&x, &w, Some(&b), stride, padding).map_err(err)?;
            tape.custom(
                &[v[0], v[1], v[2]],
                value,
                Box::new(move |g| {
                    let mut flipped = (*w).clone();
                    let k = w.shape()[3];
                    for chunk in flipped.data_mut().chunks_mut(k * k) {
                        chunk.reverse();
                    }
                    let wrong = tensor::conv2d_backward(&x, &flipped, g, stride, padding)?;
                    let right = tensor::conv2d_backward(&x, &w, g, stride, padding)?;
                    Ok(vec![wrong.input, right.weight, right.bias])
                }),
            )
            .map_err(|e: AutodiffError| e.to_string())?
        }
    };
    contract(y, extra)
}

fn bn_train_graph<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>], extra: &Extra) -> Result<Var<'t, f64>, String> {
    contract(v[0].batch_norm_train(v[1], v[2], 1e-5).map_err(err)?.0, extra)
}

fn bn_eval_graph<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>], extra: &Extra) -> Result<Var<'t, f64>, String> {
    let (mean, var) = &extra.stats;
    contract(v[0].batch_norm_eval(v[1], v[2], mean, var, 1e-5).map_err(err)?, extra)
}

fn linear_graph<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>], extra: &Extra) -> Result<Var<'t, f64>, String> {
    contract(v[0].linear(v[1], v[2]).map_err(err)?, extra)
}

fn relu_graph<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>], extra: &Extra) -> Result<Var<'t, f64>, String> {
    contract(v[0].relu(), extra)
}

fn softmax_graph<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>], extra: &Extra) -> Result<Var<'t, f64>, String> {
    contract(v[0].softmax(), extra)
}

fn gap_graph<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>], extra: &Extra) -> Result<Var<'t, f64>, String> {
    contract(v[0].global_avg_pool().map_err(err)?, extra)
}

fn flatten_graph<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>], extra: &Extra) -> Result<Var<'t, f64>, String> {
    contract(v[0].flatten().map_err(err)?, extra)
}

fn maxpool_graph<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>], extra: &Extra) -> Result<Var<'t, f64>, String> {
    contract(v[0].max_pool2d(2).map_err(err)?, extra)
}

fn ce_graph<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>], extra: &Extra) -> Result<Var<'t, f64>, String> {
    soft_cross_entropy(v[0], &extra.labels).map_err(err)
}

fn simplex_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.into_iter().map(|v| v / s));
    }
    Tensor::new(&[rows, cols], data).expect("consistent shape")
}

/// Distinct, evenly spaced entries in random order, so every pooling window
/// has a clear winner.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let data = order.iter().map(|&r| -1.0 + 2.0 * r as f64 / n as f64).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

/// Inputs of a non-kink instance for `relu`: entries kept clear of zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v })
}

/// Worst relative error of one random tiny instance of `case`.
/// Loss value, chosen operations and parameter gradients of one probe.
type Probe = (f64, Vec<OpKind>, Vec<Tensor<f64>>);

pub fn grad_error(case: GradCase, seed: u64, fault: Option<Fault>) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (case as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut extra = Extra {
        weights: Tensor::scalar(0.0),
        stride: 1,
        padding: 1,
        labels: Tensor::scalar(0.0),
        stats: (Vec::new(), Vec::new()),
        fault,
    };
    let weights = |rng: &mut ChaCha8Rng, n: usize| random(rng, &[n]);
    match case {
        GradCase::Conv2d => {
            let b = rng.random_range(1..=2);
            let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let (h, w) = (rng.random_range(3..=5), rng.random_range(3..=5));
            (extra.stride, extra.padding) = if seed.is_multiple_of(2) { (1, 1) } else { (2, 0) };
            let x = random(&mut rng, &[b, cin, h, w]);
            let k = random(&mut rng, &[cout, cin, 3, 3]);
            let bias = random(&mut rng, &[cout]);
            let oh = (h + 2 * extra.padding - 3) / extra.stride + 1;
            let ow = (w + 2 * extra.padding - 3) / extra.stride + 1;
            extra.weights = weights(&mut rng, b * cout * oh * ow);
            check_graph(&[x, k, bias], &extra, conv_graph)
        }
        GradCase::BatchNormTrain | GradCase::BatchNormEval => {
            let (b, c, h, w) = (rng.random_range(2..=4), rng.random_range(1..=3), 2, 2);
            let x = random(&mut rng, &[b, c, h, w]);
            let gamma = random(&mut rng, &[c]);
            let beta = random(&mut rng, &[c]);
            extra.weights = weights(&mut rng, b * c * h * w);
            extra.stats = (
                (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
                (0..c).map(|_| rng.random_range(0.5..1.5)).collect(),
            );
            let graph: Graph = if case == GradCase::BatchNormTrain {
                bn_train_graph
            } else {
                bn_eval_graph
            };
            check_graph(&[x, gamma, beta], &extra, graph)
        }
        GradCase::Linear => {
            let (b, i, o) = (
                rng.random_range(1..=3),
                rng.random_range(1..=5),
                rng.random_range(1..=4),
            );
            let x = random(&mut rng, &[b, i]);
            let w = random(&mut rng, &[o, i]);
            let bias = random(&mut rng, &[o]);
            extra.weights = weights(&mut rng, b * o);
            check_graph(&[x, w, bias], &extra, linear_graph)
        }
        GradCase::Relu => {
            let x = off_zero(&mut rng, &[2, 7]);
            extra.weights = weights(&mut rng, 14);
            check_graph(&[x], &extra, relu_graph)
        }
        GradCase::Softmax => {
            let (b, c) = (rng.random_range(1..=3), rng.random_range(2..=6));
            let x = random(&mut rng, &[b, c]);
            extra.weights = weights(&mut rng, b * c);
            check_graph(&[x], &extra, softmax_graph)
        }
        GradCase::GlobalAvgPool => {
            let x = random(&mut rng, &[2, 3, 2, 3]);
            extra.weights = weights(&mut rng, 6);
            check_graph(&[x], &extra, gap_graph)
        }
        GradCase::Flatten => {
            let x = random(&mut rng, &[2, 2, 2, 2]);
            extra.weights = weights(&mut rng, 16);
            check_graph(&[x], &extra, flatten_graph)
        }
        GradCase::MaxPool2d => {
            let x = spread(&mut rng, &[2, 2, 4, 4]);
            extra.weights = weights(&mut rng, 16);
            check_graph(&[x], &extra, maxpool_graph)
        }
        GradCase::SoftCrossEntropy => {
            let (b, c) = (rng.random_range(1..=4), rng.random_range(2..=6));
            let x = random(&mut rng, &[b, c]);
            extra.labels = simplex_rows(&mut rng, b, c);
            check_graph(&[x], &extra, ce_graph)
        }
        GradCase::CriticLoss | GradCase::ActorLoss => a2c_error(case == GradCase::CriticLoss, &mut rng),
    }
}

/// Probes the A2C losses by perturbing sampled entries of the critic (or
/// actor) parameters directly.
fn a2c_error(critic: bool, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let kind = if rng.random_bool(0.5) {
        PolicyKind::Marl
    } else {
        PolicyKind::Independent
    };
    let mut bundle = PolicyBundle::<f64>::new(kind, 4, (16, 16), rng).map_err(err)?;
    let b = rng.random_range(2..=3);
    let images = Tensor::new(&[b, 3, 16, 16], (0..b * 768).map(|_| rng.random::<f64>()).collect()).map_err(err)?;
    let state = bundle.extract_state(&images).map_err(err)?;
    let obs = bundle
        .extract_observations(&split_patches(&images, &PatchGrid::new(4).map_err(err)?).map_err(err)?)
        .map_err(err)?;
    let rewards: Vec<f64> = (0..b).map(|_| rng.random_range(-1.0..1.0)).collect();
    let entropy_coef = 0.01;

    // Loss value and, optionally, parameter gradients for `bundle`.
    let run = |bundle: &mut PolicyBundle<f64>, grads: bool| -> Result<Probe, String> {
        let tape = Tape::new();
        let sel = bundle
            .select_actions(
                &tape,
                &state,
                &obs,
                SelectMode::Greedy,
                Pass::Train,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .map_err(err)?;
        let transition = transition(&state, &obs, &sel.ops, &rewards);
        let losses = a2c_losses(bundle, &sel, &transition, entropy_coef).map_err(err)?;
        let loss = if critic { losses.critic } else { losses.actor };
        let value = loss.value().data()[0];
        if !grads {
            return Ok((value, sel.ops.clone(), Vec::new()));
        }
        let g = tape.backward(loss).map_err(err)?;
        let forward = if critic {
            &losses.critic_forward
        } else {
            &losses.actor_forward
        };
        Ok((value, sel.ops.clone(), forward.param_grads(&g)))
    };

    let (_, ops, analytic) = run(&mut bundle, true)?;
    let sizes: Vec<usize> = analytic.iter().map(|t| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst: f64 = 0.0;
    let mut probed = 0;
    for _ in 0..PARAM_SAMPLES.min(total) {
        let mut flat = rng.random_range(0..total);
        let which = sizes
            .iter()
            .position(|&s| {
                if flat < s {
                    true
                } else {
                    flat -= s;
                    false
                }
            })
            .expect("index within total");
        let probe = |delta: f64| -> Result<(f64, Vec<OpKind>), String> {
            let mut copy = bundle.clone();
            let net: &mut Network<f64> = if critic { &mut copy.critic } else { &mut copy.actor };
            net.params_mut()[which].data_mut()[flat] += delta;
            let (v, o, _) = run(&mut copy, false)?;
            Ok((v, o))
        };
        let (plus, ops_p) = probe(STEP)?;
        let (minus, ops_m) = probe(-STEP)?;
        if ops_p != ops || ops_m != ops {
            continue;
        }
        let e = rel_err(analytic[which].data()[flat], (plus - minus) / (2.0 * STEP));
        if e.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(e);
        probed += 1;
    }
    if probed == 0 {
        return Err("every probe changed the chosen actions".into());
    }
    Ok(worst)
}

fn transition(state: &StateFeatures<f64>, obs: &Tensor<f64>, ops: &[OpKind], rewards: &[f64]) -> Transition<f64> {
    Transition {
        state: state.clone(),
        observations: obs.clone(),
        actions: ops.to_vec(),
        rewards: rewards.to_vec(),
        gamma: 0.99,
        horizon: 1,
    }
}

/// Every gradient case over `instances` seeded instances.
pub fn run_grad_checks(instances: u64, seed: u64, fault: Option<Fault>) -> Vec<CheckOutcome> {
    GradCase::ALL
        .iter()
        .map(|&case| {
            let mut worst: f64 = 0.0;
            for i in 0..instances {
                match grad_error(case, seed.wrapping_add(i), fault) {
                    Ok(e) if e.is_nan() => worst = f64::NAN,
                    Ok(e) => worst = worst.max(e),
                    Err(e) => return CheckOutcome::new(format!("grad/{case}"), false, e),
                }
            }
            CheckOutcome::new(
                format!("grad/{case}"),
                worst <= GRAD_TOLERANCE,
                format!("worst relative error {worst:.3e} over {instances} instances"),
            )
        })
        .collect()
}

fn random_images(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random::<f64>()).collect()).expect("consistent shape")
}

fn one_hot(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> Tensor<f64> {
    let mut data = vec![0.0; rows * classes];
    for r in 0..rows {
        data[r * classes + rng.random_range(0..classes)] = 1.0;
    }
    Tensor::new(&[rows, classes], data).expect("consistent shape")
}

/// Grouped and per-patch executors must agree exactly on `seeds` random
/// plans (batch 4 to 16, 4 or 16 patches).
pub fn executor_equivalence(seeds: u64, seed: u64) -> CheckOutcome {
    for s in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s));
        let b = rng.random_range(4..=16);
        let n = if s % 2 == 0 { 4 } else { 16 };
        let grid = PatchGrid::new(n).expect("perfect square");
        let images = random_images(&mut rng, &[b, 3, 32, 32]);
        let labels = one_hot(&mut rng, b, 10);
        let ops: Vec<OpKind> = (0..b * n)
            .map(|_| OpKind::ALL[rng.random_range(0..OpKind::COUNT)])
            .collect();
        let frac = rng.random::<f64>();
        let actions = draw_actions(&ops, n, frac, seed, s);
        let outcome = (|| -> Result<bool, String> {
            let plan = assign_partners(actions, b, n, &mut rng).map_err(err)?;
            let grouped = run_grouped(&images, &labels, &plan, &grid).map_err(err)?;
            let reference = execute_sequential(&images, &labels, &plan, &grid).map_err(err)?;
            Ok(grouped.images.max_abs_diff(&reference.images).map_err(err)? == 0.0
                && grouped.labels.max_abs_diff(&reference.labels).map_err(err)? == 0.0)
        })();
        match outcome {
            Ok(true) => {}
            Ok(false) => {
                return CheckOutcome::new("kernel/executor-equivalence", false, format!("mismatch at seed {s}"))
            }
            Err(e) => return CheckOutcome::new("kernel/executor-equivalence", false, e),
        }
    }
    CheckOutcome::new(
        "kernel/executor-equivalence",
        true,
        format!("{seeds} plans, max abs diff 0"),
    )
}

fn apply(op: OpKind, patches: &Tensor<f64>, action: AugAction, partners: Option<&Tensor<f64>>) -> Tensor<f64> {
    let k = patches.shape()[0];
    apply_operation(op, patches, &vec![action; k], partners).expect("valid op call")
}

/// Operation identities, idempotence and range on random patches.
pub fn op_properties(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_images(&mut rng, &[6, 3, 8, 8]);
    let y = random_images(&mut rng, &[6, 3, 8, 8]);
    let exact = |a: &Tensor<f64>, b: &Tensor<f64>| a.max_abs_diff(b).map(|d| d == 0.0).unwrap_or(false);
    let close = |a: &Tensor<f64>, b: &Tensor<f64>| a.max_abs_diff(b).map(|d| d <= 1e-12).unwrap_or(false);
    let mut out = Vec::new();
    let mut push = |name: &str, ok: bool| {
        out.push(CheckOutcome::new(
            format!("kernel/{name}"),
            ok,
            if ok { "holds" } else { "violated" },
        ));
    };

    let inv = |t: &Tensor<f64>| apply(OpKind::Invert, t, AugAction::forced(OpKind::Invert, 0.0), None);
    push("invert-involution", close(&inv(&inv(&x)), &x));
    let eq = |t: &Tensor<f64>| apply(OpKind::Equalize, t, AugAction::forced(OpKind::Equalize, 0.0), None);
    let once = eq(&x);
    push("equalize-idempotent", exact(&eq(&once), &once));
    let cut = |t: &Tensor<f64>| apply(OpKind::Cutout, t, AugAction::forced(OpKind::Cutout, 0.0), None);
    let c1 = cut(&x);
    push("cutout-idempotent", exact(&cut(&c1), &c1));
    let means_ok = x.data().chunks(64).zip(c1.data().chunks(64)).all(|(src, dst)| {
        let mean = src.iter().sum::<f64>() / 64.0;
        dst.iter().all(|&v| v == mean.clamp(0.0, 1.0))
    });
    push("cutout-channel-mean", means_ok);
    push(
        "brightness-identity",
        exact(
            &apply(OpKind::Brightness, &x, AugAction::forced(OpKind::Brightness, 1.0), None),
            &x,
        ),
    );
    push(
        "mixup-identity",
        exact(
            &apply(
                OpKind::Mixup,
                &x,
                AugAction::forced(OpKind::Mixup, 0.0).with_lambda(1.0),
                Some(&y),
            ),
            &x,
        ),
    );
    push(
        "rotate-identity",
        close(
            &apply(OpKind::Rotate, &x, AugAction::forced(OpKind::Rotate, 0.0), None),
            &x,
        ),
    );
    let mut in_range = true;
    for op in OpKind::ALL {
        for _ in 0..4 {
            let mut action = crate::augment::sample_action(op, rng.random(), &mut rng);
            action.applied = true;
            let partners = op.is_mixing().then_some(&y);
            let r = apply(op, &x, action, partners);
            in_range &= r.data().iter().all(|v| (0.0..=1.0).contains(v));
        }
    }
    push("outputs-in-unit-range", in_range);
    out
}

/// The worked Mixup example plus simplex membership on random plans.
pub fn label_algebra(seed: u64) -> Vec<CheckOutcome> {
    let own = [1.0f64, 0.0];
    let other = [0.0f64, 1.0];
    let mut actions = vec![AugAction::skip(OpKind::Invert); 4];
    actions[0] = AugAction::forced(OpKind::Mixup, 0.0)
        .with_lambda(0.5)
        .with_partner(PatchRef { image: 1, patch: 0 });
    let partners = [Some(&other[..]), None, None, None];
    let example = mix_labels(&actions, &own, &partners);
    let ok = matches!(&example, Ok(v) if v == &vec![0.875, 0.125]);
    let mut out = vec![CheckOutcome::new("labels/mixup-example", ok, format!("{example:?}"))];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut simplex = true;
    for _ in 0..200 {
        let n = if rng.random_bool(0.5) { 4 } else { 16 };
        let classes = rng.random_range(2..=10);
        let hot = |rng: &mut ChaCha8Rng| {
            let mut v = vec![0.0f64; classes];
            v[rng.random_range(0..classes)] = 1.0;
            v
        };
        let own = hot(&mut rng);
        let partner_rows: Vec<Vec<f64>> = (0..n).map(|_| hot(&mut rng)).collect();
        let actions: Vec<AugAction> = (0..n)
            .map(|_| {
                let op = OpKind::ALL[rng.random_range(0..OpKind::COUNT)];
                let mut a = crate::augment::sample_action(op, rng.random(), &mut rng);
                if op.is_mixing() && a.applied {
                    a = a.with_partner(PatchRef { image: 1, patch: 0 });
                }
                a
            })
            .collect();
        let partners: Vec<Option<&[f64]>> = actions
            .iter()
            .zip(&partner_rows)
            .map(|(a, row)| a.partner.map(|_| row.as_slice()))
            .collect();
        match mix_labels(&actions, &own, &partners) {
            Ok(v) => {
                let s: f64 = v.iter().sum();
                simplex &= (s - 1.0).abs() <= 1e-12 && v.iter().all(|&p| p >= 0.0);
            }
            Err(_) => simplex = false,
        }
    }
    out.push(CheckOutcome::new("labels/simplex", simplex, "200 random plans"));
    out
}

/// Executor equivalence, operation properties and label algebra.
pub fn run_kernel_checks(seeds: u64, seed: u64) -> Vec<CheckOutcome> {
    let mut out = vec![executor_equivalence(seeds, seed)];
    out.extend(op_properties(seed));
    out.extend(label_algebra(seed));
    out
}

/// The bandit must put at least `target` probability on the rewarded
/// operation within the update budget, for every seed.
pub fn run_bandit_checks(seeds: &[u64], target: f64) -> Vec<CheckOutcome> {
    seeds
        .iter()
        .map(|&seed| {
            let config = BanditConfig {
                seed,
                target,
                ..BanditConfig::default()
            };
            match run_bandit(&config) {
                Ok(r) => CheckOutcome::new(
                    format!("bandit/seed-{seed}"),
                    r.final_prob >= target,
                    format!(
                        "p({}) = {:.3} after {} updates",
                        config.rewarded, r.final_prob, r.updates
                    ),
                ),
                Err(e) => CheckOutcome::new(format!("bandit/seed-{seed}"), false, e.to_string()),
            }
        })
        .collect()
}
