use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::{AugAction, Axis, OpKind};
use crate::rng::{purpose, stream};

/// How an operation's magnitude evolves over training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Magnitude {
    /// The operation takes no magnitude.
    None,
    /// Constant magnitude.
    Fixed(f64),
    /// Linear ramp from the mild end to the severe end.
    Ramp { mild: f64, severe: f64 },
    /// Amplitude ramps from 0 to `max`, sign drawn uniformly.
    Symmetric { max: f64 },
}

impl Magnitude {
    pub fn of(op: OpKind) -> Self {
        match op {
            OpKind::Brightness | OpKind::Contrast => Magnitude::Ramp {
                mild: 0.95,
                severe: 0.5,
            },
            OpKind::Sharpness => Magnitude::Ramp { mild: 1.0, severe: 0.5 },
            OpKind::Posterize => Magnitude::Fixed(3.0),
            OpKind::Solarize => Magnitude::Fixed(0.1),
            OpKind::Rotate | OpKind::Shear => Magnitude::Symmetric { max: 30.0 },
            OpKind::Translate => Magnitude::Symmetric { max: 0.4 },
            OpKind::Color => Magnitude::Symmetric { max: 0.3 },
            OpKind::CutMix
            | OpKind::Cutout
            | OpKind::Invert
            | OpKind::Mixup
            | OpKind::RandomErasing
            | OpKind::Equalize => Magnitude::None,
        }
    }

    /// Magnitude at training progress `frac` in `[0,1]`.
    pub fn at(self, frac: f64, positive: bool) -> f64 {
        let frac = frac.clamp(0.0, 1.0);
        match self {
            Magnitude::None => 0.0,
            Magnitude::Fixed(v) => v,
            Magnitude::Ramp { mild, severe } => mild + frac * (severe - mild),
            Magnitude::Symmetric { max } => {
                let m = frac * max;
                if positive {
                    m
                } else {
                    -m
                }
            }
        }
    }
}

/// Randomised parameters of one action, before the apply draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionParams {
    pub p: f64,
    pub magnitude: f64,
    pub axis: Axis,
    pub lambda: f64,
}

/// Draws `p ~ U(0,1)`, the scheduled magnitude, a uniform axis and the mixing
/// coefficient. The same four draws are consumed for every operation.
/// `epoch_frac` is clamped to `[0,1]`.
pub fn sample_action_params(op: OpKind, epoch_frac: f64, rng: &mut impl Rng) -> ActionParams {
    let p: f64 = rng.random();
    let axis = if rng.random::<bool>() { Axis::Y } else { Axis::X };
    let positive: bool = rng.random();
    let beta: f64 = Beta::new(1.0, 1.0).expect("Beta(1,1) is valid").sample(rng);
    ActionParams {
        p,
        magnitude: Magnitude::of(op).at(epoch_frac, positive),
        axis: if op.uses_axis() { axis } else { Axis::X },
        lambda: if op.is_mixing() { beta } else { 1.0 },
    }
}

/// Samples parameters, resolves the Bernoulli(p) apply draw and seeds the
/// operation's internal randomness.
pub fn sample_action(op: OpKind, epoch_frac: f64, rng: &mut impl Rng) -> AugAction {
    let params = sample_action_params(op, epoch_frac, rng);
    let applied = rng.random::<f64>() < params.p;
    AugAction {
        op,
        p: params.p,
        magnitude: params.magnitude,
        axis: params.axis,
        lambda: params.lambda,
        applied,
        partner: None,
        seed: rng.next_u64(),
    }
}

/// Turns chosen operations (row-major over `[B,N]`) into actions, each patch
/// drawing from its own stream keyed by `(seed, step, image, patch)`.
pub fn draw_actions(ops: &[OpKind], patches: usize, epoch_frac: f64, seed: u64, step: u64) -> Vec<AugAction> {
    ops.iter()
        .enumerate()
        .map(|(k, &op)| {
            let (b, i) = (k / patches.max(1), k % patches.max(1));
            let mut rng = stream(seed, &[purpose::PATCH, step, b as u64, i as u64]);
            sample_action(op, epoch_frac, &mut rng)
        })
        .collect()
}
