//! Patch grid, the fifteen augmentation operations, soft-label mixing and the
//! batched executor.
//!
//! Every random quantity an operation needs is drawn up front and stored in
//! its [`AugAction`], so executing a plan is a pure function of the images,
//! labels and actions. Grouping patches by operation is then only a matter of
//! speed.

mod executor;
mod grid;
mod labels;
mod ops;
mod schedule;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::TensorError;

pub use executor::{assign_partners, execute_plan, execute_sequential, run_grouped, Execution, Plan};
pub use grid::{merge_patches, split_patches, PatchGrid};
pub use labels::mix_labels;
pub use ops::apply_operation;
pub use schedule::{draw_actions, sample_action, sample_action_params, ActionParams, Magnitude};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("patch count {0} is not a positive perfect square")]
    NotPerfectSquare(usize),
    #[error("a {height}x{width} image cannot be cut into a {side}x{side} grid")]
    Indivisible { height: usize, width: usize, side: usize },
    #[error("expected {expected}, found shape {found:?}")]
    Shape { expected: String, found: Vec<usize> },
    #[error("{0} needs partner patches")]
    MissingPartner(OpKind),
    #[error("{0} does not take partner patches")]
    UnexpectedPartner(OpKind),
    #[error("{found} actions supplied for {expected} patches")]
    ActionCount { expected: usize, found: usize },
    #[error("invalid {op} action: {reason}")]
    InvalidAction { op: OpKind, reason: String },
    #[error("{0} is not a one-hot label")]
    NotOneHot(String),
    #[error("unknown operation `{0}`")]
    UnknownOp(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

/// The action space. The discriminant is the actor's output slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Brightness,
    Contrast,
    CutMix,
    Cutout,
    Invert,
    Mixup,
    Posterize,
    Solarize,
    RandomErasing,
    Rotate,
    Sharpness,
    Shear,
    Translate,
    Color,
    Equalize,
}

impl OpKind {
    pub const COUNT: usize = 15;

    pub const ALL: [OpKind; Self::COUNT] = [
        OpKind::Brightness,
        OpKind::Contrast,
        OpKind::CutMix,
        OpKind::Cutout,
        OpKind::Invert,
        OpKind::Mixup,
        OpKind::Posterize,
        OpKind::Solarize,
        OpKind::RandomErasing,
        OpKind::Rotate,
        OpKind::Sharpness,
        OpKind::Shear,
        OpKind::Translate,
        OpKind::Color,
        OpKind::Equalize,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Brightness => "brightness",
            OpKind::Contrast => "contrast",
            OpKind::CutMix => "cutmix",
            OpKind::Cutout => "cutout",
            OpKind::Invert => "invert",
            OpKind::Mixup => "mixup",
            OpKind::Posterize => "posterize",
            OpKind::Solarize => "solarize",
            OpKind::RandomErasing => "random_erasing",
            OpKind::Rotate => "rotate",
            OpKind::Sharpness => "sharpness",
            OpKind::Shear => "shear",
            OpKind::Translate => "translate",
            OpKind::Color => "color",
            OpKind::Equalize => "equalize",
        }
    }

    /// Mixup and CutMix draw content from a partner patch and change labels.
    pub fn is_mixing(self) -> bool {
        matches!(self, OpKind::Mixup | OpKind::CutMix)
    }

    /// Shear and Translate act along a randomly chosen axis.
    pub fn uses_axis(self) -> bool {
        matches!(self, OpKind::Shear | OpKind::Translate)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|op| op.name() == s)
            .ok_or_else(|| AugmentError::UnknownOp(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Axis {
    #[default]
    X,
    Y,
}

/// Position of a patch inside a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchRef {
    pub image: usize,
    pub patch: usize,
}

/// One patch's fully resolved augmentation decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugAction {
    pub op: OpKind,
    /// Probability the operation is applied at all.
    pub p: f64,
    /// Operation strength, in the units of the operation (degrees, fraction,
    /// scale factor, bits or threshold). Zero for parameter-free operations.
    pub magnitude: f64,
    pub axis: Axis,
    /// Share of the patch's own content kept by Mixup.
    pub lambda: f64,
    /// Outcome of the Bernoulli(p) draw.
    pub applied: bool,
    /// Source patch for mixing operations, filled in by [`assign_partners`].
    pub partner: Option<PatchRef>,
    /// Seed for the operation's internal randomness (RandomErasing).
    pub seed: u64,
}

impl AugAction {
    /// An action that leaves its patch untouched.
    pub fn skip(op: OpKind) -> Self {
        AugAction {
            op,
            p: 0.0,
            magnitude: 0.0,
            axis: Axis::X,
            lambda: 1.0,
            applied: false,
            partner: None,
            seed: 0,
        }
    }

    /// An action that is certainly applied with the given magnitude.
    pub fn forced(op: OpKind, magnitude: f64) -> Self {
        AugAction {
            p: 1.0,
            magnitude,
            applied: true,
            ..Self::skip(op)
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_axis(mut self, axis: Axis) -> Self {
        self.axis = axis;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_partner(mut self, partner: PatchRef) -> Self {
        self.partner = Some(partner);
        self
    }

    fn invalid(&self, reason: String) -> AugmentError {
        AugmentError::InvalidAction { op: self.op, reason }
    }

    /// Checks that the action can be executed: probability and lambda in
    /// `[0,1]` and a finite magnitude. Magnitudes outside the training
    /// schedule are allowed here.
    pub fn check_executable(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(self.invalid(format!("probability {} outside [0,1]", self.p)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(self.invalid(format!("lambda {} outside [0,1]", self.lambda)));
        }
        if !self.magnitude.is_finite() {
            return Err(self.invalid(format!("magnitude {}", self.magnitude)));
        }
        Ok(())
    }

    /// [`AugAction::check_executable`] plus the magnitude range of the
    /// training schedule.
    pub fn validate(&self) -> Result<()> {
        self.check_executable()?;
        let m = self.magnitude;
        let ok = match Magnitude::of(self.op) {
            Magnitude::None => m == 0.0,
            Magnitude::Fixed(v) => m == v,
            Magnitude::Ramp { mild, severe } => m >= mild.min(severe) && m <= mild.max(severe),
            Magnitude::Symmetric { max } => m.abs() <= max,
        };
        if !ok {
            return Err(self.invalid(format!("magnitude {m} outside its range")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifteen_kinds_round_trip_through_names_and_indices() {
        assert_eq!(OpKind::ALL.len(), 15);
        for (i, op) in OpKind::ALL.iter().enumerate() {
            assert_eq!(op.index(), i);
            assert_eq!(OpKind::from_index(i), Some(*op));
            assert_eq!(op.name().parse::<OpKind>().unwrap(), *op);
        }
        assert!(OpKind::from_index(15).is_none());
        assert!("shearx".parse::<OpKind>().is_err());
    }

    #[test]
    fn validation_ranges() {
        assert!(AugAction::forced(OpKind::Rotate, -30.0).validate().is_ok());
        assert!(AugAction::forced(OpKind::Rotate, 31.0).validate().is_err());
        assert!(AugAction::forced(OpKind::Brightness, 0.4).validate().is_err());
        assert!(AugAction::forced(OpKind::Posterize, 3.0).validate().is_ok());
        assert!(AugAction::forced(OpKind::Invert, 0.5).validate().is_err());
        let mut a = AugAction::forced(OpKind::Mixup, 0.0);
        a.p = 1.5;
        assert!(a.validate().is_err());
    }
}
