use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::augment::PatchGrid;
use crate::marl::{PolicyKind, RewardSign};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synth,
    Cifar10,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Synth => "synth",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

/// Learning-rate schedule of the target network, evaluated per epoch.
#[derive(Debug, Clone, PartialEq)]
pub enum LrDecay {
    /// Half-cosine from the base rate towards zero.
    Cosine,
    /// Multiply by 0.1 at each listed epoch.
    MultiStep(Vec<usize>),
}

impl LrDecay {
    pub fn rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrDecay::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrDecay::MultiStep(steps) => base * 0.1f64.powi(steps.iter().filter(|&&s| epoch >= s).count() as i32),
        }
    }
}

impl std::fmt::Display for LrDecay {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LrDecay::Cosine => f.write_str("cosine"),
            LrDecay::MultiStep(steps) => {
                let list: Vec<String> = steps.iter().map(|s| s.to_string()).collect();
                write!(f, "multistep:{}", list.join(","))
            }
        }
    }
}

impl FromStr for LrDecay {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "cosine" {
            return Ok(LrDecay::Cosine);
        }
        let list = s
            .strip_prefix("multistep:")
            .ok_or("expected `cosine` or `multistep:<e1>,<e2>,...`")?;
        let steps = list
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(LrDecay::MultiStep(steps))
    }
}

/// Every training hyperparameter. Keys in config files and command-line flags
/// are the same kebab-case strings, listed in [`TrainConfig::KEYS`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub patches: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub target_lr: f64,
    pub target_wd: f64,
    pub target_momentum: f64,
    pub lr_decay: LrDecay,
    pub policy_lr: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub horizon: usize,
    pub seed: u64,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// Keep only the first `k` training images of each class.
    pub subset: Option<usize>,
    pub train_size: usize,
    pub test_size: usize,
    pub num_classes: usize,
    pub policy: PolicyKind,
    pub reward_sign: RewardSign,
    pub probe_size: usize,
    /// Save a checkpoint every this many epochs; 0 keeps only the last.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patches: 4,
            batch_size: 128,
            epochs: 30,
            target_lr: 0.1,
            target_wd: 5e-4,
            target_momentum: 0.9,
            lr_decay: LrDecay::Cosine,
            policy_lr: 1e-4,
            entropy_coef: 0.0,
            gamma: 0.99,
            horizon: 1,
            seed: 0,
            dataset: DatasetKind::Synth,
            data_dir: None,
            subset: None,
            train_size: 2000,
            test_size: 500,
            num_classes: 2,
            policy: PolicyKind::Marl,
            reward_sign: RewardSign::Paper,
            probe_size: 256,
            checkpoint_every: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl TrainConfig {
    /// Config keys with a one-line description each, in snapshot order.
    pub const KEYS: &'static [(&'static str, &'static str)] = &[
        ("patches", "patches per image (perfect square)"),
        ("batch-size", "images per batch"),
        ("epochs", "training epochs"),
        ("target-lr", "initial learning rate of the classifier"),
        ("target-wd", "weight decay of the classifier"),
        ("target-momentum", "SGD momentum of the classifier"),
        ("lr-decay", "cosine | multistep:<e1>,<e2>,..."),
        ("policy-lr", "learning rate of actor and critic"),
        ("entropy-coef", "entropy bonus weight in the actor loss"),
        ("gamma", "discount factor"),
        ("horizon", "steps per episode (only 1 is supported)"),
        ("seed", "master random seed"),
        ("dataset", "synth | cifar10"),
        ("data-dir", "directory with the CIFAR-10 binary batches"),
        ("subset", "first k training images per class (0 = all)"),
        ("train-size", "synthetic training images"),
        ("test-size", "synthetic test images"),
        ("num-classes", "synthetic classes"),
        ("policy", "marl | random | independent | off"),
        ("reward-sign", "paper | adversarial"),
        ("probe-size", "images used for per-epoch policy analysis"),
        ("checkpoint-every", "epochs between checkpoints (0 = last only)"),
    ];

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "patches" => self.patches = parse(key, value)?,
            "batch-size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "target-lr" => self.target_lr = parse(key, value)?,
            "target-wd" => self.target_wd = parse(key, value)?,
            "target-momentum" => self.target_momentum = parse(key, value)?,
            "lr-decay" => self.lr_decay = parse(key, value)?,
            "policy-lr" => self.policy_lr = parse(key, value)?,
            "entropy-coef" => self.entropy_coef = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "dataset" => {
                self.dataset = match value {
                    "synth" => DatasetKind::Synth,
                    "cifar10" => DatasetKind::Cifar10,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            reason: "expected synth or cifar10".into(),
                        })
                    }
                }
            }
            "data-dir" => {
                self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "subset" => {
                let k: usize = parse(key, value)?;
                self.subset = (k > 0).then_some(k);
            }
            "train-size" => self.train_size = parse(key, value)?,
            "test-size" => self.test_size = parse(key, value)?,
            "num-classes" => self.num_classes = parse(key, value)?,
            "policy" => self.policy = parse(key, value)?,
            "reward-sign" => self.reward_sign = parse(key, value)?,
            "probe-size" => self.probe_size = parse(key, value)?,
            "checkpoint-every" => self.checkpoint_every = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Textual value of one key, as written by [`TrainConfig::snapshot`].
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "patches" => self.patches.to_string(),
            "batch-size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "target-lr" => self.target_lr.to_string(),
            "target-wd" => self.target_wd.to_string(),
            "target-momentum" => self.target_momentum.to_string(),
            "lr-decay" => self.lr_decay.to_string(),
            "policy-lr" => self.policy_lr.to_string(),
            "entropy-coef" => self.entropy_coef.to_string(),
            "gamma" => self.gamma.to_string(),
            "horizon" => self.horizon.to_string(),
            "seed" => self.seed.to_string(),
            "dataset" => self.dataset.name().to_string(),
            "data-dir" => self
                .data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "subset" => self.subset.unwrap_or(0).to_string(),
            "train-size" => self.train_size.to_string(),
            "test-size" => self.test_size.to_string(),
            "num-classes" => self.num_classes.to_string(),
            "policy" => self.policy.name().to_string(),
            "reward-sign" => self.reward_sign.name().to_string(),
            "probe-size" => self.probe_size.to_string(),
            "checkpoint-every" => self.checkpoint_every.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and text
    /// after `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`, then validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = TrainConfig::default();
        config.apply_text(text)?;
        config.validate()?;
        Ok(config)
    }

    /// All keys in `key = value` form; [`TrainConfig::parse`] inverts it.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (key, _) in Self::KEYS {
            let value = self.get(key).expect("every listed key has a value");
            writeln!(out, "{key} = {value}").expect("writing to a String");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = PatchGrid::new(self.patches) {
            return fail(e.to_string());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch-size must be at least 1".into());
        }
        for (name, v) in [("target-lr", self.target_lr), ("policy-lr", self.policy_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.target_wd >= 0.0 && self.entropy_coef >= 0.0) {
            return fail("target-wd and entropy-coef must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.target_momentum) {
            return fail("target-momentum must lie in [0,1)".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma must lie in (0,1], got {}", self.gamma));
        }
        if self.horizon != 1 {
            return fail(format!("horizon must be 1, got {}", self.horizon));
        }
        if self.dataset == DatasetKind::Synth
            && (self.num_classes < 2 || self.train_size < self.num_classes || self.test_size == 0)
        {
            return fail("synthetic data needs 2+ classes and at least one image per class".into());
        }
        if self.dataset == DatasetKind::Cifar10 && self.data_dir.is_none() {
            return fail("dataset cifar10 needs data-dir".into());
        }
        Ok(())
    }
}
