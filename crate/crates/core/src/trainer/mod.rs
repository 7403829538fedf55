//! Co-training of the augmentation policy and the target classifier, plus
//! evaluation, importance analysis, logging and checkpoints.
//!
//! Every random draw comes from a stream keyed by the run seed and the
//! position in training (see [`crate::rng`]), so a checkpoint only needs the
//! weights and the epoch/step counters to resume exactly.
//!
//! A run directory holds `config.snapshot`, `metrics.csv` (one row per
//! batch), `policy_usage.csv` (one row per epoch, bin and operation),
//! `epochs.csv` (test accuracy and mean reward per epoch) and
//! `ckpt_epoch_<e>.bin`, written after `e` completed epochs.

mod analysis;
mod checkpoint;
mod config;
mod data;

pub use analysis::{
    bin_patch_importance, bin_scores, grad_cam, patch_scores, resample_nearest, usage_fractions, ImportanceBin,
    PolicyUsageRecord,
};
pub use checkpoint::{Array, ArrayData, Checkpoint, CheckpointError, MAGIC, VERSION};
pub use config::{ConfigError, DatasetKind, LrDecay, TrainConfig};
pub use data::{
    load_cifar10, make_synth_dataset, parse_cifar_records, DataError, DatasetSplit, CIFAR_CLASSES, CIFAR_RECORD,
};

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::augment::{draw_actions, execute_plan, split_patches, AugmentError, PatchGrid};
use crate::autodiff::Tape;
use crate::marl::{a2c_update, compute_reward, A2cConfig, MarlError, PolicyBundle, PolicyKind, SelectMode, Transition};
use crate::nn::{build_target_cnn, soft_cross_entropy, Network, NnError, Pass, Sgd};
use crate::rng::{derive_seed, purpose, stream};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Marl(#[from] MarlError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("non-finite {what} at batch {step}")]
    NonFinite { what: &'static str, step: usize },
}

pub type Result<T> = std::result::Result<T, TrainerError>;

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss_clean: f64,
    pub loss_aug: f64,
    pub reward: f64,
    pub critic_value: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
}

/// One row of `epochs.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub test_accuracy: f64,
    pub mean_reward: f64,
    pub mean_loss_aug: f64,
}

#[derive(Serialize)]
struct UsageRow<'a> {
    epoch: usize,
    bin: &'a str,
    op: &'a str,
    fraction: f64,
}

/// Policy, target network and optimizer state with the training counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    config: TrainConfig,
    pub bundle: PolicyBundle<f32>,
    pub target: Network<f32>,
    optimizer: Sgd<f32>,
    grid: PatchGrid,
    /// Completed epochs.
    epoch: usize,
    /// Completed batches.
    step: usize,
}

impl Trainer {
    /// Fresh networks for RGB images of `image_size`. The target and the
    /// policy draw from separate streams, so runs that differ only in the
    /// policy start from the same classifier.
    pub fn new(config: TrainConfig, image_size: (usize, usize)) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, &[purpose::INIT, 0]);
        let target = build_target_cnn(config.num_classes, 3, image_size, &mut rng)?;
        let mut rng = stream(config.seed, &[purpose::INIT, 1]);
        let bundle = PolicyBundle::new(config.policy, config.patches, image_size, &mut rng)?;
        let grid = PatchGrid::new(config.patches)?;
        let optimizer = Sgd::new(
            config.target_lr as f32,
            config.target_momentum as f32,
            config.target_wd as f32,
        );
        Ok(Trainer {
            config,
            bundle,
            target,
            optimizer,
            grid,
            epoch: 0,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Position in the magnitude schedule: 0 in the first epoch, 1 in the last.
    fn epoch_frac(&self) -> f64 {
        if self.config.epochs <= 1 {
            0.0
        } else {
            self.epoch as f64 / (self.config.epochs - 1) as f64
        }
    }

    /// One pass over `train` in a seeded shuffled order; returns one metrics
    /// row per batch.
    pub fn train_epoch(&mut self, train: &DatasetSplit) -> Result<Vec<StepMetrics>> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(self.config.seed, &[purpose::SHUFFLE, self.epoch as u64]));
        self.optimizer.lr = self
            .config
            .lr_decay
            .rate(self.config.target_lr, self.epoch, self.config.epochs) as f32;
        let mut rows = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let (images, labels) = train.batch(chunk);
            rows.push(self.train_step(&images, &labels)?);
            self.step += 1;
        }
        self.epoch += 1;
        Ok(rows)
    }

    fn train_step(&mut self, images: &Tensor<f32>, labels: &Tensor<f32>) -> Result<StepMetrics> {
        let cfg = &self.config;
        let step = self.step;
        let mut row = StepMetrics {
            step,
            epoch: self.epoch,
            loss_clean: 0.0,
            loss_aug: 0.0,
            reward: 0.0,
            critic_value: 0.0,
            actor_loss: 0.0,
            critic_loss: 0.0,
            entropy: 0.0,
        };

        // The clean pass measures; it must not move batch-norm statistics.
        let loss_clean = {
            let logits = self.target.predict(images, Pass::Measure)?;
            let tape = Tape::new();
            soft_cross_entropy(tape.constant(logits), labels)?.value().data()[0]
        };
        if !loss_clean.is_finite() {
            return Err(TrainerError::NonFinite {
                what: "clean loss",
                step,
            });
        }
        row.loss_clean = loss_clean as f64;

        let policy_tape = Tape::new();
        let mut pending = None;
        let (aug_images, aug_labels) = if cfg.policy == PolicyKind::Off {
            (images.clone(), labels.clone())
        } else {
            let state = self.bundle.extract_state(images)?;
            let obs = self.bundle.extract_observations(&split_patches(images, &self.grid)?)?;
            let selection = self.bundle.select_actions(
                &policy_tape,
                &state,
                &obs,
                SelectMode::Sample,
                Pass::Train,
                &mut stream(cfg.seed, &[purpose::ACTIONS, step as u64]),
            )?;
            let actions = draw_actions(&selection.ops, cfg.patches, self.epoch_frac(), cfg.seed, step as u64);
            let (_, exec) = execute_plan(
                images,
                labels,
                actions,
                &self.grid,
                &mut stream(cfg.seed, &[purpose::PARTNERS, step as u64]),
            )?;
            pending = Some((selection, state, obs));
            (exec.images, exec.labels)
        };

        let tape = Tape::new();
        let fwd = self
            .target
            .forward_with(&tape, tape.constant(aug_images), Pass::Train, false)?;
        let loss = soft_cross_entropy(fwd.output, &aug_labels)?;
        let loss_aug = loss.value().data()[0];
        if !loss_aug.is_finite() {
            return Err(TrainerError::NonFinite {
                what: "augmented loss",
                step,
            });
        }
        row.loss_aug = loss_aug as f64;
        let grads = tape.backward(loss).map_err(NnError::from)?;
        let target_grads = fwd.param_grads(&grads);

        if let Some((selection, state, obs)) = pending {
            let reward = compute_reward(loss_clean, loss_aug, cfg.reward_sign)?;
            let batch = images.shape()[0];
            let transition = Transition {
                state,
                observations: obs,
                actions: selection.ops.clone(),
                rewards: vec![reward; batch],
                gamma: cfg.gamma as f32,
                horizon: cfg.horizon,
            };
            let stats = a2c_update(
                &mut self.bundle,
                selection,
                &transition,
                &A2cConfig {
                    actor_lr: cfg.policy_lr,
                    critic_lr: cfg.policy_lr,
                    entropy_coef: cfg.entropy_coef,
                },
            )?;
            row.reward = reward as f64;
            row.critic_value = stats.value;
            row.actor_loss = stats.actor_loss;
            row.critic_loss = stats.critic_loss;
            row.entropy = stats.entropy;
        }

        // Updated only now, so both losses above saw the same weights.
        self.optimizer.step(self.target.params_mut(), &target_grads)?;
        Ok(row)
    }

    /// Which operations the policy samples for patches of each importance
    /// bin on `probe`, using the probe stream of the current epoch. Empty
    /// for `policy = off`.
    pub fn policy_usage(&mut self, probe: &DatasetSplit) -> Result<Vec<PolicyUsageRecord>> {
        if self.config.policy == PolicyKind::Off || probe.is_empty() {
            return Ok(Vec::new());
        }
        let epoch = self.epoch;
        let mut rng = stream(self.config.seed, &[purpose::PROBE, epoch as u64]);
        let image_size = probe.image_size();
        let mut bins = Vec::with_capacity(probe.len() * self.grid.count());
        let mut ops = Vec::with_capacity(bins.capacity());
        let idx: Vec<usize> = (0..probe.len()).collect();
        for chunk in idx.chunks(64) {
            let (images, _) = probe.batch(chunk);
            let classes: Vec<usize> = chunk.iter().map(|&i| probe.classes[i]).collect();
            let cam = grad_cam(&self.target, &images, &classes)?;
            let (mh, mw) = (cam.shape()[1], cam.shape()[2]);
            for map in cam.data().chunks(mh * mw) {
                bins.extend(bin_patch_importance(map, (mh, mw), image_size, &self.grid));
            }
            let state = self.bundle.extract_state(&images)?;
            let obs = self.bundle.extract_observations(&split_patches(&images, &self.grid)?)?;
            let tape = Tape::new();
            let selection =
                self.bundle
                    .select_actions(&tape, &state, &obs, SelectMode::Sample, Pass::Measure, &mut rng)?;
            ops.extend(selection.ops);
        }
        Ok(usage_fractions(epoch, &bins, &ops))
    }

    /// Weights, optimizer velocity, config and counters.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        let nets = [
            ("encoder.trunk", &self.bundle.encoder.trunk),
            ("encoder.projection", &self.bundle.encoder.projection),
            ("actor", &self.bundle.actor),
            ("critic", &self.bundle.critic),
            ("target", &self.target),
        ];
        for (prefix, net) in nets {
            for (name, t) in net.named_tensors() {
                ckpt.put_f32(format!("{prefix}.{name}"), t);
            }
        }
        for (i, v) in self.optimizer.velocity().iter().enumerate() {
            ckpt.put_f32(format!("target.velocity.{i}"), v);
        }
        ckpt.put_bytes("config", self.config.snapshot().as_bytes());
        ckpt.put_u64("progress", vec![self.epoch as u64, self.step as u64]);
        // Every stream is keyed by (seed, purpose, position); this is the
        // whole generator state.
        ckpt.put_u64("rng", vec![self.config.seed, self.step as u64]);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, image_size: (usize, usize)) -> Result<Self> {
        let config = checkpoint_config(ckpt)?;
        let mut trainer = Trainer::new(config, image_size)?;
        let lookup = |prefix: &'static str| move |name: &str| ckpt.f32_tensor(&format!("{prefix}.{name}")).ok();
        trainer.bundle.encoder.trunk.load_named(lookup("encoder.trunk"))?;
        trainer
            .bundle
            .encoder
            .projection
            .load_named(lookup("encoder.projection"))?;
        trainer.bundle.actor.load_named(lookup("actor"))?;
        trainer.bundle.critic.load_named(lookup("critic"))?;
        trainer.target.load_named(lookup("target"))?;
        let mut velocity = Vec::new();
        while let Ok(v) = ckpt.f32_tensor(&format!("target.velocity.{}", velocity.len())) {
            velocity.push(v);
        }
        trainer.optimizer.set_velocity(velocity);
        let progress = ckpt.u64s("progress")?;
        let [epoch, step] = progress else {
            return Err(CheckpointError::Mismatch {
                name: "progress".into(),
            }
            .into());
        };
        trainer.epoch = *epoch as usize;
        trainer.step = *step as usize;
        Ok(trainer)
    }
}

/// The configuration a checkpoint was written under.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<TrainConfig> {
    let text =
        String::from_utf8(ckpt.bytes("config")?).map_err(|_| CheckpointError::Mismatch { name: "config".into() })?;
    Ok(TrainConfig::parse(&text)?)
}

/// Fraction of argmax-correct predictions of `target` on `split`.
pub fn evaluate(target: &Network<f32>, split: &DatasetSplit) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(256) {
        let (images, _) = split.batch(chunk);
        let logits = target.predict(&images, Pass::Eval)?;
        let classes = logits.shape()[1];
        for (row, &i) in logits.data().chunks(classes).zip(chunk) {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            correct += (best == split.classes[i]) as usize;
        }
    }
    Ok(correct as f64 / split.len().max(1) as f64)
}

/// Training and test splits named by `config`.
pub fn load_datasets(config: &TrainConfig) -> Result<(DatasetSplit, DatasetSplit)> {
    match config.dataset {
        DatasetKind::Synth => Ok((
            make_synth_dataset(
                config.train_size,
                config.num_classes,
                derive_seed(config.seed, &[purpose::DATA, 0]),
            ),
            make_synth_dataset(
                config.test_size,
                config.num_classes,
                derive_seed(config.seed, &[purpose::DATA, 1]),
            ),
        )),
        DatasetKind::Cifar10 => {
            let dir = config.data_dir.as_deref().ok_or(DataError::Missing(PathBuf::new()))?;
            Ok(load_cifar10(dir, config.subset)?)
        }
    }
}

pub const CONFIG_FILE: &str = "config.snapshot";
pub const METRICS_FILE: &str = "metrics.csv";
pub const USAGE_FILE: &str = "policy_usage.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt_epoch_{epoch}.bin"))
}

/// Outcome of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub epochs: Vec<EpochSummary>,
    pub final_accuracy: f64,
    pub trainer: Trainer,
}

const METRICS_HEADER: &str = "step,epoch,loss_clean,loss_aug,reward,critic_value,actor_loss,critic_loss,entropy";
const USAGE_HEADER: &str = "epoch,bin,op,fraction";
const EPOCHS_HEADER: &str = "epoch,test_accuracy,mean_reward,mean_loss_aug";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainerError + '_ {
    move |source| TrainerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct Logs {
    dir: PathBuf,
}

impl Logs {
    /// Creates the three CSV files holding only their headers.
    fn create(dir: &Path) -> Result<Self> {
        for (file, header) in [
            (METRICS_FILE, METRICS_HEADER),
            (USAGE_FILE, USAGE_HEADER),
            (EPOCHS_FILE, EPOCHS_HEADER),
        ] {
            let path = dir.join(file);
            fs::write(&path, format!("{header}\n")).map_err(io_err(&path))?;
        }
        Ok(Logs { dir: dir.to_path_buf() })
    }

    /// Drops rows at or past a checkpoint: metrics from batch `step`,
    /// the other logs from epoch `epoch`.
    fn truncate(dir: &Path, epoch: usize, step: usize) -> Result<Self> {
        for (file, bound) in [(METRICS_FILE, step), (USAGE_FILE, epoch), (EPOCHS_FILE, epoch)] {
            let path = dir.join(file);
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let mut kept = String::new();
            for (i, line) in text.lines().enumerate() {
                let keep = i == 0
                    || line
                        .split(',')
                        .next()
                        .and_then(|f| f.parse::<usize>().ok())
                        .is_some_and(|v| v < bound);
                if keep {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
            fs::write(&path, kept).map_err(io_err(&path))?;
        }
        Ok(Logs { dir: dir.to_path_buf() })
    }

    fn append<R: Serialize>(&self, file: &str, rows: impl IntoIterator<Item = R>) -> Result<()> {
        let path = self.dir.join(file);
        let handle = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(handle);
        let csv_err = |source| TrainerError::Csv {
            path: path.clone(),
            source,
        };
        for row in rows {
            writer.serialize(row).map_err(csv_err)?;
        }
        writer.flush().map_err(io_err(&path))
    }
}

/// Trains from scratch into `dir` (created if needed, logs overwritten).
pub fn train_run(config: TrainConfig, dir: &Path, train: &DatasetSplit, test: &DatasetSplit) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let snapshot = dir.join(CONFIG_FILE);
    let mut f = File::create(&snapshot).map_err(io_err(&snapshot))?;
    f.write_all(config.snapshot().as_bytes()).map_err(io_err(&snapshot))?;
    let trainer = Trainer::new(config, train.image_size())?;
    let logs = Logs::create(dir)?;
    continue_run(trainer, logs, train, test, Vec::new())
}

/// Continues the run in `dir` from `checkpoint`, discarding log rows written
/// after it. The finished run matches an uninterrupted one byte for byte.
pub fn resume_run(dir: &Path, checkpoint: &Path, train: &DatasetSplit, test: &DatasetSplit) -> Result<RunSummary> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let trainer = Trainer::from_checkpoint(&ckpt, train.image_size())?;
    let logs = Logs::truncate(dir, trainer.epoch(), trainer.step())?;
    let epochs = read_epochs(&dir.join(EPOCHS_FILE))?;
    continue_run(trainer, logs, train, test, epochs)
}

fn read_epochs(path: &Path) -> Result<Vec<EpochSummary>> {
    let mut reader = csv::Reader::from_path(path).map_err(|source| TrainerError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| TrainerError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let field = |i: usize| record.get(i).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN);
        out.push(EpochSummary {
            epoch: field(0) as usize,
            test_accuracy: field(1),
            mean_reward: field(2),
            mean_loss_aug: field(3),
        });
    }
    Ok(out)
}

fn continue_run(
    mut trainer: Trainer,
    logs: Logs,
    train: &DatasetSplit,
    test: &DatasetSplit,
    mut epochs: Vec<EpochSummary>,
) -> Result<RunSummary> {
    let probe = train.head(trainer.config.probe_size);
    while !trainer.is_finished() {
        let epoch = trainer.epoch();
        let rows = trainer.train_epoch(train)?;
        logs.append(METRICS_FILE, &rows)?;
        let usage = trainer.policy_usage(&probe)?;
        logs.append(
            USAGE_FILE,
            usage.iter().map(|r| UsageRow {
                epoch,
                bin: r.bin.name(),
                op: r.op.name(),
                fraction: r.fraction,
            }),
        )?;
        let n = rows.len().max(1) as f64;
        let summary = EpochSummary {
            epoch,
            test_accuracy: evaluate(&trainer.target, test)?,
            mean_reward: rows.iter().map(|r| r.reward).sum::<f64>() / n,
            mean_loss_aug: rows.iter().map(|r| r.loss_aug).sum::<f64>() / n,
        };
        log::info!(
            "epoch {epoch}: test accuracy {:.4}, mean reward {:.5}",
            summary.test_accuracy,
            summary.mean_reward
        );
        logs.append(EPOCHS_FILE, [summary])?;
        epochs.push(summary);
        let done = trainer.epoch();
        let every = trainer.config.checkpoint_every;
        if (every > 0 && done.is_multiple_of(every)) || trainer.is_finished() {
            trainer.to_checkpoint().save(&checkpoint_path(&logs.dir, done))?;
        }
    }
    let final_accuracy = evaluate(&trainer.target, test)?;
    Ok(RunSummary {
        epochs,
        final_accuracy,
        trainer,
    })
}
