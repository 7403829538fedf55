//! A stateless test environment: every image rewards the fraction of its
//! agents that picked one fixed operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{a2c_update, A2cConfig, PolicyBundle, PolicyKind, Result, SelectMode, Transition};
use crate::augment::{split_patches, OpKind, PatchGrid};
use crate::autodiff::Tape;
use crate::nn::Pass;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BanditConfig {
    pub seed: u64,
    pub updates: usize,
    pub lr: f64,
    pub batch: usize,
    pub patches: usize,
    pub image_size: usize,
    pub rewarded: OpKind,
    /// Stop early once the rewarded probability reaches this value.
    pub target: f64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        BanditConfig {
            seed: 0,
            updates: 2000,
            lr: 1e-3,
            batch: 8,
            patches: 4,
            image_size: 32,
            rewarded: OpKind::Equalize,
            target: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditReport {
    /// Mean probability of the rewarded operation on a fresh batch.
    pub final_prob: f64,
    /// Same measure after every 100 updates.
    pub history: Vec<f64>,
    pub updates: usize,
}

fn random_images(rng: &mut ChaCha8Rng, batch: usize, size: usize) -> Tensor<f32> {
    let n = batch * 3 * size * size;
    Tensor::new(&[batch, 3, size, size], (0..n).map(|_| rng.random::<f32>()).collect()).expect("consistent shape")
}

/// Trains a fresh policy against the bandit and reports how much mass it
/// puts on the rewarded operation.
pub fn run_bandit(config: &BanditConfig) -> Result<BanditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let size = (config.image_size, config.image_size);
    let mut bundle = PolicyBundle::<f32>::new(PolicyKind::Marl, config.patches, size, &mut rng)?;
    let grid = PatchGrid::new(config.patches)?;
    let a2c = A2cConfig {
        actor_lr: config.lr,
        critic_lr: config.lr,
        entropy_coef: 0.0,
    };
    let target = config.rewarded.index();

    let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed0f9e0b);
    let mut measure = |bundle: &PolicyBundle<f32>| -> Result<f64> {
        let images = random_images(&mut probe_rng, config.batch, config.image_size);
        let state = bundle.extract_state(&images)?;
        let obs = bundle.extract_observations(&split_patches(&images, &grid)?)?;
        let probs = bundle.action_probs(&state, &obs, Pass::Measure)?;
        let rows = probs.shape()[0];
        Ok(probs
            .data()
            .chunks(probs.shape()[1])
            .map(|r| r[target] as f64)
            .sum::<f64>()
            / rows as f64)
    };

    let mut history = Vec::new();
    let mut done = 0;
    for step in 0..config.updates {
        let images = random_images(&mut rng, config.batch, config.image_size);
        let state = bundle.extract_state(&images)?;
        let obs = bundle.extract_observations(&split_patches(&images, &grid)?)?;
        let tape = Tape::new();
        let selection = bundle.select_actions(&tape, &state, &obs, SelectMode::Sample, Pass::Train, &mut rng)?;
        let rewards: Vec<f32> = selection
            .ops
            .chunks(config.patches)
            .map(|ops| ops.iter().filter(|&&o| o == config.rewarded).count() as f32 / config.patches as f32)
            .collect();
        let transition = Transition {
            state,
            observations: obs,
            actions: selection.ops.clone(),
            rewards,
            gamma: 0.99,
            horizon: 1,
        };
        a2c_update(&mut bundle, selection, &transition, &a2c)?;
        done = step + 1;
        if done % 100 == 0 {
            let p = measure(&bundle)?;
            history.push(p);
            if p >= config.target {
                break;
            }
        }
    }
    let final_prob = measure(&bundle)?;
    Ok(BanditReport {
        final_prob,
        history,
        updates: done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_run_moves_toward_rewarded_op() {
        let report = run_bandit(&BanditConfig {
            updates: 200,
            batch: 4,
            ..BanditConfig::default()
        })
        .unwrap();
        assert!(report.final_prob > 0.1, "{report:?}");
        assert_eq!(report.history.len(), 2);
    }
}
