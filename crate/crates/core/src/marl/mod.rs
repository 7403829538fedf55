//! The patch policy: every patch is an agent choosing one of the fifteen
//! operations. All agents share one actor; a centralized critic scores the
//! whole-image state. Training is one-step advantage actor-critic on the team
//! reward.

mod bandit;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::augment::{AugmentError, OpKind};
use crate::autodiff::{AutodiffError, Tape, Var};
use crate::nn::{
    build_actor, build_critic, build_encoder, sgd_step, FeatureEncoder, Forward, Network, NnError, Pass, ACTION_COUNT,
    ACTOR_IN_CHANNELS, OBS_CHANNELS, STATE_CHANNELS,
};
use crate::tensor::{Real, Tensor, TensorError};

pub use bandit::{run_bandit, BanditConfig, BanditReport};

#[derive(Debug, Error)]
pub enum MarlError {
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("expected {expected}, found shape {found:?}")]
    Shape { expected: String, found: Vec<usize> },
    #[error("only one-step transitions are supported, got horizon {0}")]
    UnsupportedHorizon(usize),
    #[error("the `{0}` policy has no learnable actor")]
    NoActor(PolicyKind),
    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

pub type Result<T> = std::result::Result<T, MarlError>;

/// Which augmentation policy drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    /// Shared actor on patch features plus whole-image state, centralized critic.
    Marl,
    /// Uniformly random operation per patch, no learning.
    Random,
    /// Shared actor without whole-image state; a critic on each patch's own
    /// features gives every agent its own advantage.
    Independent,
    /// No augmentation.
    Off,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Marl => "marl",
            PolicyKind::Random => "random",
            PolicyKind::Independent => "independent",
            PolicyKind::Off => "off",
        }
    }

    pub fn learns(self) -> bool {
        matches!(self, PolicyKind::Marl | PolicyKind::Independent)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = MarlError;

    fn from_str(s: &str) -> Result<Self> {
        [
            PolicyKind::Marl,
            PolicyKind::Random,
            PolicyKind::Independent,
            PolicyKind::Off,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| MarlError::Unknown {
            what: "policy",
            value: s.to_string(),
        })
    }
}

/// Orientation of the team reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RewardSign {
    /// `loss_clean - loss_aug`: augmentations that lower the loss are rewarded.
    #[default]
    Paper,
    /// `loss_aug - loss_clean`: augmentations that raise the loss are rewarded.
    Adversarial,
}

impl RewardSign {
    pub fn name(self) -> &'static str {
        match self {
            RewardSign::Paper => "paper",
            RewardSign::Adversarial => "adversarial",
        }
    }
}

impl fmt::Display for RewardSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RewardSign {
    type Err = MarlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(RewardSign::Paper),
            "adversarial" => Ok(RewardSign::Adversarial),
            _ => Err(MarlError::Unknown {
                what: "reward sign",
                value: s.to_string(),
            }),
        }
    }
}

/// Team reward from the classifier's clean and augmented losses, both taken
/// with the same parameters on the same batch.
pub fn compute_reward<T: Real>(loss_clean: T, loss_aug: T, sign: RewardSign) -> Result<T> {
    if !loss_clean.is_finite() || !loss_aug.is_finite() {
        return Err(MarlError::NonFinite(format!(
            "loss (clean {loss_clean}, augmented {loss_aug})"
        )));
    }
    Ok(match sign {
        RewardSign::Paper => loss_clean - loss_aug,
        RewardSign::Adversarial => loss_aug - loss_clean,
    })
}

/// `sum_t gamma^t r_t`.
pub fn discounted_return<T: Real>(rewards: &[T], gamma: T) -> T {
    rewards.iter().rev().fold(T::zero(), |acc, &r| r + gamma * acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    Sample,
    Greedy,
}

/// Whole-image features from the frozen encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFeatures<T> {
    /// `[B, state_dim]` flattened trunk features, the critic's input.
    pub flat: Tensor<T>,
    /// `[B, 16]` projected and pooled features broadcast to every agent.
    pub embedding: Tensor<T>,
}

/// Frozen encoder, shared actor and critic.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle<T> {
    pub encoder: FeatureEncoder<T>,
    pub actor: Network<T>,
    pub critic: Network<T>,
    kind: PolicyKind,
    patches: usize,
    image_size: (usize, usize),
}

impl<T: Real> PolicyBundle<T> {
    /// Builds all three networks for `patches` agents on `image_size` RGB
    /// images. Draw order from `rng`: encoder, actor, critic.
    pub fn new(kind: PolicyKind, patches: usize, image_size: (usize, usize), rng: &mut impl Rng) -> Result<Self> {
        let grid = crate::augment::PatchGrid::new(patches)?;
        let (ph, pw) = grid.patch_size(image_size.0, image_size.1)?;
        let state = FeatureEncoder::<T>::output_size(image_size.0, image_size.1);
        let obs = FeatureEncoder::<T>::output_size(ph, pw);
        let (Some((sh, sw)), Some((oh, ow))) = (state, obs) else {
            return Err(MarlError::Shape {
                expected: "images with patches of at least 3x3 pixels".into(),
                found: vec![image_size.0, image_size.1],
            });
        };
        let encoder = build_encoder(rng)?;
        let actor = build_actor(ACTOR_IN_CHANNELS, rng)?;
        let critic_dim = match kind {
            PolicyKind::Independent => OBS_CHANNELS * oh * ow,
            _ => STATE_CHANNELS * sh * sw,
        };
        let critic = build_critic(critic_dim, rng)?;
        Ok(PolicyBundle {
            encoder,
            actor,
            critic,
            kind,
            patches,
            image_size,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn action_count(&self) -> usize {
        ACTION_COUNT
    }

    /// Frozen features of whole images `[B,3,H,W]`.
    pub fn extract_state(&self, images: &Tensor<T>) -> Result<StateFeatures<T>> {
        let map = self.encoder.state_map(images)?;
        let b = map.shape()[0];
        let embedding = self.encoder.embed(&map)?;
        let flat = map.reshape(&[b, map.numel() / b])?;
        Ok(StateFeatures { flat, embedding })
    }

    /// Frozen features of every patch: `[B,N,C,h,w] -> [B,N,16,h',w']`.
    pub fn extract_observations(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let s = patches.shape();
        if s.len() != 5 || s[1] != self.patches {
            return Err(MarlError::Shape {
                expected: format!("[B,{},C,h,w] patches", self.patches),
                found: s.to_vec(),
            });
        }
        let (b, n) = (s[0], s[1]);
        let flat = patches.reshape(&[b * n, s[2], s[3], s[4]])?;
        let obs = self.encoder.observe(&flat)?;
        let o = obs.shape().to_vec();
        Ok(obs.reshape(&[b, n, o[1], o[2], o[3]])?)
    }

    fn split_obs(&self, observations: &Tensor<T>) -> Result<(usize, Tensor<T>)> {
        let s = observations.shape();
        if s.len() != 5 || s[1] != self.patches || s[2] != OBS_CHANNELS {
            return Err(MarlError::Shape {
                expected: format!("[B,{},{OBS_CHANNELS},h,w] observations", self.patches),
                found: s.to_vec(),
            });
        }
        Ok((s[0], observations.reshape(&[s[0] * s[1], s[2], s[3], s[4]])?))
    }

    /// Per-agent actor input `[B*N, 32, h', w']`: the agent's observation next
    /// to a spatial broadcast of the shared state embedding. The independent
    /// variant has no shared state and uses the agent's own pooled
    /// observation instead.
    pub fn actor_input(&self, state: &StateFeatures<T>, observations: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, obs) = self.split_obs(observations)?;
        let (h, w) = (obs.shape()[2], obs.shape()[3]);
        let context = match self.kind {
            PolicyKind::Independent => obs.global_avg_pool()?,
            _ => {
                if state.embedding.shape() != [b, OBS_CHANNELS] {
                    return Err(MarlError::Shape {
                        expected: format!("[{b},{OBS_CHANNELS}] state embedding"),
                        found: state.embedding.shape().to_vec(),
                    });
                }
                let per_agent: Vec<usize> = (0..b * self.patches).map(|k| k / self.patches).collect();
                state.embedding.gather_batch(&per_agent)?
            }
        };
        Ok(obs.concat_channels(&context.broadcast_spatial(h, w)?)?)
    }

    /// Critic input: whole-image state `[B, D]`, or each agent's flattened
    /// observation `[B*N, D]` for the independent variant.
    pub fn critic_input(&self, state: &StateFeatures<T>, observations: &Tensor<T>) -> Result<Tensor<T>> {
        match self.kind {
            PolicyKind::Independent => {
                let (_, obs) = self.split_obs(observations)?;
                let m = obs.shape()[0];
                Ok(obs.reshape(&[m, obs.numel() / m])?)
            }
            _ => Ok(state.flat.clone()),
        }
    }

    /// Action probabilities `[B*N, 15]` without recording gradients.
    pub fn action_probs(&self, state: &StateFeatures<T>, observations: &Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        if self.kind == PolicyKind::Random {
            let (b, _) = self.split_obs(observations)?;
            let u = T::one() / T::lit(ACTION_COUNT as f64);
            return Ok(Tensor::full(&[b * self.patches, ACTION_COUNT], u)?);
        }
        Ok(self.actor.predict(&self.actor_input(state, observations)?, pass)?)
    }

    /// Critic values without recording gradients: `[B]`, or `[B*N]` for the
    /// independent variant.
    pub fn values(&self, state: &StateFeatures<T>, observations: &Tensor<T>) -> Result<Vec<T>> {
        let v = self
            .critic
            .predict(&self.critic_input(state, observations)?, Pass::Eval)?;
        Ok(v.into_data())
    }

    /// Chooses one operation per agent. With `pass == Pass::Train` the actor's
    /// batch-norm statistics are updated. The returned selection keeps the
    /// recorded graph for [`a2c_update`].
    pub fn select_actions<'t>(
        &mut self,
        tape: &'t Tape<T>,
        state: &StateFeatures<T>,
        observations: &Tensor<T>,
        mode: SelectMode,
        pass: Pass,
        rng: &mut impl Rng,
    ) -> Result<Selection<'t, T>> {
        let (b, _) = self.split_obs(observations)?;
        let n = self.patches;
        if self.kind == PolicyKind::Random {
            let probs = self.action_probs(state, observations, pass)?;
            let ops: Vec<usize> = (0..b * n)
                .map(|_| match mode {
                    SelectMode::Sample => rng.random_range(0..ACTION_COUNT),
                    SelectMode::Greedy => 0,
                })
                .collect();
            let log_u = -(ACTION_COUNT as f64).ln();
            return Ok(Selection {
                ops: ops.iter().map(|&k| OpKind::ALL[k]).collect(),
                probs,
                joint_log_prob: vec![T::lit(n as f64 * log_u); b],
                entropy: T::lit(-log_u),
                graph: None,
            });
        }

        let input = tape.constant(self.actor_input(state, observations)?);
        let forward = self.actor.forward_with(tape, input, pass, true)?;
        let logits = forward.output;
        if !logits.value().all_finite() {
            return Err(MarlError::NonFinite("actor logits".into()));
        }
        let log_probs = logits.log_softmax();
        let probs_var = logits.softmax();
        let probs = (*probs_var.value()).clone();
        let m = b * n;
        let choice: Vec<usize> = match mode {
            SelectMode::Greedy => probs.argmax_rows(),
            SelectMode::Sample => probs
                .data()
                .chunks(ACTION_COUNT)
                .map(|row| sample_categorical(row, rng))
                .collect(),
        };
        let picked = log_probs.pick(&choice)?;
        let entropy_var = probs_var.mul(log_probs)?.sum_all().scale(-T::one() / T::lit(m as f64));
        let lp = picked.value();
        let joint_log_prob = lp
            .data()
            .chunks(n)
            .map(|c| c.iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        let entropy = entropy_var.value().data()[0];
        Ok(Selection {
            ops: choice.iter().map(|&k| OpKind::ALL[k]).collect(),
            probs,
            joint_log_prob,
            entropy,
            graph: Some(PolicyGraph {
                log_prob: picked,
                entropy: entropy_var,
                actor: forward,
            }),
        })
    }
}

fn sample_categorical<T: Real>(row: &[T], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in row.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last = k;
        }
        acc += p;
        if u < acc {
            return k;
        }
    }
    last
}

struct PolicyGraph<'t, T> {
    /// `log pi(a_i)` per agent, `[B*N]`.
    log_prob: Var<'t, T>,
    /// Mean per-agent entropy.
    entropy: Var<'t, T>,
    actor: Forward<'t, T>,
}

/// Joint action with its probabilities and, for learning policies, the
/// recorded actor graph.
pub struct Selection<'t, T> {
    /// Row-major `[B,N]` operations.
    pub ops: Vec<OpKind>,
    /// `[B*N, 15]` action distributions.
    pub probs: Tensor<T>,
    /// Per image, the sum over agents of `log pi(a_i)`.
    pub joint_log_prob: Vec<T>,
    /// Mean per-agent entropy.
    pub entropy: T,
    graph: Option<PolicyGraph<'t, T>>,
}

/// One environment step as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T> {
    pub state: StateFeatures<T>,
    /// `[B,N,16,h',w']`.
    pub observations: Tensor<T>,
    pub actions: Vec<OpKind>,
    /// Team reward per image, shared by that image's agents.
    pub rewards: Vec<T>,
    pub gamma: T,
    pub horizon: usize,
}

impl<T: Real> Transition<T> {
    /// Realized return per image. With a one-step horizon this is the reward
    /// itself, whatever the discount.
    pub fn returns(&self) -> Vec<T> {
        self.rewards
            .iter()
            .map(|&r| discounted_return(&[r], self.gamma))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct A2cConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_coef: f64,
}

impl Default for A2cConfig {
    fn default() -> Self {
        A2cConfig {
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            entropy_coef: 0.0,
        }
    }
}

/// Scalars reported by one update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct A2cStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    /// Mean critic value before the update.
    pub value: f64,
    pub advantage: f64,
    pub entropy: f64,
}

/// The two losses of one update, still on the tape.
pub struct A2cLosses<'t, T> {
    pub critic: Var<'t, T>,
    pub actor: Var<'t, T>,
    pub(crate) critic_forward: Forward<'t, T>,
    pub(crate) actor_forward: Forward<'t, T>,
    pub values: Vec<T>,
    pub advantages: Vec<T>,
}

/// Builds the critic loss `mean (R - V)^2` and the actor loss
/// `mean_b(-sum_i log pi(a_i) * A) - entropy_coef * entropy` with the
/// advantage held constant.
pub fn a2c_losses<'t, T: Real>(
    bundle: &mut PolicyBundle<T>,
    selection: &Selection<'t, T>,
    transition: &Transition<T>,
    entropy_coef: f64,
) -> Result<A2cLosses<'t, T>> {
    if transition.horizon != 1 {
        return Err(MarlError::UnsupportedHorizon(transition.horizon));
    }
    let graph = selection.graph.as_ref().ok_or(MarlError::NoActor(bundle.kind))?;
    let tape = graph.log_prob.tape();
    let n = bundle.patches;
    let returns = transition.returns();
    let b = returns.len();
    if selection.ops.len() != b * n {
        return Err(MarlError::Shape {
            expected: format!(
                "{} rewards for {} agents",
                selection.ops.len() / n.max(1),
                selection.ops.len()
            ),
            found: vec![b],
        });
    }
    let input = bundle.critic_input(&transition.state, &transition.observations)?;
    let rows = input.shape()[0];
    let per_agent = rows == b * n && bundle.kind == PolicyKind::Independent;
    let critic_forward = bundle
        .critic
        .forward_with(tape, tape.constant(input), Pass::Train, false)?;
    let values: Vec<T> = critic_forward.output.value().data().to_vec();
    let targets: Vec<T> = (0..rows)
        .map(|r| if per_agent { returns[r / n] } else { returns[r] })
        .collect();
    let advantages: Vec<T> = targets.iter().zip(&values).map(|(&t, &v)| t - v).collect();
    if advantages.iter().any(|a| !a.is_finite()) {
        return Err(MarlError::NonFinite("advantage".into()));
    }

    let target = tape.constant(Tensor::new(&[rows, 1], targets)?);
    let diff = target.sub(critic_forward.output)?;
    let critic = diff.mul(diff)?.mean_all();

    let scale = -T::one() / T::lit(b as f64);
    let weights: Vec<T> = (0..b * n)
        .map(|k| scale * if per_agent { advantages[k] } else { advantages[k / n] })
        .collect();
    let weights = tape.constant(Tensor::new(&[b * n], weights)?);
    let policy_term = graph.log_prob.mul(weights)?.sum_all();
    let actor = policy_term.sub(graph.entropy.scale(T::lit(entropy_coef)))?;
    Ok(A2cLosses {
        critic,
        actor,
        critic_forward,
        actor_forward: Forward {
            output: graph.actor.output,
            params: graph.actor.params.clone(),
            activations: Vec::new(),
        },
        values,
        advantages,
    })
}

/// One SGD step on the critic and one on the shared actor from a single
/// backward pass over the sum of both losses. Policies without an actor are
/// left untouched.
pub fn a2c_update<T: Real>(
    bundle: &mut PolicyBundle<T>,
    selection: Selection<'_, T>,
    transition: &Transition<T>,
    config: &A2cConfig,
) -> Result<A2cStats> {
    if selection.graph.is_none() {
        return Ok(A2cStats {
            entropy: selection.entropy.as_f64(),
            ..A2cStats::default()
        });
    }
    let losses = a2c_losses(bundle, &selection, transition, config.entropy_coef)?;
    let tape = losses.critic.tape();
    let total = losses.critic.add(losses.actor)?;
    let grads = tape.backward(total)?;
    let critic_grads = losses.critic_forward.param_grads(&grads);
    let actor_grads = losses.actor_forward.param_grads(&grads);
    sgd_step(
        &mut bundle.critic.params_mut(),
        &critic_grads,
        T::lit(config.critic_lr),
        T::zero(),
    )?;
    sgd_step(
        &mut bundle.actor.params_mut(),
        &actor_grads,
        T::lit(config.actor_lr),
        T::zero(),
    )?;
    let mean = |v: &[T]| v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len().max(1) as f64;
    Ok(A2cStats {
        critic_loss: losses.critic.value().data()[0].as_f64(),
        actor_loss: losses.actor.value().data()[0].as_f64(),
        value: mean(&losses.values),
        advantage: mean(&losses.advantages),
        entropy: selection.entropy.as_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{split_patches, PatchGrid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn images(b: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[b, 3, 16, 16], (0..b * 768).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn bundle(kind: PolicyKind) -> PolicyBundle<f64> {
        PolicyBundle::new(kind, 4, (16, 16), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn features(p: &PolicyBundle<f64>, x: &Tensor<f64>) -> (StateFeatures<f64>, Tensor<f64>) {
        let grid = PatchGrid::new(4).unwrap();
        let obs = p.extract_observations(&split_patches(x, &grid).unwrap()).unwrap();
        (p.extract_state(x).unwrap(), obs)
    }

    #[test]
    fn reward_is_clean_minus_augmented() {
        assert_eq!(compute_reward(2.0, 1.5, RewardSign::Paper).unwrap(), 0.5);
        assert_eq!(compute_reward(2.0, 1.5, RewardSign::Adversarial).unwrap(), -0.5);
        assert_eq!(compute_reward(0.7f32, 0.7, RewardSign::Paper).unwrap(), 0.0);
        assert!(compute_reward(f64::NAN, 1.0, RewardSign::Paper).is_err());
    }

    #[test]
    fn one_step_return_ignores_discount() {
        assert_eq!(discounted_return(&[0.25], 0.99), 0.25);
        assert_eq!(discounted_return(&[0.25], 0.5), 0.25);
        assert_eq!(discounted_return(&[1.0, 1.0], 0.5), 1.5);
    }

    #[test]
    fn names_parse() {
        for k in ["marl", "random", "independent", "off"] {
            assert_eq!(k.parse::<PolicyKind>().unwrap().name(), k);
        }
        assert!("central".parse::<PolicyKind>().is_err());
        assert_eq!("adversarial".parse::<RewardSign>().unwrap(), RewardSign::Adversarial);
    }

    #[test]
    fn state_and_observation_shapes() {
        let p = bundle(PolicyKind::Marl);
        let x = images(2, 0);
        let (s, o) = features(&p, &x);
        // 16x16 images: trunk gives [32,3,3]; 8x8 patches give [16,1,1].
        assert_eq!(s.flat.shape(), &[2, 288]);
        assert_eq!(s.embedding.shape(), &[2, 16]);
        assert_eq!(o.shape(), &[2, 4, 16, 1, 1]);
        assert_eq!(p.actor_input(&s, &o).unwrap().shape(), &[8, 32, 1, 1]);
    }

    #[test]
    fn greedy_selection_is_deterministic_and_normalised() {
        let mut p = bundle(PolicyKind::Marl);
        let x = images(3, 1);
        let (s, o) = features(&p, &x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t1 = Tape::new();
        let a = p
            .select_actions(&t1, &s, &o, SelectMode::Greedy, Pass::Eval, &mut rng)
            .unwrap();
        let t2 = Tape::new();
        let b = p
            .select_actions(&t2, &s, &o, SelectMode::Greedy, Pass::Eval, &mut rng)
            .unwrap();
        assert_eq!(a.ops, b.ops);
        for row in a.probs.data().chunks(15) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(a.ops.len(), 12);
    }

    #[test]
    fn random_policy_samples_uniformly_without_graph() {
        let mut p = bundle(PolicyKind::Random);
        let x = images(2, 1);
        let (s, o) = features(&p, &x);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sel = p
            .select_actions(&tape, &s, &o, SelectMode::Sample, Pass::Train, &mut rng)
            .unwrap();
        assert!((sel.entropy - 15f64.ln()).abs() < 1e-12);
        let before = p.clone();
        let t = Transition {
            state: s,
            observations: o,
            actions: sel.ops.clone(),
            rewards: vec![1.0, 1.0],
            gamma: 0.99,
            horizon: 1,
        };
        a2c_update(&mut p, sel, &t, &A2cConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn positive_advantage_raises_taken_joint_action() {
        for kind in [PolicyKind::Marl, PolicyKind::Independent] {
            let mut p = bundle(kind);
            let x = images(2, 2);
            let (s, o) = features(&p, &x);
            let tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let sel = p
                .select_actions(&tape, &s, &o, SelectMode::Sample, Pass::Measure, &mut rng)
                .unwrap();
            let ops: Vec<usize> = sel.ops.iter().map(|o| o.index()).collect();
            let joint =
                |probs: &Tensor<f64>| -> f64 { probs.data().chunks(15).zip(&ops).map(|(r, &k)| r[k].ln()).sum() };
            let before = joint(&sel.probs);
            let values = p.values(&s, &o).unwrap();
            let r = values.iter().cloned().fold(f64::MIN, f64::max) + 1.0;
            let t = Transition {
                state: s.clone(),
                observations: o.clone(),
                actions: sel.ops.clone(),
                rewards: vec![r; 2],
                gamma: 0.99,
                horizon: 1,
            };
            let cfg = A2cConfig {
                actor_lr: 1e-3,
                critic_lr: 1e-3,
                entropy_coef: 0.0,
            };
            let stats = a2c_update(&mut p, sel, &t, &cfg).unwrap();
            assert!(stats.advantage > 0.0);
            let after = joint(&p.action_probs(&s, &o, Pass::Measure).unwrap());
            assert!(after > before, "{kind}: {before} -> {after}");
        }
    }

    #[test]
    fn horizon_beyond_one_is_rejected() {
        let mut p = bundle(PolicyKind::Marl);
        let x = images(1, 2);
        let (s, o) = features(&p, &x);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sel = p
            .select_actions(&tape, &s, &o, SelectMode::Sample, Pass::Measure, &mut rng)
            .unwrap();
        let t = Transition {
            state: s,
            observations: o,
            actions: sel.ops.clone(),
            rewards: vec![0.0],
            gamma: 0.99,
            horizon: 2,
        };
        assert!(matches!(
            a2c_update(&mut p, sel, &t, &A2cConfig::default()),
            Err(MarlError::UnsupportedHorizon(2))
        ));
    }
}
