//! Layer primitives and the networks built from them: the frozen feature
//! encoder, the shared actor, the centralized critic and the target classifier.

mod builders;
mod loss;
mod optim;

pub use builders::{
    build_actor, build_critic, build_encoder, build_target_cnn, FeatureEncoder, ACTION_COUNT, ACTOR_IN_CHANNELS,
    CRITIC_HIDDEN, DEFAULT_STATE_DIM, OBS_CHANNELS, STATE_CHANNELS, STATE_EMBED_CHANNELS,
};
pub use loss::{check_soft_labels, soft_cross_entropy};
pub use optim::{sgd_step, Sgd};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, Tape, Var};
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("layer {layer} ({kind}): {reason}")]
    Build {
        layer: usize,
        kind: &'static str,
        reason: String,
    },
    #[error("network input mismatch: expected {expected}, got shape {found:?}")]
    InputMismatch { expected: String, found: Vec<usize> },
    #[error("soft-label row {row} is not a probability vector (sum {sum})")]
    NonSimplexLabels { row: usize, sum: f64 },
    #[error("parameter count mismatch: {expected} tensors expected, got {found}")]
    ParamCount { expected: usize, found: usize },
    #[error("missing or misshapen tensor `{0}`")]
    MissingTensor(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    Softmax,
    GlobalAvgPool,
    Flatten,
    MaxPool2d {
        size: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
            LayerSpec::GlobalAvgPool => "global-avg-pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
        }
    }
}

/// What a network accepts. Spatial size may be left open for fully
/// convolutional stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSpec {
    Image {
        channels: usize,
        size: Option<(usize, usize)>,
    },
    Features(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How a forward pass treats batch normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left untouched.
    Measure,
    /// Running statistics.
    Eval,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
struct Layer<T> {
    spec: LayerSpec,
    params: Vec<Tensor<T>>,
    /// Batch-norm running mean and variance.
    buffers: Vec<Tensor<T>>,
}

/// Ordered layer stack with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    input: InputSpec,
    mode: Mode,
    frozen: bool,
}

/// Result of a forward pass recorded on a tape.
pub struct Forward<'t, T> {
    pub output: Var<'t, T>,
    /// Parameter leaves, in [`Network::params`] order.
    pub params: Vec<Var<'t, T>>,
    /// Output of every executed layer.
    pub activations: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Forward<'t, T> {
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.params.iter().map(|&p| grads.get_or_zeros(p)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Sig {
    Image(usize, Option<(usize, usize)>),
    Flat(usize),
}

fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Ok(Tensor::new(
        shape,
        (0..n).map(|_| T::lit(normal.sample(rng))).collect(),
    )?)
}

impl<T: Real> Network<T> {
    /// Builds the stack, checking that consecutive layers fit together, and
    /// draws He-normal weights (zero biases) from `rng`.
    pub fn build(specs: &[LayerSpec], input: InputSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut sig = match input {
            InputSpec::Image { channels, size } => Sig::Image(channels, size),
            InputSpec::Features(n) => Sig::Flat(n),
        };
        let mut layers = Vec::with_capacity(specs.len());
        for (idx, spec) in specs.iter().enumerate() {
            let fail = |reason: String| NnError::Build {
                layer: idx,
                kind: spec.kind(),
                reason,
            };
            let (params, buffers) = match *spec {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let Sig::Image(c, size) = sig else {
                        return Err(fail("expects an image-shaped input".into()));
                    };
                    if c != in_channels {
                        return Err(fail(format!("expects {in_channels} channels, got {c}")));
                    }
                    if kernel % 2 == 0 || stride == 0 || out_channels == 0 {
                        return Err(fail("kernel must be odd, stride and channels positive".into()));
                    }
                    let out_size = match size {
                        Some((h, w)) => {
                            let extent = |n: usize| (n + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1);
                            match (extent(h), extent(w)) {
                                (Some(oh), Some(ow)) => Some((oh, ow)),
                                _ => return Err(fail(format!("kernel {kernel} exceeds input {h}x{w}"))),
                            }
                        }
                        None => None,
                    };
                    sig = Sig::Image(out_channels, out_size);
                    let fan_in = in_channels * kernel * kernel;
                    (
                        vec![
                            he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng)?,
                            Tensor::zeros(&[out_channels])?,
                        ],
                        vec![],
                    )
                }
                LayerSpec::BatchNorm { channels } => {
                    let c = match sig {
                        Sig::Image(c, _) | Sig::Flat(c) => c,
                    };
                    if c != channels {
                        return Err(fail(format!("expects {channels} channels, got {c}")));
                    }
                    (
                        vec![Tensor::full(&[channels], T::one())?, Tensor::zeros(&[channels])?],
                        vec![Tensor::zeros(&[channels])?, Tensor::full(&[channels], T::one())?],
                    )
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    let Sig::Flat(n) = sig else {
                        return Err(fail("expects flat features; add flatten or pooling".into()));
                    };
                    if n != in_features {
                        return Err(fail(format!("expects {in_features} features, got {n}")));
                    }
                    sig = Sig::Flat(out_features);
                    (
                        vec![
                            he_normal(&[out_features, in_features], in_features, rng)?,
                            Tensor::zeros(&[out_features])?,
                        ],
                        vec![],
                    )
                }
                LayerSpec::Relu => (vec![], vec![]),
                LayerSpec::Softmax => {
                    if !matches!(sig, Sig::Flat(_)) {
                        return Err(fail("softmax expects flat logits".into()));
                    }
                    (vec![], vec![])
                }
                LayerSpec::GlobalAvgPool => {
                    let Sig::Image(c, _) = sig else {
                        return Err(fail("expects an image-shaped input".into()));
                    };
                    sig = Sig::Flat(c);
                    (vec![], vec![])
                }
                LayerSpec::Flatten => {
                    sig = match sig {
                        Sig::Image(c, Some((h, w))) => Sig::Flat(c * h * w),
                        Sig::Image(_, None) => return Err(fail("flatten needs a fixed spatial size".into())),
                        flat => flat,
                    };
                    (vec![], vec![])
                }
                LayerSpec::MaxPool2d { size } => {
                    let Sig::Image(c, spatial) = sig else {
                        return Err(fail("expects an image-shaped input".into()));
                    };
                    if size == 0 {
                        return Err(fail("pool size must be positive".into()));
                    }
                    let spatial = match spatial {
                        Some((h, w)) if h % size != 0 || w % size != 0 => {
                            return Err(fail(format!("pool {size} does not divide {h}x{w}")))
                        }
                        Some((h, w)) => Some((h / size, w / size)),
                        None => None,
                    };
                    sig = Sig::Image(c, spatial);
                    (vec![], vec![])
                }
            };
            layers.push(Layer {
                spec: *spec,
                params,
                buffers,
            });
        }
        Ok(Self {
            layers,
            input,
            mode: Mode::Train,
            frozen: false,
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Frozen networks record their parameters without gradients.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Parameters and batch-norm buffers under stable names such as
    /// `1.weight` or `2.running_var`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let names: &[&str] = match layer.spec {
                LayerSpec::BatchNorm { .. } => &["gamma", "beta"],
                _ => &["weight", "bias"],
            };
            for (name, p) in names.iter().zip(&layer.params) {
                out.push((format!("{i}.{name}"), p));
            }
            for (name, b) in ["running_mean", "running_var"].iter().zip(&layer.buffers) {
                out.push((format!("{i}.{name}"), b));
            }
        }
        out
    }

    /// Replaces every named tensor using `lookup`; shapes must match.
    pub fn load_named(&mut self, lookup: impl Fn(&str) -> Option<Tensor<T>>) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let names: &[&str] = match layer.spec {
                LayerSpec::BatchNorm { .. } => &["gamma", "beta"],
                _ => &["weight", "bias"],
            };
            let slots = names
                .iter()
                .zip(layer.params.iter_mut())
                .chain(["running_mean", "running_var"].iter().zip(layer.buffers.iter_mut()));
            for (name, slot) in slots {
                let key = format!("{i}.{name}");
                match lookup(&key) {
                    Some(t) if t.shape() == slot.shape() => *slot = t,
                    _ => return Err(NnError::MissingTensor(key)),
                }
            }
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = match self.input {
            InputSpec::Image { channels, size } => {
                shape.len() == 4 && shape[1] == channels && size.is_none_or(|(h, w)| shape[2] == h && shape[3] == w)
            }
            InputSpec::Features(n) => shape.len() == 2 && shape[1] == n,
        };
        if ok {
            Ok(())
        } else {
            Err(NnError::InputMismatch {
                expected: format!("{:?}", self.input),
                found: shape.to_vec(),
            })
        }
    }

    /// Forward pass using the network's own mode.
    pub fn forward<'t>(&mut self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Forward<'t, T>> {
        let pass = match self.mode {
            Mode::Train => Pass::Train,
            Mode::Eval => Pass::Eval,
        };
        self.forward_with(tape, x, pass, false)
    }

    /// Forward pass with an explicit batch-norm treatment. With
    /// `logits_only`, a trailing softmax layer is skipped.
    pub fn forward_with<'t>(
        &mut self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        pass: Pass,
        logits_only: bool,
    ) -> Result<Forward<'t, T>> {
        let (fwd, stats) = self.run(tape, x, pass, logits_only)?;
        if pass == Pass::Train {
            let momentum = T::lit(BN_MOMENTUM);
            for (idx, mean, var, count) in stats {
                let unbias = if count > 1 {
                    T::lit(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                let layer = &mut self.layers[idx];
                let (rm, rv) = layer.buffers.split_at_mut(1);
                for (r, &m) in rm[0].data_mut().iter_mut().zip(&mean) {
                    *r = (T::one() - momentum) * *r + momentum * m;
                }
                for (r, &v) in rv[0].data_mut().iter_mut().zip(&var) {
                    *r = (T::one() - momentum) * *r + momentum * v * unbias;
                }
            }
        }
        Ok(fwd)
    }

    /// Forward pass that never mutates the network.
    pub fn forward_frozen<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        pass: Pass,
        logits_only: bool,
    ) -> Result<Forward<'t, T>> {
        let pass = if pass == Pass::Train { Pass::Measure } else { pass };
        Ok(self.run(tape, x, pass, logits_only)?.0)
    }

    /// Inference without gradients.
    pub fn predict(&self, x: &Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let input = tape.constant(x.clone());
        let pass = if pass == Pass::Train { Pass::Measure } else { pass };
        let out = self
            .run_params(&tape, input, pass, false, false, 0..self.layers.len())?
            .0
            .output
            .value();
        Ok((*out).clone())
    }

    #[allow(clippy::type_complexity)]
    fn run<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        pass: Pass,
        logits_only: bool,
    ) -> Result<(Forward<'t, T>, Vec<(usize, Vec<T>, Vec<T>, usize)>)> {
        self.run_params(tape, x, pass, logits_only, !self.frozen, 0..self.layers.len())
    }

    /// Runs only `layers` (a range of layer indices) on `x` without
    /// touching the network. Parameters are recorded as constants, so
    /// gradients reach `x` but not the weights.
    pub fn forward_layers<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        layers: std::ops::Range<usize>,
        pass: Pass,
    ) -> Result<Var<'t, T>> {
        let pass = if pass == Pass::Train { Pass::Measure } else { pass };
        let layers = layers.start.min(self.layers.len())..layers.end.min(self.layers.len());
        Ok(self.run_params(tape, x, pass, false, false, layers)?.0.output)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    #[allow(clippy::type_complexity)]
    fn run_params<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        pass: Pass,
        logits_only: bool,
        requires_grad: bool,
        range: std::ops::Range<usize>,
    ) -> Result<(Forward<'t, T>, Vec<(usize, Vec<T>, Vec<T>, usize)>)> {
        if range.start == 0 {
            self.check_input(&x.shape())?;
        }
        let mut params = Vec::new();
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (idx, layer) in self.layers.iter().enumerate().take(range.end).skip(range.start) {
            let leaves: Vec<Var<'t, T>> = layer
                .params
                .iter()
                .map(|p| tape.leaf(p.clone(), requires_grad))
                .collect();
            params.extend_from_slice(&leaves);
            h = match layer.spec {
                LayerSpec::Conv2d { stride, padding, .. } => h.conv2d(leaves[0], leaves[1], stride, padding)?,
                LayerSpec::BatchNorm { .. } => match pass {
                    Pass::Train | Pass::Measure => {
                        let shape = h.shape();
                        let count = shape[0] * shape[2..].iter().product::<usize>();
                        let (y, mean, var) = h.batch_norm_train(leaves[0], leaves[1], T::lit(BN_EPS))?;
                        stats.push((idx, mean, var, count));
                        y
                    }
                    Pass::Eval => h.batch_norm_eval(
                        leaves[0],
                        leaves[1],
                        layer.buffers[0].data(),
                        layer.buffers[1].data(),
                        T::lit(BN_EPS),
                    )?,
                },
                LayerSpec::Linear { .. } => h.linear(leaves[0], leaves[1])?,
                LayerSpec::Relu => h.relu(),
                LayerSpec::Softmax => {
                    if logits_only && idx == last {
                        break;
                    }
                    h.softmax()
                }
                LayerSpec::GlobalAvgPool => h.global_avg_pool()?,
                LayerSpec::Flatten => h.flatten()?,
                LayerSpec::MaxPool2d { size } => h.max_pool2d(size)?,
            };
            activations.push(h);
        }
        Ok((
            Forward {
                output: h,
                params,
                activations,
            },
            stats,
        ))
    }

    /// Index of the last convolution layer, if any.
    pub fn last_conv_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l.spec, LayerSpec::Conv2d { .. }))
    }
}
