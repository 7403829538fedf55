use rand::Rng;

use super::{InputSpec, LayerSpec, Network, Pass, Result};
use crate::tensor::{Real, Tensor};

/// Size of the actor's output distribution: one slot per augmentation kind.
pub const ACTION_COUNT: usize = 15;
/// Channels of a patch observation map.
pub const OBS_CHANNELS: usize = 16;
/// Channels of the whole-image state map.
pub const STATE_CHANNELS: usize = 32;
/// Channels of the pooled state embedding broadcast next to each observation.
pub const STATE_EMBED_CHANNELS: usize = 16;
pub const ACTOR_IN_CHANNELS: usize = OBS_CHANNELS + STATE_EMBED_CHANNELS;
pub const CRITIC_HIDDEN: usize = 256;
/// Flattened state length for a 32x32 image: 32 channels on a 7x7 grid.
pub const DEFAULT_STATE_DIM: usize = STATE_CHANNELS * 7 * 7;

/// Shared actor: three conv blocks, pooled to `ACTION_COUNT` logits, softmax.
pub fn build_actor<T: Real>(in_channels: usize, rng: &mut impl Rng) -> Result<Network<T>> {
    let conv = |i, o, stride| LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride,
        padding: 1,
    };
    Network::build(
        &[
            LayerSpec::Relu,
            conv(in_channels, 64, 1),
            LayerSpec::BatchNorm { channels: 64 },
            LayerSpec::Relu,
            conv(64, 64, 1),
            LayerSpec::BatchNorm { channels: 64 },
            LayerSpec::Relu,
            conv(64, ACTION_COUNT, 2),
            LayerSpec::GlobalAvgPool,
            LayerSpec::Softmax,
        ],
        InputSpec::Image {
            channels: in_channels,
            size: None,
        },
        rng,
    )
}

/// State-value critic `V(s)`.
pub fn build_critic<T: Real>(state_dim: usize, rng: &mut impl Rng) -> Result<Network<T>> {
    Network::build(
        &[
            LayerSpec::Linear {
                in_features: state_dim,
                out_features: CRITIC_HIDDEN,
            },
            LayerSpec::Relu,
            LayerSpec::Linear {
                in_features: CRITIC_HIDDEN,
                out_features: 1,
            },
        ],
        InputSpec::Features(state_dim),
        rng,
    )
}

/// Small classifier standing in for the target model. `image_size` must be a
/// multiple of 4.
pub fn build_target_cnn<T: Real>(
    num_classes: usize,
    in_channels: usize,
    image_size: (usize, usize),
    rng: &mut impl Rng,
) -> Result<Network<T>> {
    let (h, w) = image_size;
    Network::build(
        &[
            LayerSpec::Conv2d {
                in_channels,
                out_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Conv2d {
                in_channels: 8,
                out_channels: 16,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear {
                in_features: 16 * (h / 4) * (w / 4),
                out_features: num_classes,
            },
        ],
        InputSpec::Image {
            channels: in_channels,
            size: Some(image_size),
        },
        rng,
    )
}

/// Frozen, randomly initialised feature extractor shared by state and
/// observations.
///
/// The trunk is fully convolutional (`3 -> 16 -> 32` channels, stride 2
/// twice), so a 32x32 image yields a `[32, 7, 7]` state map and a 16x16 patch
/// a `[32, 3, 3]` map. A fixed 1x1 projection maps trunk features to the
/// 16-channel space used for observations and for the pooled state embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoder<T> {
    pub trunk: Network<T>,
    pub projection: Network<T>,
}

pub fn build_encoder<T: Real>(rng: &mut impl Rng) -> Result<FeatureEncoder<T>> {
    let mut trunk = Network::build(
        &[
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 16,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                in_channels: 16,
                out_channels: STATE_CHANNELS,
                kernel: 3,
                stride: 2,
                padding: 0,
            },
            LayerSpec::Relu,
        ],
        InputSpec::Image {
            channels: 3,
            size: None,
        },
        rng,
    )?;
    let mut projection = Network::build(
        &[LayerSpec::Conv2d {
            in_channels: STATE_CHANNELS,
            out_channels: OBS_CHANNELS,
            kernel: 1,
            stride: 1,
            padding: 0,
        }],
        InputSpec::Image {
            channels: STATE_CHANNELS,
            size: None,
        },
        rng,
    )?;
    trunk.freeze();
    projection.freeze();
    Ok(FeatureEncoder { trunk, projection })
}

impl<T: Real> FeatureEncoder<T> {
    /// Spatial extent of the trunk output for an `h x w` input.
    pub fn output_size(height: usize, width: usize) -> Option<(usize, usize)> {
        let stage = |n: usize| -> Option<usize> {
            let a = (n + 2).checked_sub(3)? / 2 + 1;
            Some(a.checked_sub(3)? / 2 + 1)
        };
        Some((stage(height)?, stage(width)?))
    }

    /// `[B,3,H,W] -> [B,32,h,w]` trunk features.
    pub fn state_map(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.trunk.predict(images, Pass::Eval)
    }

    /// `[M,3,h,w] -> [M,16,h',w']` projected features of each patch.
    pub fn observe(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let features = self.trunk.predict(patches, Pass::Eval)?;
        self.projection.predict(&features, Pass::Eval)
    }

    /// `[B,32,h,w] -> [B,16]` projected, spatially pooled state.
    pub fn embed(&self, state_map: &Tensor<T>) -> Result<Tensor<T>> {
        let projected = self.projection.predict(state_map, Pass::Eval)?;
        Ok(projected.global_avg_pool()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::NnError;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn actor_outputs_distribution_over_fifteen_actions() {
        let mut actor = build_actor::<f64>(ACTOR_IN_CHANNELS, &mut rng(1)).unwrap();
        let x = noise(&[2, 32, 8, 8], 2);
        let tape = Tape::new();
        let xv = tape.constant(x);
        let out = actor.forward(&tape, xv).unwrap().output.value();
        assert_eq!(out.shape(), &[2, ACTION_COUNT]);
        assert_eq!(ACTION_COUNT, 15);
        for row in out.data().chunks(ACTION_COUNT) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn seeded_builds_are_identical() {
        let a = build_actor::<f32>(32, &mut rng(5)).unwrap();
        let b = build_actor::<f32>(32, &mut rng(5)).unwrap();
        let c = build_actor::<f32>(32, &mut rng(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn actor_rejects_wrong_channel_count() {
        let actor = build_actor::<f64>(32, &mut rng(1)).unwrap();
        let err = actor.predict(&noise(&[1, 16, 4, 4], 0), Pass::Eval).unwrap_err();
        assert!(matches!(err, NnError::InputMismatch { .. }));
    }

    #[test]
    fn critic_shapes_and_zero_weights() {
        let mut critic = build_critic::<f64>(DEFAULT_STATE_DIM, &mut rng(3)).unwrap();
        assert_eq!(DEFAULT_STATE_DIM, 1568);
        let s = noise(&[4, 1568], 4);
        assert_eq!(critic.predict(&s, Pass::Eval).unwrap().shape(), &[4, 1]);
        for p in critic.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let last = critic.params_mut().pop().unwrap();
        last.data_mut()[0] = 0.75;
        let v = critic.predict(&s, Pass::Eval).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.75));
        assert!(build_critic::<f64>(10, &mut rng(0))
            .unwrap()
            .predict(&s, Pass::Eval)
            .is_err());
    }

    #[test]
    fn encoder_geometry() {
        let enc = build_encoder::<f64>(&mut rng(7)).unwrap();
        let img = noise(&[2, 3, 32, 32], 8).map(|v| v.abs());
        let state = enc.state_map(&img).unwrap();
        assert_eq!(state.shape(), &[2, STATE_CHANNELS, 7, 7]);
        assert_eq!(state.numel() / 2, DEFAULT_STATE_DIM);
        let patches = noise(&[3, 3, 16, 16], 9).map(|v| v.abs());
        assert_eq!(enc.observe(&patches).unwrap().shape(), &[3, OBS_CHANNELS, 3, 3]);
        assert_eq!(enc.embed(&state).unwrap().shape(), &[2, STATE_EMBED_CHANNELS]);
        assert_eq!(FeatureEncoder::<f64>::output_size(32, 32), Some((7, 7)));
        assert_eq!(FeatureEncoder::<f64>::output_size(16, 16), Some((3, 3)));
        assert_eq!(FeatureEncoder::<f64>::output_size(8, 8), Some((1, 1)));
        assert_eq!(enc.state_map(&img).unwrap(), state);
    }

    #[test]
    fn target_cnn_logits_shape() {
        let net = build_target_cnn::<f32>(10, 3, (32, 32), &mut rng(1)).unwrap();
        let x = Tensor::<f32>::full(&[5, 3, 32, 32], 0.5).unwrap();
        assert_eq!(net.predict(&x, Pass::Eval).unwrap().shape(), &[5, 10]);
        assert_eq!(net.last_conv_index(), Some(3));
    }
}
