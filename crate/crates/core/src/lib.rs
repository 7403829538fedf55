//! Patch-level automated data augmentation driven by a multi-agent
//! actor-critic policy.
//!
//! An image batch is cut into a grid of patches. One shared actor picks an
//! augmentation for every patch from the patch's own features plus features
//! of the whole image; a centralized critic scores the whole-image state.
//! The policy trains online against the classifier it augments for, rewarded
//! by the gap between the classifier's clean and augmented training losses.
//!
//! Module map:
//! - [`tensor`]: dense tensors and kernels.
//! - [`autodiff`]: reverse-mode tape.
//! - [`nn`]: layers, the four networks, loss and optimizer.
//! - [`augment`]: patch grid, the fifteen operations, label mixing, batched executor.
//! - [`marl`]: state/observation extraction, action selection, reward, A2C update.
//! - [`trainer`]: co-training loop, datasets, Grad-CAM analysis, checkpoints.
//! - [`selfcheck`]: gradient, kernel and bandit checks runnable at any time.

pub mod augment;
pub mod autodiff;
pub mod marl;
pub mod nn;
pub mod rng;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;
