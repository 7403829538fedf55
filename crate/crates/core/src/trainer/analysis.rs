//! Grad-CAM importance maps and the per-bin operation usage derived from
//! them.

use std::fmt;
use std::str::FromStr;

use crate::augment::{OpKind, PatchGrid};
use crate::autodiff::Tape;
use crate::nn::{LayerSpec, Network, NnError, Pass};
use crate::tensor::{Real, Tensor, TensorError};

/// Importance quartile of a patch within its image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ImportanceBin {
    VeryImportant,
    Important,
    Normal,
    NotImportant,
}

impl ImportanceBin {
    pub const ALL: [ImportanceBin; 4] = [
        ImportanceBin::VeryImportant,
        ImportanceBin::Important,
        ImportanceBin::Normal,
        ImportanceBin::NotImportant,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ImportanceBin::VeryImportant => "very-important",
            ImportanceBin::Important => "important",
            ImportanceBin::Normal => "normal",
            ImportanceBin::NotImportant => "not-important",
        }
    }
}

impl fmt::Display for ImportanceBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ImportanceBin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown importance bin `{s}`"))
    }
}

/// Grad-CAM of `target` for each image in `images` (`[B,C,H,W]`) and its
/// class in `classes`: `relu(sum_k alpha_k A_k)` where `A_k` are the
/// rectified feature maps of the last convolution and `alpha_k` the spatial
/// mean of the class logit's gradient with respect to them. Returns
/// `[B, h, w]` with the last convolution's spatial extent.
pub fn grad_cam<T: Real>(target: &Network<T>, images: &Tensor<T>, classes: &[usize]) -> Result<Tensor<T>, NnError> {
    let conv = target.last_conv_index().ok_or_else(|| NnError::InputMismatch {
        expected: "a network with a convolution layer".into(),
        found: vec![],
    })?;
    let specs = target.specs();
    let split = if matches!(specs.get(conv + 1), Some(LayerSpec::Relu)) {
        conv + 2
    } else {
        conv + 1
    };
    let tape = Tape::new();
    let features = target.forward_layers(&tape, tape.constant(images.clone()), 0..split, Pass::Eval)?;
    let features = (*features.value()).clone();
    let [b, k, h, w] = match *features.shape() {
        [b, k, h, w] => [b, k, h, w],
        _ => return Err(TensorError::InvalidShape(features.shape().to_vec()).into()),
    };
    if classes.len() != b {
        return Err(NnError::InputMismatch {
            expected: format!("{b} class indices"),
            found: vec![classes.len()],
        });
    }

    let tape = Tape::new();
    let a = tape.leaf(features.clone(), true);
    let logits = target.forward_layers(&tape, a, split..target.layer_count(), Pass::Eval)?;
    let count = logits.shape()[1];
    if let Some(&bad) = classes.iter().find(|&&c| c >= count) {
        return Err(TensorError::IndexOutOfRange {
            index: bad,
            extent: count,
        }
        .into());
    }
    let score = logits.pick(classes)?.sum_all();
    let grads = tape.backward(score)?;
    let da = grads.get_or_zeros(a);

    let plane = h * w;
    let mut out = vec![T::zero(); b * plane];
    for bi in 0..b {
        for ki in 0..k {
            let off = (bi * k + ki) * plane;
            let g = &da.data()[off..off + plane];
            let alpha = g.iter().fold(T::zero(), |s, &v| s + v) / T::lit(plane as f64);
            let fm = &features.data()[off..off + plane];
            for (o, &v) in out[bi * plane..(bi + 1) * plane].iter_mut().zip(fm) {
                *o += alpha * v;
            }
        }
    }
    for v in &mut out {
        *v = v.max(T::zero());
    }
    Ok(Tensor::new(&[b, h, w], out)?)
}

/// Nearest-neighbour resampling of an `[h, w]` map to `height x width`.
pub fn resample_nearest<T: Real>(map: &[T], (h, w): (usize, usize), (height, width): (usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = (y * h / height).min(h - 1);
        for x in 0..width {
            let sx = (x * w / width).min(w - 1);
            out.push(map[sy * w + sx]);
        }
    }
    out
}

/// Mean of an image-resolution map over each patch of `grid`.
pub fn patch_scores<T: Real>(map: &[T], (height, width): (usize, usize), grid: &PatchGrid) -> Vec<f64> {
    let (ph, pw) = (height / grid.side(), width / grid.side());
    (0..grid.count())
        .map(|i| {
            let (r, c) = grid.cell(i);
            let mut sum = 0.0;
            for y in r * ph..(r + 1) * ph {
                for x in c * pw..(c + 1) * pw {
                    sum += map[y * width + x].as_f64();
                }
            }
            sum / (ph * pw) as f64
        })
        .collect()
}

/// Ranks patches by score (highest first, ties to the lower index) and cuts
/// the ranking into four equal quartile bins.
pub fn bin_scores(scores: &[f64]) -> Vec<ImportanceBin> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut bins = vec![ImportanceBin::VeryImportant; n];
    for (rank, &i) in order.iter().enumerate() {
        bins[i] = ImportanceBin::ALL[(rank * 4 / n).min(3)];
    }
    bins
}

/// Importance bin of every patch given a Grad-CAM map of extent `map_size`
/// for an image of `image_size`.
pub fn bin_patch_importance<T: Real>(
    map: &[T],
    map_size: (usize, usize),
    image_size: (usize, usize),
    grid: &PatchGrid,
) -> Vec<ImportanceBin> {
    let full = resample_nearest(map, map_size, image_size);
    bin_scores(&patch_scores(&full, image_size, grid))
}

/// One row of `policy_usage.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyUsageRecord {
    pub epoch: usize,
    pub bin: ImportanceBin,
    pub op: OpKind,
    pub fraction: f64,
}

/// Fraction of patches in each bin that chose each operation. Bins with no
/// patches are omitted.
pub fn usage_fractions(epoch: usize, bins: &[ImportanceBin], ops: &[OpKind]) -> Vec<PolicyUsageRecord> {
    let mut counts = [[0usize; OpKind::COUNT]; 4];
    for (&b, &op) in bins.iter().zip(ops) {
        counts[b.index()][op.index()] += 1;
    }
    let mut out = Vec::new();
    for bin in ImportanceBin::ALL {
        let row = &counts[bin.index()];
        let total: usize = row.iter().sum();
        if total == 0 {
            continue;
        }
        for op in OpKind::ALL {
            out.push(PolicyUsageRecord {
                epoch,
                bin,
                op,
                fraction: row[op.index()] as f64 / total as f64,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::InputSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sixteen_distinct_scores_fill_each_bin_with_four() {
        let scores: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64).collect();
        let bins = bin_scores(&scores);
        for b in ImportanceBin::ALL {
            assert_eq!(bins.iter().filter(|&&x| x == b).count(), 4);
        }
        let top = scores
            .iter()
            .cloned()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert_eq!(bins[top], ImportanceBin::VeryImportant);
    }

    #[test]
    fn constant_scores_bin_by_index() {
        let bins = bin_scores(&[1.0; 8]);
        assert_eq!(bins[0], ImportanceBin::VeryImportant);
        assert_eq!(bins[1], ImportanceBin::VeryImportant);
        assert_eq!(bins[2], ImportanceBin::Important);
        assert_eq!(bins[7], ImportanceBin::NotImportant);
    }

    #[test]
    fn nearest_resample_and_patch_means() {
        let map = [1.0f64, 2.0, 3.0, 4.0];
        let full = resample_nearest(&map, (2, 2), (4, 4));
        assert_eq!(&full[..4], &[1.0, 1.0, 2.0, 2.0]);
        let grid = PatchGrid::new(4).unwrap();
        assert_eq!(patch_scores(&full, (4, 4), &grid), vec![1.0, 2.0, 3.0, 4.0]);
        let bins = bin_patch_importance(&map, (2, 2), (4, 4), &grid);
        assert_eq!(bins[3], ImportanceBin::VeryImportant);
        assert_eq!(bins[0], ImportanceBin::NotImportant);
    }

    #[test]
    fn grad_cam_on_single_filter_toy_matches_hand_derivation() {
        // conv(1->1, 1x1, weight 2) -> relu -> flatten -> linear(4 -> 2).
        let mut net = Network::<f64>::build(
            &[
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 4,
                    out_features: 2,
                },
            ],
            InputSpec::Image {
                channels: 1,
                size: Some((2, 2)),
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let v = [0.5, -1.0, 2.0, 1.5, 0.0, 0.0, 0.0, 0.0];
        {
            let mut p = net.params_mut();
            p[0].data_mut()[0] = 2.0;
            p[1].data_mut()[0] = 0.0;
            p[2].data_mut().copy_from_slice(&v);
        }
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.1, -0.3, 0.4, 0.2]).unwrap();
        let cam = grad_cam(&net, &x, &[0]).unwrap();
        // A = relu(2x); alpha = mean(v_row0) = 0.75; map = relu(alpha * A).
        let a: Vec<f64> = x.data().iter().map(|&p| (2.0 * p).max(0.0)).collect();
        for (m, av) in cam.data().iter().zip(&a) {
            assert!((m - 0.75 * av).abs() < 1e-12);
        }
        assert_eq!(cam.shape(), &[1, 2, 2]);
        assert!(grad_cam(&net, &x, &[2]).is_err());
    }

    #[test]
    fn usage_fractions_sum_to_one() {
        let bins = vec![
            ImportanceBin::VeryImportant,
            ImportanceBin::VeryImportant,
            ImportanceBin::Normal,
        ];
        let ops = vec![OpKind::Invert, OpKind::Mixup, OpKind::Invert];
        let rows = usage_fractions(3, &bins, &ops);
        assert_eq!(rows.len(), 30);
        for bin in [ImportanceBin::VeryImportant, ImportanceBin::Normal] {
            let s: f64 = rows.iter().filter(|r| r.bin == bin).map(|r| r.fraction).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(
            "not-important".parse::<ImportanceBin>().unwrap(),
            ImportanceBin::NotImportant
        );
    }
}
