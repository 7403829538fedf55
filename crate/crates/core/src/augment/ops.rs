//! Per-patch kernels. Pixels are processed in `f64` and written back clamped
//! to `[0,1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AugAction, AugmentError, Axis, OpKind, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy)]
struct Dims {
    c: usize,
    h: usize,
    w: usize,
}

impl Dims {
    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Applies `op` to every patch of `patches` (`[K,C,h,w]`), patch `k` using
/// `actions[k]`. Mixing operations read patch `k` of `partners`, which must be
/// given exactly when `op` is Mixup or CutMix. The apply flag is not
/// consulted: callers pass only the patches to transform.
pub fn apply_operation<T: Real>(
    op: OpKind,
    patches: &Tensor<T>,
    actions: &[AugAction],
    partners: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [k, c, h, w] = match *patches.shape() {
        [k, c, h, w] => [k, c, h, w],
        _ => {
            return Err(AugmentError::Shape {
                expected: "[K,C,h,w] patches".into(),
                found: patches.shape().to_vec(),
            })
        }
    };
    if actions.len() != k {
        return Err(AugmentError::ActionCount {
            expected: k,
            found: actions.len(),
        });
    }
    match (op.is_mixing(), partners) {
        (true, None) => return Err(AugmentError::MissingPartner(op)),
        (false, Some(_)) => return Err(AugmentError::UnexpectedPartner(op)),
        (true, Some(p)) if p.shape() != patches.shape() => {
            return Err(AugmentError::Shape {
                expected: format!("partner patches shaped {:?}", patches.shape()),
                found: p.shape().to_vec(),
            })
        }
        _ => {}
    }
    for a in actions {
        if a.op != op {
            return Err(AugmentError::InvalidAction {
                op,
                reason: format!("action for {} in a {op} group", a.op),
            });
        }
        a.check_executable()?;
    }

    let dims = Dims { c, h, w };
    let len = c * h * w;
    let mut out = Vec::with_capacity(k * len);
    let mut src = vec![0.0f64; len];
    let mut partner = vec![0.0f64; len];
    for (j, action) in actions.iter().enumerate() {
        let range = j * len..(j + 1) * len;
        to_f64(&patches.data()[range.clone()], &mut src);
        let partner = partners.map(|p| {
            to_f64(&p.data()[range.clone()], &mut partner);
            &partner[..]
        });
        let result = transform(op, action, &src, partner, dims);
        out.extend(result.into_iter().map(|v| T::lit(v.clamp(0.0, 1.0))));
    }
    Ok(Tensor::new(patches.shape(), out)?)
}

fn to_f64<T: Real>(src: &[T], dst: &mut [f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s.as_f64();
    }
}

fn transform(op: OpKind, a: &AugAction, x: &[f64], partner: Option<&[f64]>, d: Dims) -> Vec<f64> {
    let m = a.magnitude;
    match op {
        OpKind::Brightness => x.iter().map(|&v| m * v).collect(),
        OpKind::Contrast => {
            let mu = gray_mean(x, d);
            x.iter().map(|&v| mu + m * (v - mu)).collect()
        }
        OpKind::Invert => x.iter().map(|&v| 1.0 - v).collect(),
        OpKind::Solarize => x.iter().map(|&v| if v > m { 1.0 - v } else { v }).collect(),
        OpKind::Posterize => posterize(x, m),
        OpKind::Equalize => equalize(x, d),
        OpKind::Sharpness => sharpness(x, m, d),
        OpKind::Color => hue_rotate(x, m, d),
        OpKind::Cutout => cutout(x, d),
        OpKind::RandomErasing => random_erasing(x, a.seed, d),
        OpKind::Rotate => {
            let (sin, cos) = m.to_radians().sin_cos();
            warp(x, d, |dx, dy| (cos * dx + sin * dy, -sin * dx + cos * dy))
        }
        OpKind::Shear => {
            let s = m.to_radians().tan();
            match a.axis {
                Axis::X => warp(x, d, |dx, dy| (dx - s * dy, dy)),
                Axis::Y => warp(x, d, |dx, dy| (dx, dy - s * dx)),
            }
        }
        OpKind::Translate => {
            let (tx, ty) = match a.axis {
                Axis::X => (m * d.w as f64, 0.0),
                Axis::Y => (0.0, m * d.h as f64),
            };
            warp(x, d, |dx, dy| (dx - tx, dy - ty))
        }
        OpKind::Mixup => {
            let p = partner.expect("checked by apply_operation");
            let l = a.lambda;
            x.iter().zip(p).map(|(&v, &q)| l * v + (1.0 - l) * q).collect()
        }
        OpKind::CutMix => partner.expect("checked by apply_operation").to_vec(),
    }
}

/// Mean luminance for RGB patches, plain mean otherwise.
fn gray_mean(x: &[f64], d: Dims) -> f64 {
    let n = d.plane();
    if d.c == 3 {
        let (r, g, b) = (&x[..n], &x[n..2 * n], &x[2 * n..]);
        let sum: f64 = (0..n).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).sum();
        sum / n as f64
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

fn quantize(v: f64) -> usize {
    (v * 255.0).round().clamp(0.0, 255.0) as usize
}

fn posterize(x: &[f64], bits: f64) -> Vec<f64> {
    let bits = bits.round().clamp(0.0, 8.0) as u32;
    if bits >= 8 {
        return x.to_vec();
    }
    let mask = (0xffu32 << (8 - bits)) & 0xff;
    x.iter().map(|&v| (quantize(v) as u32 & mask) as f64 / 255.0).collect()
}

/// Per-channel histogram equalization over 256 bins. Level `q` maps to
/// `round(255 * cdf(q) / n)`; channels with a single occupied level are left
/// untouched.
fn equalize(x: &[f64], d: Dims) -> Vec<f64> {
    let n = d.plane();
    let mut out = Vec::with_capacity(x.len());
    for channel in x.chunks(n) {
        let mut hist = [0usize; 256];
        for &v in channel {
            hist[quantize(v)] += 1;
        }
        if hist.iter().filter(|&&c| c > 0).count() <= 1 {
            out.extend_from_slice(channel);
            continue;
        }
        let mut lut = [0.0f64; 256];
        let mut cdf = 0usize;
        for (q, &count) in hist.iter().enumerate() {
            cdf += count;
            lut[q] = (255.0 * cdf as f64 / n as f64).round() / 255.0;
        }
        out.extend(channel.iter().map(|&v| lut[quantize(v)]));
    }
    out
}

/// Blends with a 3x3 smoothing filter (centre weight 5, neighbours 1);
/// border pixels keep their value in the blurred image.
fn sharpness(x: &[f64], m: f64, d: Dims) -> Vec<f64> {
    let (h, w) = (d.h, d.w);
    let mut out = x.to_vec();
    if h < 3 || w < 3 {
        return out;
    }
    for (ch, plane) in x.chunks(d.plane()).enumerate() {
        for y in 1..h - 1 {
            for xx in 1..w - 1 {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let weight = if ky == 1 && kx == 1 { 5.0 } else { 1.0 };
                        acc += weight * plane[(y + ky - 1) * w + xx + kx - 1];
                    }
                }
                let v = plane[y * w + xx];
                out[ch * d.plane() + y * w + xx] = m * v + (1.0 - m) * (acc / 13.0);
            }
        }
    }
    out
}

/// Rotates hue by `shift` turns of the colour wheel. Non-RGB patches pass
/// through.
fn hue_rotate(x: &[f64], shift: f64, d: Dims) -> Vec<f64> {
    if d.c != 3 {
        return x.to_vec();
    }
    let n = d.plane();
    let mut out = x.to_vec();
    for i in 0..n {
        let (r, g, b) = (x[i], x[n + i], x[2 * n + i]);
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        out[i] = r;
        out[n + i] = g;
        out[2 * n + i] = b;
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn cutout(x: &[f64], d: Dims) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for channel in x.chunks(d.plane()) {
        let first = channel[0];
        if channel.iter().all(|&v| v == first) {
            out.extend_from_slice(channel);
            continue;
        }
        let mean = channel.iter().sum::<f64>() / channel.len() as f64;
        out.extend(std::iter::repeat_n(mean, channel.len()));
    }
    out
}

/// Fills a random rectangle (area fraction in `[0.09, 0.36]`, aspect ratio in
/// `[0.5, 2]`) with uniform noise.
fn random_erasing(x: &[f64], seed: u64, d: Dims) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (d.h, d.w);
    let area = rng.random_range(0.09..=0.36) * (h * w) as f64;
    let aspect = rng.random_range(0.5..=2.0);
    let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - eh);
    let x0 = rng.random_range(0..=w - ew);
    let mut out = x.to_vec();
    for ch in 0..d.c {
        for y in y0..y0 + eh {
            for xx in x0..x0 + ew {
                out[ch * d.plane() + y * w + xx] = rng.random::<f64>();
            }
        }
    }
    out
}

/// Inverse-maps every output pixel through `source` (offsets from the patch
/// centre in, offsets out) and samples bilinearly with zero padding.
fn warp(x: &[f64], d: Dims, source: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
    let (h, w) = (d.h, d.w);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; x.len()];
    for y in 0..h {
        for xx in 0..w {
            let (sx, sy) = source(xx as f64 - cx, y as f64 - cy);
            let (sx, sy) = (sx + cx, sy + cy);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for ch in 0..d.c {
                let plane = &x[ch * d.plane()..(ch + 1) * d.plane()];
                let mut acc = 0.0;
                for &(tx, ty, weight) in &taps {
                    if weight != 0.0 && tx >= 0.0 && ty >= 0.0 && tx < w as f64 && ty < h as f64 {
                        acc += weight * plane[ty as usize * w + tx as usize];
                    }
                }
                out[ch * d.plane() + y * w + xx] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn apply(op: OpKind, x: &Tensor<f64>, a: AugAction) -> Tensor<f64> {
        let k = x.shape()[0];
        apply_operation(op, x, &vec![a; k], None).unwrap()
    }

    #[test]
    fn brightness_scales_and_zero_is_black() {
        let x = patch(0, &[1, 3, 4, 4]);
        let y = apply(OpKind::Brightness, &x, AugAction::forced(OpKind::Brightness, 0.5));
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_eq!(*b, 0.5 * a);
        }
    }

    #[test]
    fn contrast_keeps_gray_mean() {
        let x = patch(1, &[1, 3, 6, 6]);
        let y = apply(OpKind::Contrast, &x, AugAction::forced(OpKind::Contrast, 0.5));
        let d = Dims { c: 3, h: 6, w: 6 };
        assert!((gray_mean(x.data(), d) - gray_mean(y.data(), d)).abs() < 1e-12);
    }

    #[test]
    fn solarize_inverts_above_threshold() {
        let x = Tensor::new(&[1, 1, 1, 3], vec![0.05, 0.1, 0.8]).unwrap();
        let y = apply(OpKind::Solarize, &x, AugAction::forced(OpKind::Solarize, 0.1));
        assert_eq!(y.data(), &[0.05, 0.1, 1.0 - 0.8]);
    }

    #[test]
    fn posterize_keeps_three_high_bits() {
        let x = Tensor::new(&[1, 1, 1, 3], vec![1.0, 0.5, 31.0 / 255.0]).unwrap();
        let y = apply(OpKind::Posterize, &x, AugAction::forced(OpKind::Posterize, 3.0));
        assert_eq!(y.data(), &[224.0 / 255.0, 128.0 / 255.0, 0.0]);
    }

    #[test]
    fn equalize_spreads_two_levels() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.2, 0.2, 0.4, 0.4]).unwrap();
        let y = apply(OpKind::Equalize, &x, AugAction::forced(OpKind::Equalize, 0.0));
        assert_eq!(y.data(), &[128.0 / 255.0, 128.0 / 255.0, 1.0, 1.0]);
    }

    #[test]
    fn sharpness_zero_is_smoothing_filter() {
        let mut data = vec![0.0; 9];
        data[4] = 1.0;
        let x = Tensor::new(&[1, 1, 3, 3], data).unwrap();
        let y = apply(OpKind::Sharpness, &x, AugAction::forced(OpKind::Sharpness, 0.5));
        assert!((y.data()[4] - (0.5 + 0.5 * 5.0 / 13.0)).abs() < 1e-15);
        assert_eq!(y.data()[0], 0.0);
    }

    #[test]
    fn hue_rotation_by_a_third_cycles_primaries() {
        let x = Tensor::new(&[1, 3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let y = apply(OpKind::Color, &x, AugAction::forced(OpKind::Color, 0.3));
        let y2 = apply(OpKind::Color, &x, AugAction::forced(OpKind::Color, 0.0));
        assert_eq!(y2.data(), x.data());
        // Hue 0.3 lies in the yellow-green sector: g saturates, r = 1 - 0.8.
        assert!((y.data()[0] - 0.2).abs() < 1e-12);
        assert_eq!(&y.data()[1..], &[1.0, 0.0]);
        // A third of a turn takes pure red to pure green.
        let rgb = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((rgb.1 - 1.0).abs() < 1e-12 && rgb.0.abs() < 1e-12);
    }

    #[test]
    fn translate_shifts_by_fraction_of_extent() {
        let x = patch(2, &[1, 1, 4, 4]);
        let a = AugAction::forced(OpKind::Translate, 0.25).with_axis(Axis::X);
        let y = apply(OpKind::Translate, &x, a);
        for r in 0..4 {
            assert_eq!(y.data()[r * 4], 0.0);
            for c in 1..4 {
                assert_eq!(y.data()[r * 4 + c], x.data()[r * 4 + c - 1]);
            }
        }
    }

    #[test]
    fn rotate_fixes_centre_and_moves_corners_out() {
        let x = Tensor::<f64>::full(&[1, 1, 5, 5], 0.5).unwrap();
        let y = apply(OpKind::Rotate, &x, AugAction::forced(OpKind::Rotate, 30.0));
        assert!((y.data()[12] - 0.5).abs() < 1e-12);
        // Corners sample partly outside the patch and pick up zero padding.
        assert!(y.data()[0] < 0.5);
    }

    #[test]
    fn random_erasing_covers_bounded_rectangle() {
        let x = Tensor::<f64>::full(&[1, 3, 16, 16], 2.0 / 3.0).unwrap();
        for seed in 0..50 {
            let a = AugAction::forced(OpKind::RandomErasing, 0.0).with_seed(seed);
            let y = apply(OpKind::RandomErasing, &x, a);
            let changed = y.data()[..256].iter().filter(|&&v| v != 2.0 / 3.0).count();
            assert!(changed <= (0.36f64 * 256.0 * 1.2) as usize, "{changed}");
            assert!(changed >= 9, "{changed}");
            assert_eq!(y, apply(OpKind::RandomErasing, &x, a));
        }
    }

    #[test]
    fn mixing_ops_require_partners() {
        let x = patch(4, &[2, 1, 2, 2]);
        let mix = vec![AugAction::forced(OpKind::Mixup, 0.0).with_lambda(0.25); 2];
        assert!(matches!(
            apply_operation(OpKind::Mixup, &x, &mix, None),
            Err(AugmentError::MissingPartner(_))
        ));
        let p = patch(5, &[2, 1, 2, 2]);
        let y = apply_operation(OpKind::Mixup, &x, &mix, Some(&p)).unwrap();
        for ((a, b), c) in x.data().iter().zip(p.data()).zip(y.data()) {
            assert!((0.25 * a + 0.75 * b - c).abs() < 1e-15);
        }
        let cut = vec![AugAction::forced(OpKind::CutMix, 0.0); 2];
        assert_eq!(apply_operation(OpKind::CutMix, &x, &cut, Some(&p)).unwrap(), p);
        assert!(matches!(
            apply_operation(
                OpKind::Invert,
                &x,
                &[AugAction::forced(OpKind::Invert, 0.0); 2],
                Some(&p)
            ),
            Err(AugmentError::UnexpectedPartner(_))
        ));
        assert!(apply_operation(OpKind::Invert, &x, &mix, None).is_err());
    }
}
