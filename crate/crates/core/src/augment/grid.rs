use super::{AugmentError, Result};
use crate::tensor::{Real, Tensor};

/// A `side x side` grid of equal, non-overlapping patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    count: usize,
    side: usize,
}

impl PatchGrid {
    pub fn new(count: usize) -> Result<Self> {
        let side = (count as f64).sqrt().round() as usize;
        if count == 0 || side * side != count {
            return Err(AugmentError::NotPerfectSquare(count));
        }
        Ok(PatchGrid { count, side })
    }

    /// Number of patches `N`.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Patches per row and per column.
    pub fn side(&self) -> usize {
        self.side
    }

    /// Patch extent for an `height x width` image.
    pub fn patch_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if !height.is_multiple_of(self.side) || !width.is_multiple_of(self.side) || height == 0 || width == 0 {
            return Err(AugmentError::Indivisible {
                height,
                width,
                side: self.side,
            });
        }
        Ok((height / self.side, width / self.side))
    }

    /// Row and column of patch `index` (row-major).
    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index / self.side, index % self.side)
    }
}

fn image_dims<T: Real>(t: &Tensor<T>) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(AugmentError::Shape {
            expected: "[B,C,H,W] images".into(),
            found: t.shape().to_vec(),
        }),
    }
}

/// `[B,C,H,W] -> [B,N,C,H/side,W/side]`, patches in row-major grid order.
pub fn split_patches<T: Real>(images: &Tensor<T>, grid: &PatchGrid) -> Result<Tensor<T>> {
    let [b, c, h, w] = image_dims(images)?;
    let (ph, pw) = grid.patch_size(h, w)?;
    let n = grid.count();
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for i in 0..n {
            let (gr, gc) = grid.cell(i);
            for ch in 0..c {
                let plane = (bi * c + ch) * h * w;
                for y in 0..ph {
                    let row = plane + (gr * ph + y) * w + gc * pw;
                    out.extend_from_slice(&src[row..row + pw]);
                }
            }
        }
    }
    Ok(Tensor::new(&[b, n, c, ph, pw], out)?)
}

/// Inverse of [`split_patches`].
pub fn merge_patches<T: Real>(patches: &Tensor<T>, grid: &PatchGrid) -> Result<Tensor<T>> {
    let [b, n, c, ph, pw] = match *patches.shape() {
        [b, n, c, ph, pw] if n == grid.count() => [b, n, c, ph, pw],
        _ => {
            return Err(AugmentError::Shape {
                expected: format!("[B,{},C,h,w] patches", grid.count()),
                found: patches.shape().to_vec(),
            })
        }
    };
    let (h, w) = (ph * grid.side(), pw * grid.side());
    let src = patches.data();
    let mut out = vec![T::zero(); src.len()];
    let patch_len = c * ph * pw;
    for bi in 0..b {
        for i in 0..n {
            let (gr, gc) = grid.cell(i);
            let base = (bi * n + i) * patch_len;
            for ch in 0..c {
                let plane = (bi * c + ch) * h * w;
                for y in 0..ph {
                    let dst = plane + (gr * ph + y) * w + gc * pw;
                    let s = base + (ch * ph + y) * pw;
                    out[dst..dst + pw].copy_from_slice(&src[s..s + pw]);
                }
            }
        }
    }
    Ok(Tensor::new(&[b, c, h, w], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn cifar_grid_gives_four_sixteen_pixel_patches() {
        let grid = PatchGrid::new(4).unwrap();
        let p = split_patches(&ramp(&[2, 3, 32, 32]), &grid).unwrap();
        assert_eq!(p.shape(), &[2, 4, 3, 16, 16]);
        let grid = PatchGrid::new(16).unwrap();
        assert_eq!(grid.patch_size(224, 224).unwrap(), (56, 56));
    }

    #[test]
    fn non_square_counts_rejected() {
        for n in [0, 2, 3, 5, 8] {
            assert!(matches!(PatchGrid::new(n), Err(AugmentError::NotPerfectSquare(_))));
        }
        let grid = PatchGrid::new(9).unwrap();
        assert!(split_patches(&ramp(&[1, 1, 32, 32]), &grid).is_err());
    }

    #[test]
    fn patch_contents_follow_row_major_cells() {
        let grid = PatchGrid::new(4).unwrap();
        let img = ramp(&[1, 1, 4, 4]);
        let p = split_patches(&img, &grid).unwrap();
        // Patch 1 is the top-right 2x2 block.
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        // Patch 2 is the bottom-left block.
        assert_eq!(&p.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn merge_inverts_split_and_detects_permutation() {
        let grid = PatchGrid::new(16).unwrap();
        let img = ramp(&[2, 3, 8, 8]);
        let p = split_patches(&img, &grid).unwrap();
        assert_eq!(merge_patches(&p, &grid).unwrap(), img);

        let flat = p.reshape(&[32, 3, 2, 2]).unwrap();
        let mut perm: Vec<usize> = (0..32).collect();
        perm.swap(0, 1);
        let swapped = flat.gather_batch(&perm).unwrap().reshape(&[2, 16, 3, 2, 2]).unwrap();
        assert_ne!(merge_patches(&swapped, &grid).unwrap(), img);

        assert!(merge_patches(&p, &PatchGrid::new(4).unwrap()).is_err());
    }
}
