use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no CIFAR-10 batch files in {0}")]
    Missing(PathBuf),
    #[error("{path}: size {len} is not a multiple of {CIFAR_RECORD}")]
    RecordSize { path: PathBuf, len: usize },
    #[error("{path}: record {record} has label {label}, expected 0..=9")]
    Label { path: PathBuf, record: usize, label: u8 },
    #[error("empty dataset")]
    Empty,
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Images `[B,C,H,W]` in `[0,1]` with one-hot labels `[B,classes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub images: Tensor<f32>,
    pub labels: Tensor<f32>,
    /// Class index of every image.
    pub classes: Vec<usize>,
}

impl DatasetSplit {
    pub fn new(images: Vec<f32>, classes: Vec<usize>, shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let n = classes.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        let mut labels = vec![0.0f32; n * num_classes];
        for (i, &c) in classes.iter().enumerate() {
            labels[i * num_classes + c] = 1.0;
        }
        let [c, h, w] = shape;
        Ok(DatasetSplit {
            images: Tensor::new(&[n, c, h, w], images).expect("caller supplies matching pixels"),
            labels: Tensor::new(&[n, num_classes], labels).expect("consistent shape"),
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.shape()[1]
    }

    /// `(height, width)` of the images.
    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    /// Images and labels at `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        (
            self.images.gather_batch(indices).expect("indices in range"),
            self.labels.gather_batch(indices).expect("indices in range"),
        )
    }

    /// Keeps the first `k` images of every class, in original order.
    pub fn take_per_class(&self, k: usize) -> Self {
        let mut seen = vec![0usize; self.num_classes()];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = self.classes[i];
                seen[c] += 1;
                seen[c] <= k
            })
            .collect();
        let (images, labels) = self.batch(&keep);
        DatasetSplit {
            images,
            labels,
            classes: keep.iter().map(|&i| self.classes[i]).collect(),
        }
    }

    /// The first `n` images.
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        DatasetSplit {
            images,
            labels,
            classes: self.classes[..idx.len()].to_vec(),
        }
    }
}

/// Parses CIFAR-10 binary records: one label byte, then the red, green and
/// blue 32x32 planes.
pub fn parse_cifar_records(path: &Path, bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::RecordSize {
            path: path.to_path_buf(),
            len: bytes.len(),
        });
    }
    let mut pixels = Vec::with_capacity(bytes.len());
    let mut classes = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (record, chunk) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let label = chunk[0];
        if label as usize >= CIFAR_CLASSES {
            return Err(DataError::Label {
                path: path.to_path_buf(),
                record,
                label,
            });
        }
        classes.push(label as usize);
        pixels.extend(chunk[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, classes))
}

fn read_batches(paths: &[PathBuf]) -> Result<DatasetSplit> {
    let mut pixels = Vec::new();
    let mut classes = Vec::new();
    for path in paths {
        let bytes = fs::read(path).map_err(|source| DataError::Io {
            path: path.clone(),
            source,
        })?;
        let (p, c) = parse_cifar_records(path, &bytes)?;
        pixels.extend(p);
        classes.extend(c);
    }
    DatasetSplit::new(pixels, classes, [3, CIFAR_SIDE, CIFAR_SIDE], CIFAR_CLASSES)
}

/// Reads `data_batch_*.bin` (training) and `test_batch.bin` from `dir`.
/// With `subset = Some(k)` only the first `k` training images per class are
/// kept.
pub fn load_cifar10(dir: &Path, subset: Option<usize>) -> Result<(DatasetSplit, DatasetSplit)> {
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut train: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    train.sort();
    let test = dir.join("test_batch.bin");
    if train.is_empty() || !test.exists() {
        return Err(DataError::Missing(dir.to_path_buf()));
    }
    let mut train = read_batches(&train)?;
    if let Some(k) = subset {
        train = train.take_per_class(k);
    }
    Ok((train, read_batches(&[test])?))
}

const SYNTH_SIDE: usize = 32;

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Procedural 32x32 RGB images, one shape and colour per class on a noisy
/// background. Labels go round-robin over the classes. Deterministic in
/// `seed`.
pub fn make_synth_dataset(n: usize, num_classes: usize, seed: u64) -> DatasetSplit {
    let s = SYNTH_SIDE;
    let mut pixels = Vec::with_capacity(n * 3 * s * s);
    let mut classes = Vec::with_capacity(n);
    for j in 0..n {
        let class = j % num_classes.max(1);
        let mut rng = stream(seed, &[purpose::DATA, j as u64]);
        let base: f64 = rng.random_range(0.1..0.4);
        let hue = (class as f64 / num_classes as f64 + rng.random_range(-0.03..0.03)).rem_euclid(1.0);
        let bright: f64 = rng.random_range(0.7..1.0);
        let color = hue_to_rgb(hue).map(|c| c * bright);
        let r: f64 = rng.random_range(6.0..11.0);
        let cx: f64 = rng.random_range(r..s as f64 - r);
        let cy: f64 = rng.random_range(r..s as f64 - r);
        let shape = class % 4;
        let mut img = vec![0.0f32; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = match shape {
                    0 => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
                    1 => dx * dx + dy * dy <= r * r,
                    2 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.55,
                    _ => {
                        let d = (dx * dx + dy * dy).sqrt();
                        d <= r && d >= r * 0.55
                    }
                };
                for c in 0..3 {
                    let noise: f64 = rng.random_range(-0.05..0.05);
                    let v = if inside { color[c] } else { base };
                    img[(c * s + y) * s + x] = (v + noise).clamp(0.0, 1.0) as f32;
                }
            }
        }
        pixels.extend(img);
        classes.push(class);
    }
    DatasetSplit::new(pixels, classes, [3, s, s], num_classes).expect("n > 0")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_records_parse() {
        let mut bytes = vec![0u8; 10 * CIFAR_RECORD];
        bytes[0] = 3;
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 9;
        let (pix, cls) = parse_cifar_records(Path::new("x"), &bytes).unwrap();
        assert_eq!(cls.len(), 10);
        assert_eq!(cls[0], 3);
        assert_eq!(cls[1], 9);
        assert_eq!(pix[0], 1.0);
        assert_eq!(pix[1], 0.0);
        bytes[0] = 12;
        assert!(matches!(
            parse_cifar_records(Path::new("x"), &bytes),
            Err(DataError::Label { label: 12, .. })
        ));
        assert!(matches!(
            parse_cifar_records(Path::new("x"), &bytes[1..]),
            Err(DataError::RecordSize { .. })
        ));
    }

    #[test]
    fn synth_is_deterministic_balanced_and_in_range() {
        let a = make_synth_dataset(101, 3, 4);
        assert_eq!(a, make_synth_dataset(101, 3, 4));
        assert_ne!(a.images, make_synth_dataset(101, 3, 5).images);
        let mut counts = [0usize; 3];
        for &c in &a.classes {
            counts[c] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.images.shape(), &[101, 3, 32, 32]);
        for (row, &c) in a.labels.data().chunks(3).zip(&a.classes) {
            assert_eq!(row[c], 1.0);
            assert_eq!(row.iter().sum::<f32>(), 1.0);
        }
    }

    #[test]
    fn subset_takes_first_per_class() {
        let d = make_synth_dataset(20, 2, 0).take_per_class(3);
        assert_eq!(d.classes, vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn missing_cifar_dir() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cifar10(dir.path(), None), Err(DataError::Missing(_))));
        assert!(load_cifar10(&dir.path().join("nope"), None).is_err());
    }
}
