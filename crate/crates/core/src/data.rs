//! Datasets: MNIST IDX files, CIFAR-10 binary batches and synthetic blobs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

pub const MNIST_VALID: usize = 10_000;
pub const CIFAR_VALID: usize = 5_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Feature matrix with values in `[0, 1]` plus integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(x: Matrix, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} rows but {} labels", x.rows(), labels.len()),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::InvalidValue(format!(
                "label {y} outside [0, {n_classes})"
            )));
        }
        if let Some(v) = x.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("feature {v} outside [0, 1]")));
        }
        Ok(Dataset {
            x,
            labels,
            n_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    /// Contiguous range `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize, split: Split) -> Dataset {
        Dataset {
            x: self.x.slice_rows(start, end),
            labels: self.labels[start..end].to_vec(),
            n_classes: self.n_classes,
            split,
        }
    }

    /// The given examples, in order.
    pub fn select(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.x.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Keeps the first `n` examples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            *self = self.slice(0, n, self.split);
        }
    }
}

/// Train / validation / test triple.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Carves the last `n_valid` examples of `full_train` off as validation.
    pub fn carve(full_train: Dataset, n_valid: usize, test: Dataset) -> Result<Splits> {
        if n_valid >= full_train.len() {
            return Err(Error::Config(format!(
                "validation split of {n_valid} leaves no training data ({} examples)",
                full_train.len()
            )));
        }
        let cut = full_train.len() - n_valid;
        Ok(Splits {
            valid: full_train.slice(cut, full_train.len(), Split::Valid),
            train: full_train.slice(0, cut, Split::Train),
            test,
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            offset,
            msg: "unexpected end of header".into(),
        })
}

fn expect_magic(bytes: &[u8], want: u32, path: &Path) -> Result<()> {
    let got = be_u32(bytes, 0, path)?;
    if got != want {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("bad magic 0x{got:08x}, expected 0x{want:08x}"),
        });
    }
    Ok(())
}

fn expect_len(bytes: &[u8], want: usize, path: &Path) -> Result<()> {
    if bytes.len() != want {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len().min(want),
            msg: format!("header promises {want} bytes, file has {}", bytes.len()),
        });
    }
    Ok(())
}

/// Parses an IDX image file into `count × (rows·cols)` pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Matrix> {
    expect_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let features = rows * cols;
    expect_len(bytes, 16 + count * features, path)?;
    let data = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Matrix::from_raw(count, features, data))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    expect_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    expect_len(bytes, 8 + count, path)?;
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads one IDX image/label file pair.
pub fn load_mnist_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let x = parse_idx_images(&read(images)?, images)?;
    let y = parse_idx_labels(&read(labels)?, labels)?;
    if x.rows() != y.len() {
        return Err(Error::Parse {
            path: labels.to_path_buf(),
            offset: 4,
            msg: format!(
                "{} labels for {} images in {}",
                y.len(),
                x.rows(),
                images.display()
            ),
        });
    }
    Dataset::new(x, y, 10, split)
}

/// Standard MNIST layout in `dir`: 50k train, the last 10k of the official
/// training file as validation, and the official 10k test set.
pub fn load_mnist_dir(dir: &Path) -> Result<Splits> {
    let train = load_mnist_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        Split::Train,
    )?;
    let test = load_mnist_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        Split::Test,
    )?;
    Splits::carve(train, MNIST_VALID, test)
}

pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Matrix, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len() - bytes.len() % CIFAR_RECORD,
            msg: format!(
                "size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: r * CIFAR_RECORD,
                msg: format!("label byte {} is not a CIFAR-10 class", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((Matrix::from_raw(n, CIFAR_PIXELS, data), labels))
}

/// Concatenates CIFAR-10 binary batch files in the given order.
pub fn load_cifar10_bin(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (x, y) = parse_cifar10(&read(p)?, p)?;
        data.extend(x.into_vec());
        labels.extend(y);
    }
    let n = labels.len();
    Dataset::new(Matrix::from_raw(n, CIFAR_PIXELS, data), labels, 10, split)
}

/// `data_batch_{1..5}.bin` for training (last 5k as validation) and
/// `test_batch.bin` for testing.
pub fn load_cifar10_dir(dir: &Path) -> Result<Splits> {
    let train: Vec<PathBuf> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    let train = load_cifar10_bin(&train, Split::Train)?;
    let test = load_cifar10_bin(&[dir.join("test_batch.bin")], Split::Test)?;
    Splits::carve(train, CIFAR_VALID, test)
}

/// Unit-variance Gaussian clusters around mutually orthogonal centres that
/// are pairwise `separation` apart, rescaled as a whole into `[0, 1]`.
///
/// Labels cycle through the classes so every class is equally represented.
pub fn synth_blobs<R: Rng + ?Sized>(
    n_classes: usize,
    n_features: usize,
    n_examples: usize,
    separation: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if n_classes < 2 || n_features == 0 || n_examples == 0 {
        return Err(Error::InvalidValue(format!(
            "synth_blobs needs >= 2 classes and positive sizes, got {n_classes} classes, \
             {n_features} features, {n_examples} examples"
        )));
    }
    if n_classes > n_features {
        return Err(Error::InvalidValue(format!(
            "{n_classes} orthogonal centres need at least as many features, got {n_features}"
        )));
    }
    // Gram-Schmidt on Gaussian vectors gives a random orthonormal set.
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    while centres.len() < n_classes {
        let mut v: Vec<f64> = (0..n_features)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        for c in &centres {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(c) {
                *a -= dot * b;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            centres.push(v);
        }
    }
    let radius = separation / std::f64::consts::SQRT_2;
    let mut data = Vec::with_capacity(n_examples * n_features);
    let mut labels = Vec::with_capacity(n_examples);
    for i in 0..n_examples {
        let y = i % n_classes;
        labels.push(y);
        for &c in &centres[y] {
            let noise: f64 = StandardNormal.sample(rng);
            data.push(radius * c + noise);
        }
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    for v in &mut data {
        *v = ((*v - lo) / span).clamp(0.0, 1.0);
    }
    Dataset::new(
        Matrix::from_raw(n_examples, n_features, data),
        labels,
        n_classes,
        Split::Train,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(IDX_LABELS_MAGIC.to_be_bytes());
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_images_scale_pixels() {
        let bytes = idx_images(2, 1, 2, &[0, 255, 51, 102]);
        let m = parse_idx_images(&bytes, Path::new("x")).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m.row(0), &[0.0, 1.0]);
        assert_eq!(m.row(1), &[0.2, 0.4]);
    }

    #[test]
    fn idx_bad_magic_names_offset() {
        let mut bytes = idx_images(1, 1, 1, &[0]);
        bytes[3] = 0x01;
        let err = parse_idx_images(&bytes, Path::new("imgs")).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 0),
            e => panic!("unexpected {e}"),
        }
        assert!(err_string(&bytes).contains("byte offset 0"));
    }

    fn err_string(bytes: &[u8]) -> String {
        parse_idx_images(bytes, Path::new("imgs"))
            .unwrap_err()
            .to_string()
    }

    #[test]
    fn idx_truncated_and_trailing_rejected() {
        let bytes = idx_images(3, 2, 2, &[0; 11]);
        assert!(parse_idx_images(&bytes, Path::new("x")).is_err());
        let bytes = idx_images(1, 2, 2, &[0; 5]);
        assert!(parse_idx_images(&bytes, Path::new("x")).is_err());
        let mut lb = idx_labels(&[1, 2, 3]);
        lb.pop();
        assert!(parse_idx_labels(&lb, Path::new("y")).is_err());
        assert!(parse_idx_labels(&idx_images(0, 1, 1, &[]), Path::new("y")).is_err());
    }

    #[test]
    fn idx_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        fs::write(&ip, idx_images(2, 1, 1, &[1, 2])).unwrap();
        fs::write(&lp, idx_labels(&[1, 2, 3])).unwrap();
        assert!(load_mnist_idx(&ip, &lp, Split::Train).is_err());
        fs::write(&lp, idx_labels(&[1, 2])).unwrap();
        let ds = load_mnist_idx(&ip, &lp, Split::Train).unwrap();
        assert_eq!(ds.labels, vec![1, 2]);
    }

    #[test]
    fn cifar_records() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 9;
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 3;
        let (x, y) = parse_cifar10(&bytes, Path::new("c")).unwrap();
        assert_eq!(x.shape(), (2, 3072));
        assert_eq!(y, vec![9, 3]);
        assert_eq!(x.get(0, 0), 1.0);
        assert!(parse_cifar10(&bytes[..CIFAR_RECORD + 10], Path::new("c")).is_err());
        bytes[0] = 10;
        assert!(parse_cifar10(&bytes, Path::new("c")).is_err());
    }

    #[test]
    fn carve_is_disjoint_and_exhaustive() {
        let x = Matrix::from_fn(10, 1, |i, _| i as f64 / 10.0);
        let ds = Dataset::new(x, (0..10).map(|i| i % 2).collect(), 2, Split::Train).unwrap();
        let test = ds.slice(0, 2, Split::Test);
        let s = Splits::carve(ds, 3, test).unwrap();
        assert_eq!(s.train.len(), 7);
        assert_eq!(s.valid.len(), 3);
        assert_eq!(s.valid.x.get(0, 0), 0.7);
        assert_eq!(s.train.x.get(6, 0), 0.6);
    }

    #[test]
    fn blobs_deterministic_and_in_range() {
        let a = synth_blobs(3, 5, 50, 4.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = synth_blobs(3, 5, 50, 4.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.x.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synth_blobs(3, 5, 0, 4.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn dataset_rejects_out_of_range() {
        assert!(Dataset::new(Matrix::zeros(1, 1), vec![2], 2, Split::Train).is_err());
        assert!(Dataset::new(Matrix::filled(1, 1, 1.5), vec![0], 2, Split::Train).is_err());
        assert!(Dataset::new(Matrix::zeros(2, 1), vec![0], 2, Split::Train).is_err());
    }
}
