//! JSON run configuration shared by every command.
//!
//! ```json
//! {
//!   "dataset": { "kind": "mnist", "dir": "mnist" },
//!   "model": {
//!     "gating": { "kind": "condnet" },
//!     "layers": [ { "n_blocks": 16, "block_size": 16 } ],
//!     "activation": "tanh"
//!   },
//!   "hyper": { "alpha": 0.001, "alpha_pi": 5e-5, "tau": 0.0625, "seed": 1 },
//!   "out_dir": "runs/mnist"
//! }
//! ```
//!
//! Relative dataset directories are resolved against `$CONDNET_DATA`
//! (default `data`). Optional `bench`, `sweep` and `inspect` sections
//! configure the corresponding commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Split, Splits};
use crate::error::{Error, Result};
use crate::network::{Activation, Architecture, LayerShape};
use crate::trainer::{stream_rng, GateKind, Hyperparams};

/// Environment variable naming the dataset root.
pub const DATA_ENV: &str = "CONDNET_DATA";

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];
const CIFAR_FILES: [&str; 6] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
    "test_batch.bin",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Mnist {
        #[serde(default = "default_mnist_dir")]
        dir: PathBuf,
        /// Keep only the first N training examples.
        #[serde(default)]
        train_limit: Option<usize>,
    },
    Cifar10 {
        #[serde(default = "default_cifar_dir")]
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
    },
    /// Gaussian blobs, split in order into train / valid / test.
    Synthetic {
        n_classes: usize,
        n_features: usize,
        n_train: usize,
        n_valid: usize,
        n_test: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_mnist_dir() -> PathBuf {
    "mnist".into()
}

fn default_cifar_dir() -> PathBuf {
    "cifar-10-batches-bin".into()
}

/// Root for relative dataset paths.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn resolve(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        dir.to_path_buf()
    } else {
        data_root().join(dir)
    }
}

impl DatasetSpec {
    /// `(n_features, n_classes)`
    pub fn dims(&self) -> (usize, usize) {
        match self {
            DatasetSpec::Mnist { .. } => (784, 10),
            DatasetSpec::Cifar10 { .. } => (3072, 10),
            DatasetSpec::Synthetic {
                n_features,
                n_classes,
                ..
            } => (*n_features, *n_classes),
        }
    }

    /// Fails with [`Error::MissingData`] when required files are absent.
    pub fn check(&self) -> Result<()> {
        let (dir, files, hint): (PathBuf, &[&str], &str) = match self {
            DatasetSpec::Mnist { dir, train_limit } => {
                check_limit(*train_limit)?;
                (
                    resolve(dir),
                    &MNIST_FILES,
                    "run scripts/fetch_mnist.sh or set CONDNET_DATA",
                )
            }
            DatasetSpec::Cifar10 { dir, train_limit } => {
                check_limit(*train_limit)?;
                (
                    resolve(dir),
                    &CIFAR_FILES,
                    "unpack the CIFAR-10 binary version there or set CONDNET_DATA",
                )
            }
            DatasetSpec::Synthetic {
                n_classes,
                n_features,
                n_train,
                n_valid,
                n_test,
                separation,
                ..
            } => {
                if *n_classes < 2 || n_classes > n_features {
                    return Err(Error::Config(format!(
                        "synthetic: need 2 <= n_classes <= n_features, got {n_classes} / {n_features}"
                    )));
                }
                if *n_train < 2 || *n_valid == 0 || *n_test == 0 {
                    return Err(Error::Config(
                        "synthetic: n_train >= 2, n_valid, n_test >= 1".into(),
                    ));
                }
                if !(separation.is_finite() && *separation > 0.0) {
                    return Err(Error::Config(format!(
                        "synthetic: separation must be > 0, got {separation}"
                    )));
                }
                return Ok(());
            }
        };
        for f in files {
            let path = dir.join(f);
            if !path.is_file() {
                return Err(Error::MissingData {
                    path,
                    hint: hint.into(),
                });
            }
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Splits> {
        self.check()?;
        match self {
            DatasetSpec::Mnist { dir, train_limit } => {
                let mut s = data::load_mnist_dir(&resolve(dir))?;
                if let Some(n) = train_limit {
                    s.train.truncate(*n);
                }
                Ok(s)
            }
            DatasetSpec::Cifar10 { dir, train_limit } => {
                let mut s = data::load_cifar10_dir(&resolve(dir))?;
                if let Some(n) = train_limit {
                    s.train.truncate(*n);
                }
                Ok(s)
            }
            DatasetSpec::Synthetic {
                n_classes,
                n_features,
                n_train,
                n_valid,
                n_test,
                separation,
                seed,
            } => {
                let total = n_train + n_valid + n_test;
                let all = data::synth_blobs(
                    *n_classes,
                    *n_features,
                    total,
                    *separation,
                    &mut stream_rng(*seed, 0),
                )?;
                let part = |a: usize, b: usize, split: Split| -> Dataset { all.slice(a, b, split) };
                Ok(Splits {
                    train: part(0, *n_train, Split::Train),
                    valid: part(*n_train, n_train + n_valid, Split::Valid),
                    test: part(n_train + n_valid, total, Split::Test),
                })
            }
        }
    }
}

fn check_limit(limit: Option<usize>) -> Result<()> {
    match limit {
        Some(n) if n < 2 => Err(Error::Config(format!("train_limit must be >= 2, got {n}"))),
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_gating")]
    pub gating: GateKind,
    pub layers: Vec<LayerShape>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_gating() -> GateKind {
    GateKind::Condnet
}

/// Kernel sweep plus an optional whole-model forward benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    /// `[rows, inner, cols]` of each product.
    pub dims: Vec<[usize; 3]>,
    pub block_size: usize,
    pub sparsities: Vec<f64>,
    pub trials: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            dims: vec![[1024, 1024, 1024]],
            block_size: 64,
            sparsities: vec![0.125, 0.25, 0.5, 1.0],
            trials: 5,
        }
    }
}

/// Values tried for each swept penalty weight; empty lists are skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub lambda_s: Vec<f64>,
    pub lambda_v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InspectSpec {
    pub split: Split,
    /// Only dump examples of these classes.
    pub classes: Option<Vec<usize>>,
    pub max_examples: Option<usize>,
}

impl Default for InspectSpec {
    fn default() -> Self {
        InspectSpec {
            split: Split::Test,
            classes: None,
            max_examples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub hyper: Hyperparams,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Checkpoint read by eval, inspect and bench; defaults to
    /// `<out_dir>/model.ckpt`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub bench: BenchSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub inspect: InspectSpec,
}

fn default_out_dir() -> PathBuf {
    "runs/default".into()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn architecture(&self) -> Architecture {
        let (n_inputs, n_classes) = self.dataset.dims();
        Architecture {
            n_inputs,
            n_classes,
            layers: self.model.layers.clone(),
            activation: self.model.activation,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    /// Checks the model and hyperparameters; datasets are checked separately
    /// by [`DatasetSpec::check`].
    pub fn validate(&self) -> Result<()> {
        let arch = self.architecture();
        arch.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.hyper.validate(arch.layers.len())?;
        if let GateKind::Bdnn { rate: Some(r) } = &self.model.gating {
            let rates = r.resolve(arch.layers.len(), "bdnn rate")?;
            if rates.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
                return Err(Error::Config(format!(
                    "bdnn rate must lie in (0, 1], got {rates:?}"
                )));
            }
        }
        if let Some(classes) = &self.inspect.classes {
            if let Some(c) = classes.iter().find(|&&c| c >= arch.n_classes) {
                return Err(Error::Config(format!("inspect class {c} out of range")));
            }
        }
        if self
            .sweep
            .lambda_s
            .iter()
            .chain(&self.sweep.lambda_v)
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(Error::Config("sweep values must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn validate_bench(&self) -> Result<()> {
        let b = &self.bench;
        if b.dims.is_empty() || b.sparsities.is_empty() {
            return Err(Error::Config(
                "bench needs at least one dims entry and one sparsity".into(),
            ));
        }
        if b.trials < crate::linalg::MIN_TRIALS {
            return Err(Error::Config(format!(
                "bench.trials must be >= {}, got {}",
                crate::linalg::MIN_TRIALS,
                b.trials
            )));
        }
        if b.block_size == 0 {
            return Err(Error::Config("bench.block_size must be >= 1".into()));
        }
        for d in &b.dims {
            if d.contains(&0) || d[1] % b.block_size != 0 || d[2] % b.block_size != 0 {
                return Err(Error::Config(format!(
                    "bench dims {d:?} must be positive with inner and cols divisible by block size {}",
                    b.block_size
                )));
            }
        }
        if let Some(s) = b.sparsities.iter().find(|&&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Config(format!("bench sparsity {s} outside (0, 1]")));
        }
        Ok(())
    }
}
