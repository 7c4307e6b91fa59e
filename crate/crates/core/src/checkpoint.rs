//! Versioned binary checkpoints.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "CNDNCKPT"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      4     header length H in bytes, u32 little-endian
//! 16      H     UTF-8 JSON header: architecture, gates, hyperparameters,
//!               seed, metadata and the number of payload values
//! 16+H    8·N   payload, f64 little-endian
//! ```
//!
//! The payload lists, in order, every hidden layer's `W` (row-major) and `b`,
//! the output layer's `W` and `b`, then `Z` (row-major) and `d` of every
//! learned policy in layer order. Identical models always serialise to
//! identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{Architecture, DenseLayer, Gate, NetworkParams};
use crate::policy::PolicyParams;
use crate::trainer::{Hyperparams, Model};

pub const MAGIC: &[u8; 8] = b"CNDNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum GateHeader {
    Learned,
    Uniform { rate: f64 },
    AlwaysOn,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    arch: Architecture,
    gates: Vec<GateHeader>,
    hyper: Hyperparams,
    seed: u64,
    meta: BTreeMap<String, String>,
    payload_len: usize,
}

/// A trained model and what is needed to reproduce or evaluate it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub hyper: Hyperparams,
    pub seed: u64,
    /// Free-form string metadata, stored sorted by key.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let values = self.model.flat_params();
        let header = Header {
            arch: self.model.net.arch.clone(),
            gates: self
                .model
                .gates
                .iter()
                .map(|g| match g {
                    Gate::Learned(_) => GateHeader::Learned,
                    Gate::Uniform(rate) => GateHeader::Uniform { rate: *rate },
                    Gate::AlwaysOn => GateHeader::AlwaysOn,
                })
                .collect(),
            hyper: self.hyper.clone(),
            seed: self.seed,
            meta: self.meta.clone(),
            payload_len: values.len(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let header_len = u32::try_from(json.len())
            .map_err(|_| Error::Checkpoint("header larger than 4 GiB".into()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a condnet checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(16..16 + header_len)
            .ok_or_else(|| bad(format!("truncated header: {header_len} bytes declared")))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        header.arch.validate().map_err(|e| bad(e.to_string()))?;
        if header.gates.len() != header.arch.layers.len() {
            return Err(bad(format!(
                "{} gates for {} hidden layers",
                header.gates.len(),
                header.arch.layers.len()
            )));
        }

        let body = &bytes[16 + header_len..];
        if body.len() != 8 * header.payload_len {
            return Err(bad(format!(
                "payload is {} bytes, header declares {} values",
                body.len(),
                header.payload_len
            )));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut reader = Reader {
            values: &values,
            pos: 0,
        };

        let arch = header.arch;
        let mut hidden = Vec::with_capacity(arch.layers.len());
        for (l, s) in arch.layers.iter().enumerate() {
            hidden.push(reader.layer(arch.fan_in(l), s.units())?);
        }
        let output = reader.layer(arch.fan_in(arch.layers.len()), arch.n_classes)?;
        let mut gates = Vec::with_capacity(arch.layers.len());
        for (l, g) in header.gates.iter().enumerate() {
            gates.push(match g {
                GateHeader::Learned => {
                    let n_blocks = arch.layers[l].n_blocks;
                    let z = reader.matrix(n_blocks, arch.fan_in(l))?;
                    let d = reader.take(n_blocks)?.to_vec();
                    Gate::Learned(PolicyParams { z, d })
                }
                GateHeader::Uniform { rate } => Gate::Uniform(*rate),
                GateHeader::AlwaysOn => Gate::AlwaysOn,
            });
        }
        if reader.pos != values.len() {
            return Err(bad(format!(
                "{} payload values left over",
                values.len() - reader.pos
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("payload contains non-finite values".into()));
        }
        Ok(Checkpoint {
            model: Model {
                net: NetworkParams {
                    arch,
                    hidden,
                    output,
                },
                gates,
            },
            hyper: header.hyper,
            seed: header.seed,
            meta: header.meta,
        })
    }

    /// Writes to a temporary sibling first so a failed write leaves no file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    values: &'a [f64],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[f64]> {
        let out = self.values.get(self.pos..self.pos + n).ok_or_else(|| {
            Error::Checkpoint("payload shorter than the architecture needs".into())
        })?;
        self.pos += n;
        Ok(out)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Ok(Matrix::from_raw(
            rows,
            cols,
            self.take(rows * cols)?.to_vec(),
        ))
    }

    fn layer(&mut self, fan_in: usize, fan_out: usize) -> Result<DenseLayer> {
        let w = self.matrix(fan_in, fan_out)?;
        let b = self.take(fan_out)?.to_vec();
        Ok(DenseLayer { w, b })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, LayerShape};
    use crate::trainer::{stream_rng, GateKind};

    fn model(kind: GateKind) -> Model {
        let arch = Architecture {
            n_inputs: 5,
            n_classes: 3,
            layers: vec![
                LayerShape {
                    n_blocks: 2,
                    block_size: 3,
                },
                LayerShape {
                    n_blocks: 4,
                    block_size: 1,
                },
            ],
            activation: Activation::Tanh,
        };
        Model::init(&arch, &kind, &Hyperparams::default(), &mut stream_rng(3, 0)).unwrap()
    }

    fn ckpt(kind: GateKind) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("dataset".into(), "toy".into());
        Checkpoint {
            model: model(kind),
            hyper: Hyperparams::default(),
            seed: 3,
            meta,
        }
    }

    #[test]
    fn roundtrip_every_gate_kind() {
        for kind in [
            GateKind::Condnet,
            GateKind::Bdnn { rate: None },
            GateKind::Dense,
        ] {
            let c = ckpt(kind);
            let bytes = c.to_bytes().unwrap();
            assert_eq!(&bytes[..8], MAGIC);
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = ckpt(GateKind::Condnet).to_bytes().unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad_magic).is_err());
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        let err = Checkpoint::from_bytes(&bad_version)
            .unwrap_err()
            .to_string();
        assert!(err.contains("version 9"), "{err}");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&0f64.to_le_bytes());
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(Checkpoint::from_bytes(&nan).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let c = ckpt(GateKind::Condnet);
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(!path.with_extension("tmp").exists());
    }
}
