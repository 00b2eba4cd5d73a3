//! Backbone + head bundle and its on-disk format.
//!
//! Models are stored in a self-describing little-endian binary container so a
//! saved model evaluates bit-identically after reload. Layout (version 1):
//!
//! ```text
//! magic            4 bytes  "CSPJ"
//! version          u32
//! head_kind        u8       0 = capsule, 1 = linear, 2 = group_neuron
//! sigma_mode       u8       0 = exact, 1 = hyper_power (capsule heads)
//! reserved         u16      zero
//! eps              f64      capsule ridge fallback
//! input_dim        u32
//! feature_dim      u32      d
//! num_classes      u32      L
//! capsule_dim      u32      c (group size for group_neuron, 0 for linear)
//! n_layers         u32
//! per layer:       u32 in, u32 out, u8 activation (0 = relu, 1 = identity),
//!                  f64[out*in] weight row-major, f64[out] bias
//! head payload:
//!   capsule        per class: f64[d*c] basis row-major, f64[c*c] sigma
//!   linear         f64[d*L] weight row-major
//!   group_neuron   f64[d*L*c] weight row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::backbone::{Activation, BackboneError, DenseLayer, Mlp};
use crate::capsule::{CapsuleError, CapsuleSubspace, SigmaMode};
use crate::heads::{
    CapsuleHead, GroupNeuronHead, Head, HeadError, HeadKind, HeadOutput, LinearHead,
};
use crate::linalg::{Matrix, Vector};

const MAGIC: [u8; 4] = *b"CSPJ";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("backbone produces {got}-dim features, head expects {expected}")]
    FeatureDim { got: usize, expected: usize },
}

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad model file {path} at byte {offset}: {detail}")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },
    #[error("unsupported model version {0}")]
    UnsupportedVersion(u32),
    #[error("stored model is inconsistent: {0}")]
    Inconsistent(String),
}

/// A trained classifier: feature extractor plus scoring head.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Mlp,
    pub head: Head,
}

impl Model {
    pub fn new(backbone: Mlp, head: Head) -> Result<Self, ModelError> {
        if backbone.output_dim() != head.feature_dim() {
            return Err(ModelError::FeatureDim {
                got: backbone.output_dim(),
                expected: head.feature_dim(),
            });
        }
        Ok(Self { backbone, head })
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Head scores for a raw input.
    pub fn output(&self, input: &Vector) -> Result<HeadOutput, ModelError> {
        let features = self.backbone.features(input)?;
        Ok(self.head.forward(&features)?)
    }

    pub fn predict(&self, input: &Vector) -> Result<usize, ModelError> {
        Ok(self.output(input)?.predicted())
    }

    pub fn loss(&self, input: &Vector, label: usize) -> Result<f64, ModelError> {
        let features = self.backbone.features(input)?;
        Ok(self.head.loss(&features, label)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelIoError> {
        let display = path.display().to_string();
        let file = File::create(path).map_err(|source| ModelIoError::Io {
            path: display.clone(),
            source,
        })?;
        let mut w = Writer {
            inner: BufWriter::new(file),
            path: display,
        };
        w.bytes(&MAGIC)?;
        w.u32(VERSION)?;
        let (kind, sigma_mode, eps, capsule_dim) = match &self.head {
            Head::Capsule(h) => {
                let s = &h.subspaces()[0];
                (0u8, s.sigma_mode(), s.eps(), h.capsule_dim())
            }
            Head::Linear(_) => (1u8, SigmaMode::Exact, 0.0, 0),
            Head::GroupNeuron(h) => (2u8, SigmaMode::Exact, 0.0, h.group_dim()),
        };
        w.u8(kind)?;
        w.u8(match sigma_mode {
            SigmaMode::Exact => 0,
            SigmaMode::HyperPower => 1,
        })?;
        w.u16(0)?;
        w.f64(eps)?;
        w.u32(self.backbone.input_dim() as u32)?;
        w.u32(self.head.feature_dim() as u32)?;
        w.u32(self.head.num_classes() as u32)?;
        w.u32(capsule_dim as u32)?;
        w.u32(self.backbone.layers().len() as u32)?;
        for layer in self.backbone.layers() {
            w.u32(layer.input_dim() as u32)?;
            w.u32(layer.output_dim() as u32)?;
            w.u8(match layer.activation {
                Activation::ReLU => 0,
                Activation::Identity => 1,
            })?;
            w.f64_slice(layer.weight.as_slice())?;
            w.f64_slice(layer.bias.as_slice())?;
        }
        match &self.head {
            Head::Capsule(h) => {
                for s in h.subspaces() {
                    w.f64_slice(s.weight().as_slice())?;
                    w.f64_slice(s.sigma().as_slice())?;
                }
            }
            Head::Linear(h) => w.f64_slice(h.weight().as_slice())?,
            Head::GroupNeuron(h) => w.f64_slice(h.weight().as_slice())?,
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self, ModelIoError> {
        let display = path.display().to_string();
        let file = File::open(path).map_err(|source| ModelIoError::Io {
            path: display.clone(),
            source,
        })?;
        let mut r = Reader {
            inner: BufReader::new(file),
            path: display,
            offset: 0,
        };
        let magic = r.bytes::<4>()?;
        if magic != MAGIC {
            return Err(r.format_err(0, format!("bad magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ModelIoError::UnsupportedVersion(version));
        }
        let kind = r.u8()?;
        let sigma_mode = match r.u8()? {
            0 => SigmaMode::Exact,
            1 => SigmaMode::HyperPower,
            other => return Err(r.format_err(r.offset - 1, format!("bad sigma mode {other}"))),
        };
        r.u16()?;
        let eps = r.f64()?;
        let input_dim = r.u32()? as usize;
        let feature_dim = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let capsule_dim = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(r.format_err(r.offset - 4, format!("implausible layer count {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            let activation = match r.u8()? {
                0 => Activation::ReLU,
                1 => Activation::Identity,
                other => {
                    return Err(r.format_err(r.offset - 1, format!("bad activation {other}")))
                }
            };
            let weight = r.matrix(out_dim, in_dim)?;
            let bias = r.vector(out_dim)?;
            layers.push(DenseLayer {
                weight,
                bias,
                activation,
            });
        }
        let backbone = Mlp::new(layers).map_err(|e| ModelIoError::Inconsistent(e.to_string()))?;
        if backbone.input_dim() != input_dim || backbone.output_dim() != feature_dim {
            return Err(ModelIoError::Inconsistent(format!(
                "layer dims disagree with recorded dims {input_dim} -> {feature_dim}"
            )));
        }
        let head = match kind {
            0 => {
                let mut subspaces = Vec::with_capacity(num_classes);
                for _ in 0..num_classes {
                    let weight = r.matrix(feature_dim, capsule_dim)?;
                    let sigma = r.matrix(capsule_dim, capsule_dim)?;
                    subspaces.push(
                        CapsuleSubspace::from_parts(weight, sigma, sigma_mode, eps)
                            .map_err(|e: CapsuleError| ModelIoError::Inconsistent(e.to_string()))?,
                    );
                }
                Head::Capsule(
                    CapsuleHead::new(subspaces)
                        .map_err(|e| ModelIoError::Inconsistent(e.to_string()))?,
                )
            }
            1 => {
                let weight = r.matrix(feature_dim, num_classes)?;
                Head::Linear(
                    LinearHead::new(weight)
                        .map_err(|e| ModelIoError::Inconsistent(e.to_string()))?,
                )
            }
            2 => {
                let weight = r.matrix(feature_dim, num_classes * capsule_dim)?;
                Head::GroupNeuron(
                    GroupNeuronHead::new(weight, capsule_dim)
                        .map_err(|e| ModelIoError::Inconsistent(e.to_string()))?,
                )
            }
            other => return Err(r.format_err(8, format!("bad head kind {other}"))),
        };
        r.expect_eof()?;
        Model::new(backbone, head).map_err(|e| ModelIoError::Inconsistent(e.to_string()))
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head.kind()
    }
}

struct Writer {
    inner: BufWriter<File>,
    path: String,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) -> Result<(), ModelIoError> {
        self.inner.write_all(b).map_err(|source| ModelIoError::Io {
            path: self.path.clone(),
            source,
        })
    }

    fn u8(&mut self, v: u8) -> Result<(), ModelIoError> {
        self.bytes(&[v])
    }

    fn u16(&mut self, v: u16) -> Result<(), ModelIoError> {
        self.bytes(&v.to_le_bytes())
    }

    fn u32(&mut self, v: u32) -> Result<(), ModelIoError> {
        self.bytes(&v.to_le_bytes())
    }

    fn f64(&mut self, v: f64) -> Result<(), ModelIoError> {
        self.bytes(&v.to_le_bytes())
    }

    fn f64_slice(&mut self, vs: &[f64]) -> Result<(), ModelIoError> {
        for &v in vs {
            self.f64(v)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<(), ModelIoError> {
        self.inner.flush().map_err(|source| ModelIoError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

struct Reader {
    inner: BufReader<File>,
    path: String,
    offset: u64,
}

impl Reader {
    fn format_err(&self, offset: u64, detail: String) -> ModelIoError {
        ModelIoError::Format {
            path: self.path.clone(),
            offset,
            detail,
        }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], ModelIoError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| {
            self.format_err(self.offset, format!("truncated ({e})"))
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8, ModelIoError> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelIoError> {
        Ok(u16::from_le_bytes(self.bytes::<2>()?))
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }

    fn f64(&mut self) -> Result<f64, ModelIoError> {
        Ok(f64::from_le_bytes(self.bytes::<8>()?))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix, ModelIoError> {
        if rows == 0 || cols == 0 || rows.saturating_mul(cols) > 100_000_000 {
            return Err(self.format_err(self.offset, format!("implausible shape {rows}x{cols}")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Matrix::new(rows, cols, data).map_err(|e| ModelIoError::Inconsistent(e.to_string()))
    }

    fn vector(&mut self, dim: usize) -> Result<Vector, ModelIoError> {
        Ok(Vector::from_vec(
            self.matrix(dim, 1)?.as_slice().to_vec(),
        ))
    }

    fn expect_eof(&mut self) -> Result<(), ModelIoError> {
        let mut buf = [0u8; 1];
        match self.inner.read(&mut buf) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.format_err(self.offset, "trailing bytes".into())),
            Err(e) => Err(self.format_err(self.offset, e.to_string())),
        }
    }
}
