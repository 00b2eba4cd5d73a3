//! Dataset generation and ingestion.
//!
//! Seeded synthetic multi-class generators (a low-rank task where every class
//! concentrates near its own linear subspace, and an isotropic mean-separated
//! variant), CSV ingestion with a named label column, the IDX binary image
//! format, and stratified train/validation splitting. All generators and
//! splits are pure functions of their seeds.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Matrix, Vector};
use crate::seed::stream_rng;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line} of {path}: {detail}")]
    Csv {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("parse error at byte {offset} of {path}: {detail}")]
    Idx {
        path: String,
        offset: u64,
        detail: String,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// One labeled example.
pub type Sample = (Vector, usize);

fn io_error(path: &str, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_string(),
        source,
    }
}

/// Per-feature normalization statistics, computed from the train split only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Train/validation/test splits with shared dimensionality and label space.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub input_dim: usize,
    pub num_classes: usize,
    pub norm_stats: Option<NormStats>,
}

impl DatasetSplit {
    fn from_train(train: Vec<Sample>, input_dim: usize, num_classes: usize) -> Self {
        Self {
            train,
            validation: Vec::new(),
            test: Vec::new(),
            input_dim,
            num_classes,
            norm_stats: None,
        }
    }

    /// Standardizes every split with per-feature mean/std estimated on the
    /// train split. Features with near-zero spread are left unscaled.
    pub fn normalize(&mut self) -> Result<(), DataError> {
        if self.norm_stats.is_some() {
            return Err(DataError::InvalidInput("dataset already normalized".into()));
        }
        if self.train.is_empty() {
            return Err(DataError::InvalidInput(
                "cannot normalize with an empty train split".into(),
            ));
        }
        let d = self.input_dim;
        let n = self.train.len() as f64;
        let mut mean = vec![0.0; d];
        for (x, _) in &self.train {
            for (m, &v) in mean.iter_mut().zip(x.as_slice()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for (x, _) in &self.train {
            for ((s, &v), &m) in var.iter_mut().zip(x.as_slice()).zip(&mean) {
                let c = v - m;
                *s += c * c;
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|&s| {
                let sd = (s / n).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        for split in [&mut self.train, &mut self.validation, &mut self.test] {
            for (x, _) in split.iter_mut() {
                for ((v, &m), &sd) in x.as_mut_slice().iter_mut().zip(&mean).zip(&std) {
                    *v = (*v - m) / sd;
                }
            }
        }
        self.norm_stats = Some(NormStats { mean, std });
        Ok(())
    }
}

/// Parameters of the low-rank synthetic task. Each class concentrates near
/// its own random rank-`subspace_rank` subspace: samples are basis times
/// standard-normal coefficients plus `spread` times isotropic noise.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub subspace_rank: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 64,
            subspace_rank: 4,
            train_per_class: 500,
            test_per_class: 100,
            spread: 0.3,
        }
    }
}

/// Parameters of the isotropic variant: classes are spherical Gaussians of
/// width `spread` around unit-norm mean directions. Linear heads do well
/// here; there is no low-rank structure to exploit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IsotropicConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
}

impl Default for IsotropicConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 64,
            train_per_class: 500,
            test_per_class: 100,
            spread: 0.3,
        }
    }
}

fn check_counts(num_classes: usize, dim: usize, per_class: usize) -> Result<(), DataError> {
    if num_classes < 2 {
        return Err(DataError::InvalidInput(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if dim < 1 {
        return Err(DataError::InvalidInput("dim must be >= 1".into()));
    }
    if per_class == 0 {
        return Err(DataError::InvalidInput(
            "per-class sample count must be >= 1".into(),
        ));
    }
    Ok(())
}

fn standard_normal_vec<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Orthonormalizes `count` random directions in `dim` dimensions
/// (modified Gram-Schmidt on standard-normal draws).
fn random_orthonormal_columns<R: Rng>(dim: usize, count: usize, rng: &mut R) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = standard_normal_vec(dim, rng);
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(&a, &c)| a * c).sum();
            for (vi, &bi) in v.iter_mut().zip(b) {
                *vi -= proj * bi;
            }
        }
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // essentially-dependent draw; resample
        }
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    let mut m = Matrix::zeros(dim, count);
    for (j, col) in basis.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            m.set(i, j, v);
        }
    }
    m
}

/// Low-rank synthetic task, deterministic per seed.
pub fn synth_blobs(seed: u64, cfg: &SynthConfig) -> Result<DatasetSplit, DataError> {
    check_counts(cfg.num_classes, cfg.dim, cfg.train_per_class)?;
    if cfg.test_per_class == 0 {
        return Err(DataError::InvalidInput(
            "per-class sample count must be >= 1".into(),
        ));
    }
    if cfg.subspace_rank == 0 || cfg.subspace_rank >= cfg.dim {
        return Err(DataError::InvalidInput(format!(
            "subspace rank must satisfy 1 <= rank < dim, got rank={} dim={}",
            cfg.subspace_rank, cfg.dim
        )));
    }
    if !(cfg.spread.is_finite() && cfg.spread >= 0.0) {
        return Err(DataError::InvalidInput("spread must be finite and >= 0".into()));
    }
    let mut rng = stream_rng(seed, "data/blobs");
    let mut train = Vec::with_capacity(cfg.num_classes * cfg.train_per_class);
    let mut test = Vec::with_capacity(cfg.num_classes * cfg.test_per_class);
    for class in 0..cfg.num_classes {
        let basis = random_orthonormal_columns(cfg.dim, cfg.subspace_rank, &mut rng);
        let mut draw = |out: &mut Vec<Sample>| {
            // Standard-normal coefficients, redrawn while their norm is
            // under 0.3: every subspace passes through the origin, so
            // near-zero samples are unclassifiable in principle.
            let coeffs = loop {
                let z = standard_normal_vec(cfg.subspace_rank, &mut rng);
                if z.iter().map(|v| v * v).sum::<f64>().sqrt() >= 0.3 {
                    break Vector::from_vec(z);
                }
            };
            let mut x = basis.matvec(&coeffs).expect("dims agree");
            if cfg.spread > 0.0 {
                let noise = standard_normal_vec(cfg.dim, &mut rng);
                for (xi, ni) in x.as_mut_slice().iter_mut().zip(noise) {
                    *xi += cfg.spread * ni;
                }
            }
            out.push((x, class));
        };
        for _ in 0..cfg.train_per_class {
            draw(&mut train);
        }
        for _ in 0..cfg.test_per_class {
            draw(&mut test);
        }
    }
    let mut split = DatasetSplit::from_train(train, cfg.dim, cfg.num_classes);
    split.test = test;
    Ok(split)
}

/// Isotropic mean-separated task, deterministic per seed.
pub fn synth_isotropic(seed: u64, cfg: &IsotropicConfig) -> Result<DatasetSplit, DataError> {
    check_counts(cfg.num_classes, cfg.dim, cfg.train_per_class)?;
    if cfg.test_per_class == 0 {
        return Err(DataError::InvalidInput(
            "per-class sample count must be >= 1".into(),
        ));
    }
    if !(cfg.spread.is_finite() && cfg.spread >= 0.0) {
        return Err(DataError::InvalidInput("spread must be finite and >= 0".into()));
    }
    let mut rng = stream_rng(seed, "data/isotropic");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..cfg.num_classes {
        let mut mean = standard_normal_vec(cfg.dim, &mut rng);
        let norm: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        mean.iter_mut().for_each(|v| *v /= norm);
        let mut draw = |out: &mut Vec<Sample>| {
            let mut x = mean.clone();
            if cfg.spread > 0.0 {
                for xi in &mut x {
                    let z: f64 = rng.sample(StandardNormal);
                    *xi += cfg.spread * z;
                }
            }
            out.push((Vector::from_vec(x), class));
        };
        for _ in 0..cfg.train_per_class {
            draw(&mut train);
        }
        for _ in 0..cfg.test_per_class {
            draw(&mut test);
        }
    }
    let mut split = DatasetSplit::from_train(train, cfg.dim, cfg.num_classes);
    split.test = test;
    Ok(split)
}

/// Loads a CSV with a header row into the train split. Every column except
/// the named label column becomes a feature, in file order. Labels must be
/// non-negative integers; the class count is the largest label plus one.
pub fn load_csv(path: &Path, label_column: &str) -> Result<DatasetSplit, DataError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| io_error(&display, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DataError::Csv {
        path: display.clone(),
        line: 1,
        detail: "empty file: a header row is required".into(),
    })?;
    let header = header.map_err(|e| io_error(&display, e))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_idx = columns
        .iter()
        .position(|&c| c == label_column)
        .ok_or_else(|| DataError::Csv {
            path: display.clone(),
            line: 1,
            detail: format!("label column {label_column:?} not found in header"),
        })?;
    let dim = columns.len() - 1;
    if dim == 0 {
        return Err(DataError::Csv {
            path: display,
            line: 1,
            detail: "no feature columns besides the label".into(),
        });
    }
    let mut samples = Vec::new();
    let mut max_label = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_error(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(DataError::Csv {
                path: display,
                line: line_no,
                detail: format!("expected {} fields, got {}", columns.len(), fields.len()),
            });
        }
        let label: usize = fields[label_idx].parse().map_err(|_| DataError::Csv {
            path: display.clone(),
            line: line_no,
            detail: format!("label {:?} is not a non-negative integer", fields[label_idx]),
        })?;
        max_label = max_label.max(label);
        let mut features = Vec::with_capacity(dim);
        for (col, &field) in fields.iter().enumerate() {
            if col == label_idx {
                continue;
            }
            let value: f64 = field.parse().map_err(|_| DataError::Csv {
                path: display.clone(),
                line: line_no,
                detail: format!("field {:?} in column {:?} is not numeric", field, columns[col]),
            })?;
            if !value.is_finite() {
                return Err(DataError::Csv {
                    path: display,
                    line: line_no,
                    detail: format!("non-finite value in column {:?}", columns[col]),
                });
            }
            features.push(value);
        }
        samples.push((Vector::from_vec(features), label));
    }
    if samples.is_empty() {
        return Err(DataError::Csv {
            path: display,
            line: 2,
            detail: "no data rows".into(),
        });
    }
    Ok(DatasetSplit::from_train(samples, dim, max_label + 1))
}

/// Writes samples as CSV with header `f0,..,f{d-1},label`. Floats use Rust's
/// shortest round-trip formatting, so a reload reproduces them exactly.
pub fn save_csv(samples: &[Sample], path: &Path) -> Result<(), DataError> {
    let display = path.display().to_string();
    if samples.is_empty() {
        return Err(DataError::InvalidInput("nothing to write".into()));
    }
    let dim = samples[0].0.dim();
    let file = File::create(path).map_err(|e| io_error(&display, e))?;
    let mut w = BufWriter::new(file);
    let header: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
    writeln!(w, "{},label", header.join(",")).map_err(|e| io_error(&display, e))?;
    for (x, label) in samples {
        let fields: Vec<String> = x.as_slice().iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{},{label}", fields.join(",")).map_err(|e| io_error(&display, e))?;
    }
    Ok(())
}

fn read_be_u32(reader: &mut impl Read, offset: &mut u64, path: &str) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|e| DataError::Idx {
        path: path.to_string(),
        offset: *offset,
        detail: format!("truncated while reading u32: {e}"),
    })?;
    *offset += 4;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image/label file pair into the train split.
/// Pixels (unsigned bytes) are scaled to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetSplit, DataError> {
    let img_display = images_path.display().to_string();
    let lbl_display = labels_path.display().to_string();

    let file = File::open(images_path).map_err(|source| DataError::Io {
        path: img_display.clone(),
        source,
    })?;
    let mut reader = BufReader::new(file);
    let mut offset = 0u64;
    let magic = read_be_u32(&mut reader, &mut offset, &img_display)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Idx {
            path: img_display,
            offset: 0,
            detail: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_be_u32(&mut reader, &mut offset, &img_display)? as usize;
    let rows = read_be_u32(&mut reader, &mut offset, &img_display)? as usize;
    let cols = read_be_u32(&mut reader, &mut offset, &img_display)? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Idx {
            path: img_display,
            offset: 4,
            detail: format!("degenerate dimensions {count}x{rows}x{cols}"),
        });
    }
    let dim = rows * cols;
    let mut pixels = vec![0u8; count * dim];
    reader.read_exact(&mut pixels).map_err(|e| DataError::Idx {
        path: img_display.clone(),
        offset,
        detail: format!("truncated pixel payload: {e}"),
    })?;
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing).map_err(|e| DataError::Idx {
        path: img_display.clone(),
        offset,
        detail: e.to_string(),
    })? != 0
    {
        return Err(DataError::Idx {
            path: img_display,
            offset: offset + count as u64 * dim as u64,
            detail: "trailing bytes after pixel payload".into(),
        });
    }

    let file = File::open(labels_path).map_err(|source| DataError::Io {
        path: lbl_display.clone(),
        source,
    })?;
    let mut reader = BufReader::new(file);
    let mut loffset = 0u64;
    let magic = read_be_u32(&mut reader, &mut loffset, &lbl_display)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Idx {
            path: lbl_display,
            offset: 0,
            detail: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let label_count = read_be_u32(&mut reader, &mut loffset, &lbl_display)? as usize;
    if label_count != count {
        return Err(DataError::Idx {
            path: lbl_display,
            offset: 4,
            detail: format!("{label_count} labels for {count} images"),
        });
    }
    let mut labels = vec![0u8; label_count];
    reader.read_exact(&mut labels).map_err(|e| DataError::Idx {
        path: lbl_display.clone(),
        offset: loffset,
        detail: format!("truncated label payload: {e}"),
    })?;

    let samples: Vec<Sample> = pixels
        .chunks(dim)
        .zip(&labels)
        .map(|(chunk, &label)| {
            let x = Vector::from_vec(chunk.iter().map(|&p| f64::from(p) / 255.0).collect());
            (x, label as usize)
        })
        .collect();
    let num_classes = labels.iter().map(|&l| l as usize).max().unwrap_or(0) + 1;
    Ok(DatasetSplit::from_train(samples, dim, num_classes))
}

/// Moves a fraction of the train split into validation with a seeded shuffle,
/// stratified by class whenever every class has at least `1/val_fraction`
/// samples.
pub fn split(data: &DatasetSplit, val_fraction: f64, seed: u64) -> Result<DatasetSplit, DataError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::InvalidInput(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n = data.train.len();
    if n < 2 {
        return Err(DataError::InvalidInput(format!(
            "cannot split {n} training samples"
        )));
    }
    let mut rng = stream_rng(seed, "data/split");
    let mut class_counts = vec![0usize; data.num_classes];
    for (_, label) in &data.train {
        class_counts[*label] += 1;
    }
    let min_needed = (1.0 / val_fraction).ceil() as usize;
    let stratify = class_counts.iter().all(|&c| c >= min_needed);

    let mut val_idx: Vec<usize> = Vec::new();
    if stratify {
        for class in 0..data.num_classes {
            let mut idx: Vec<usize> = data
                .train
                .iter()
                .enumerate()
                .filter(|(_, (_, l))| *l == class)
                .map(|(i, _)| i)
                .collect();
            idx.shuffle(&mut rng);
            let take = ((idx.len() as f64) * val_fraction).floor() as usize;
            val_idx.extend(idx.into_iter().take(take.max(1)));
        }
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let take = ((n as f64) * val_fraction).floor() as usize;
        val_idx.extend(idx.into_iter().take(take.max(1)));
    }
    let in_val: std::collections::HashSet<usize> = val_idx.iter().copied().collect();
    if in_val.len() >= n {
        return Err(DataError::InvalidInput(
            "validation split would consume the whole train set".into(),
        ));
    }
    let mut out = data.clone();
    out.train = Vec::with_capacity(n - in_val.len());
    out.validation = Vec::with_capacity(in_val.len());
    for (i, sample) in data.train.iter().enumerate() {
        if in_val.contains(&i) {
            out.validation.push(sample.clone());
        } else {
            out.train.push(sample.clone());
        }
    }
    Ok(out)
}
