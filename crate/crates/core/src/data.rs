//! Dataset ingestion: a seeded Gaussian-cluster generator and an IDX
//! binary reader for MNIST-style files.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

// Cluster geometry for the synthetic task: unit per-feature noise around
// class centers drawn at this scale.
const CENTER_SCALE: f64 = 1.0;
const NOISE_SCALE: f64 = 1.0;
// Fraction of examples emitted as duplicated feature vectors carrying two
// different labels. Conflicting twins bound the training cross-entropy
// away from zero no matter how long or how hard the model trains, giving
// the loss curve a floor it can approach but never cross.
const AMBIGUOUS_FRACTION: f64 = 1.0;

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic {
        num_examples: usize,
        input_dim: usize,
        num_classes: usize,
        seed: u64,
    },
    Idx {
        images_path: PathBuf,
        labels_path: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

/// In-memory classification dataset: row-major features plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, input_dim: usize, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || labels.len() * input_dim != features.len() {
            return Err(Error::Dataset(format!(
                "{} feature values do not form {} examples of dim {}",
                features.len(),
                labels.len(),
                input_dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            input_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Gather the given examples into a batch tensor and label vector.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.features[i * self.input_dim..(i + 1) * self.input_dim]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(vec![indices.len(), self.input_dim], data).expect("sized to shape"),
            labels,
        )
    }
}

/// Load a dataset according to `spec`.
pub fn load_dataset(spec: &DataSpec) -> Result<Dataset> {
    match spec {
        DataSpec::Synthetic {
            num_examples,
            input_dim,
            num_classes,
            seed,
        } => synthetic(*num_examples, *input_dim, *num_classes, *seed),
        DataSpec::Idx {
            images_path,
            labels_path,
            limit,
        } => load_idx(images_path, labels_path, *limit),
    }
}

/// Deterministic Gaussian-cluster data: class centers drawn once from the
/// seed, examples assigned round-robin and scattered around their center.
pub fn synthetic(num_examples: usize, input_dim: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if num_examples == 0 || input_dim == 0 || num_classes == 0 {
        return Err(Error::Dataset(
            "synthetic dataset needs positive num_examples, input_dim, num_classes".into(),
        ));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut centers = vec![0.0; num_classes * input_dim];
    for c in centers.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *c = z * CENTER_SCALE;
    }
    let mut features = Vec::with_capacity(num_examples * input_dim);
    let mut labels = Vec::with_capacity(num_examples);
    for i in 0..num_examples {
        let label = i % num_classes;
        labels.push(label);
        let center = &centers[label * input_dim..(label + 1) * input_dim];
        for &c in center {
            let z: f64 = rng.sample(StandardNormal);
            features.push(c + z * NOISE_SCALE);
        }
    }
    // pair up the leading examples as conflicting twins: the second member
    // keeps its own label but takes the first member's features
    if num_classes > 1 {
        let pairs = (num_examples as f64 * AMBIGUOUS_FRACTION / 2.0).floor() as usize;
        for j in 0..pairs {
            let (src, dst) = (2 * j, 2 * j + 1);
            if dst >= num_examples {
                break;
            }
            let (a, b) = features.split_at_mut(dst * input_dim);
            b[..input_dim].copy_from_slice(&a[src * input_dim..(src + 1) * input_dim]);
        }
    }
    Dataset::new(features, labels, input_dim, num_classes)
}

fn read_be_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::IdxFormat(format!("truncated file while reading {what}")))?;
    Ok(u32::from_be_bytes(buf))
}

fn read_exact_bytes(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::IdxFormat(format!("truncated file while reading {what}")))?;
    // exactly n bytes must remain: trailing garbage means a corrupt header
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(buf),
        Ok(_) => Err(Error::IdxFormat(format!("trailing bytes after {what}"))),
        Err(e) => Err(Error::Io(e)),
    }
}

/// Parse the big-endian IDX image/label pair, normalize pixels to [0, 1],
/// and flatten each image to a feature vector.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let mut imgs = BufReader::new(File::open(images_path)?);
    let magic = read_be_u32(&mut imgs, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxFormat(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_be_u32(&mut imgs, "image count")? as usize;
    let rows = read_be_u32(&mut imgs, "image rows")? as usize;
    let cols = read_be_u32(&mut imgs, "image cols")? as usize;
    let pixels = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::IdxFormat("image dimensions overflow".into()))?;
    let img_bytes = read_exact_bytes(&mut imgs, pixels, "image data")?;

    let mut lbls = BufReader::new(File::open(labels_path)?);
    let magic = read_be_u32(&mut lbls, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxFormat(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = read_be_u32(&mut lbls, "label count")? as usize;
    if label_count != count {
        return Err(Error::IdxFormat(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let label_bytes = read_exact_bytes(&mut lbls, label_count, "label data")?;

    let take = limit.unwrap_or(count).min(count);
    if take == 0 || rows * cols == 0 {
        return Err(Error::IdxFormat("empty dataset".into()));
    }
    let dim = rows * cols;
    let features: Vec<f64> = img_bytes[..take * dim]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = label_bytes[..take].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, dim, num_classes)
}
