//! Dataset ingestion and synthetic targets.
//!
//! MNIST-style data arrives in IDX files; from the raw tensors this module
//! builds the three experiment variants (binary labels at full resolution,
//! ten classes at 14x14, ten classes at full resolution), each optionally
//! restricted to the first half of the training examples. Pixels are divided
//! by 255 and otherwise untouched, so inputs live in `[0, 1]`.
//!
//! [`oracle`] provides two closed-form targets used to validate the sampling
//! and integration machinery end to end, and [`synthetic`] generates a
//! deterministic ten-class digit-like dataset written as genuine IDX files,
//! for running the full pipeline where the canonical corpus is not available.

pub mod idx;
pub mod oracle;
pub mod synthetic;

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use idx::{encode_idx, parse_idx, IdxTensor};

/// A classification sample: inputs in `[0,1]`, integer labels below `k`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<u8>,
    pub k: usize,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<u8>, k: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows vs {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|y| **y as usize >= k) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        Ok(Self { inputs, labels, k })
    }

    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn d(&self) -> usize {
        self.inputs.ncols()
    }

    /// First `n` examples in file order.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.n() {
            return Err(Error::Domain(format!(
                "cannot take {n} examples from a set of {}",
                self.n()
            )));
        }
        Ok(Dataset {
            inputs: self.inputs.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            k: self.k,
        })
    }
}

/// The three dataset variants, optionally halved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    /// 28x28 inputs, labels mapped `y -> y mod 2`.
    Binary,
    /// 14x14 inputs (2x2 mean pooling), ten classes.
    Mnist14,
    /// 28x28 inputs, ten classes.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetVariant {
    pub kind: VariantKind,
    pub half: bool,
}

impl DatasetVariant {
    pub fn class_count(&self) -> usize {
        match self.kind {
            VariantKind::Binary => 2,
            _ => 10,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            VariantKind::Mnist14 => 196,
            _ => 784,
        }
    }

    /// The experiment architecture paired with each variant.
    pub fn default_architecture(&self) -> Vec<usize> {
        match self.kind {
            VariantKind::Binary => vec![784, 20, 2],
            VariantKind::Mnist14 => vec![196, 128, 128, 10],
            VariantKind::Full => vec![784, 128, 128, 10],
        }
    }
}

/// `y -> y mod 2` on a copy of the labels.
pub fn binarize_labels(labels: &[u8]) -> Vec<u8> {
    labels.iter().map(|y| y % 2).collect()
}

/// Replaces each non-overlapping 2x2 block with its arithmetic mean,
/// turning `n x 28 x 28` images into `n x 14 x 14`.
pub fn downsample_14(images: &Array3<f64>) -> Result<Array3<f64>> {
    let (n, h, w) = images.dim();
    if h != 28 || w != 28 {
        return Err(Error::Shape(format!(
            "downsample_14 expects 28x28 images, got {h}x{w}"
        )));
    }
    let mut out = Array3::zeros((n, 14, 14));
    for i in 0..n {
        for r in 0..14 {
            for c in 0..14 {
                let s = images[(i, 2 * r, 2 * c)]
                    + images[(i, 2 * r, 2 * c + 1)]
                    + images[(i, 2 * r + 1, 2 * c)]
                    + images[(i, 2 * r + 1, 2 * c + 1)];
                out[(i, r, c)] = s / 4.0;
            }
        }
    }
    Ok(out)
}

/// Keeps the first half of the examples in file order.
pub fn half_split(data: &Dataset) -> Result<Dataset> {
    if data.n() % 2 != 0 {
        return Err(Error::Domain(format!(
            "half_split needs an even sample count, got {}",
            data.n()
        )));
    }
    data.take(data.n() / 2)
}

/// Canonical IDX file names.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Reads one image/label IDX pair into normalized images and raw labels.
pub fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<(Array3<f64>, Vec<u8>)> {
    let images = parse_idx(&std::fs::read(images_path)?)?;
    let labels = parse_idx(&std::fs::read(labels_path)?)?;
    let [n, h, w] = images.dims[..] else {
        return Err(Error::Format(format!(
            "{}: expected a 3-dimensional image tensor, got {:?}",
            images_path.display(),
            images.dims
        )));
    };
    if labels.dims.len() != 1 || labels.dims[0] != n {
        return Err(Error::Format(format!(
            "{}: expected {n} labels, got dims {:?}",
            labels_path.display(),
            labels.dims
        )));
    }
    let mut arr = Array3::zeros((n, h, w));
    for (flat, v) in images.data.iter().enumerate() {
        let (i, rem) = (flat / (h * w), flat % (h * w));
        arr[(i, rem / w, rem % w)] = *v as f64 / 255.0;
    }
    Ok((arr, labels.data))
}

/// Applies a variant's transforms to one raw split.
fn apply_variant(
    images: Array3<f64>,
    labels: Vec<u8>,
    variant: DatasetVariant,
    halve: bool,
) -> Result<Dataset> {
    let images = match variant.kind {
        VariantKind::Mnist14 => downsample_14(&images)?,
        _ => images,
    };
    let labels = match variant.kind {
        VariantKind::Binary => binarize_labels(&labels),
        _ => labels,
    };
    let (n, h, w) = images.dim();
    let inputs = images
        .into_shape_with_order((n, h * w))
        .expect("contiguous reshape");
    let data = Dataset::new(inputs, labels, variant.class_count())?;
    if halve {
        half_split(&data)
    } else {
        Ok(data)
    }
}

/// Loads train and test splits from a directory of canonical IDX files and
/// applies the variant transforms (halving affects the train split only).
pub fn load_mnist_dir(dir: &Path, variant: DatasetVariant) -> Result<(Dataset, Dataset)> {
    let (train_images, train_labels) =
        load_idx_pair(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let (test_images, test_labels) = load_idx_pair(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    let train = apply_variant(train_images, train_labels, variant, variant.half)?;
    let test = apply_variant(test_images, test_labels, variant, false)?;
    Ok((train, test))
}
