//! Datasets: in-memory image/label pairs, IDX file I/O, client partitioning
//! and a synthetic benchmark generator.

mod idx;
mod partition;
mod synth;

pub use idx::{load_idx, save_idx};
pub use partition::{partition, partition_indices, PartitionPlan};
pub use synth::{generate as generate_synthetic, SynthSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// A labeled image dataset with every pixel normalized to `[0, 1]`.
///
/// Rows of `samples` are flattened `image_rows x image_cols` images; the
/// geometry is kept so pixel-coordinate transforms (trigger patches) know
/// where the corners are.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Matrix,
    labels: Vec<u32>,
    num_classes: u32,
    image_rows: usize,
    image_cols: usize,
}

impl LabeledDataset {
    /// Build and validate a dataset. Every label must be `< num_classes` and
    /// every pixel finite within `[0, 1]`.
    pub fn new(
        samples: Matrix,
        labels: Vec<u32>,
        num_classes: u32,
        image_rows: usize,
        image_cols: usize,
    ) -> Result<Self> {
        if samples.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} sample rows but {} labels",
                samples.rows(),
                labels.len()
            )));
        }
        if image_rows * image_cols != samples.cols() {
            return Err(Error::Shape(format!(
                "image geometry {image_rows}x{image_cols} does not match {} features",
                samples.cols()
            )));
        }
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        if let Some(bad) = labels.iter().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(bad) = samples
            .data()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(LabeledDataset {
            samples,
            labels,
            num_classes,
            image_rows,
            image_cols,
        })
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn image_rows(&self) -> usize {
        self.image_rows
    }

    pub fn image_cols(&self) -> usize {
        self.image_cols
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature count per sample (`image_rows * image_cols`).
    pub fn feature_count(&self) -> usize {
        self.samples.cols()
    }

    /// Decompose into raw parts (used by transforms that rebuild a modified
    /// copy through [`LabeledDataset::new`], re-running validation).
    pub fn into_parts(self) -> (Matrix, Vec<u32>, u32, usize, usize) {
        (
            self.samples,
            self.labels,
            self.num_classes,
            self.image_rows,
            self.image_cols,
        )
    }

    /// Copy the given rows into a new dataset, preserving class metadata.
    pub fn subset(&self, indices: &[u32]) -> Result<Self> {
        if let Some(bad) = indices.iter().find(|&&i| i as usize >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "subset index {bad} out of range for {} samples",
                self.len()
            )));
        }
        let idx: Vec<usize> = indices.iter().map(|&i| i as usize).collect();
        let samples = self.samples.gather_rows(&idx);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok(LabeledDataset {
            samples,
            labels,
            num_classes: self.num_classes,
            image_rows: self.image_rows,
            image_cols: self.image_cols,
        })
    }

    /// Shuffle the dataset into minibatches of `batch_size` (the last batch
    /// may be short). The order is a pure function of `seed`.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<Vec<(Matrix, Vec<u32>)>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(order
            .chunks(batch_size)
            .map(|chunk| {
                let m = self.samples.gather_rows(chunk);
                let l = chunk.iter().map(|&i| self.labels[i]).collect();
                (m, l)
            })
            .collect())
    }

    /// Count of samples per class, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes as usize];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}
