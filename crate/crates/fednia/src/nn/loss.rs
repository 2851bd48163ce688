//! Loss functions: softmax cross-entropy for classifiers and the layerwise
//! root-mean-square reconstruction loss used by the anomaly detector.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::activation::Activation;
use crate::nn::network::WeightSet;
use crate::nn::profile::LayerSlice;

/// Probabilities below this are clamped before taking logs so an exactly-zero
/// softmax output cannot produce an infinite loss. Gradients are unaffected:
/// the fused softmax/cross-entropy head gradient never divides by `p`.
const LOG_FLOOR: f64 = 1e-12;

/// Training objective, borrowing its per-batch targets.
#[derive(Debug, Clone)]
pub enum LossFn<'a> {
    /// Mean negative log-likelihood of the labels under a softmax head.
    CrossEntropy { labels: &'a [u32] },
    /// Mean over `groups` of the per-group reconstruction RMSE
    /// `sqrt(||out - target||^2 / group_len)`, averaged over the batch.
    /// Requires an identity head. Outputs not covered by any group do not
    /// contribute.
    LayerwiseRmse {
        targets: &'a Matrix,
        groups: &'a [LayerSlice],
    },
}

impl LossFn<'_> {
    /// Check that this loss is compatible with the network head and batch.
    pub(crate) fn validate(&self, weights: &WeightSet, inputs: &Matrix) -> Result<()> {
        let head = weights.head_activation();
        let out_size = weights.output_size();
        match self {
            LossFn::CrossEntropy { labels } => {
                if head != Activation::Softmax {
                    return Err(Error::InvalidArgument(
                        "cross-entropy requires a softmax output layer".into(),
                    ));
                }
                if labels.len() != inputs.rows() {
                    return Err(Error::Shape(format!(
                        "{} labels for a batch of {} samples",
                        labels.len(),
                        inputs.rows()
                    )));
                }
                if let Some(bad) = labels.iter().find(|&&c| c as usize >= out_size) {
                    return Err(Error::InvalidArgument(format!(
                        "label {bad} out of range for {out_size} output classes"
                    )));
                }
            }
            LossFn::LayerwiseRmse { targets, groups } => {
                if head != Activation::Identity {
                    return Err(Error::InvalidArgument(
                        "layerwise RMSE requires an identity output layer".into(),
                    ));
                }
                if targets.rows() != inputs.rows() || targets.cols() != out_size {
                    return Err(Error::Shape(format!(
                        "targets are {}x{}, expected {}x{out_size}",
                        targets.rows(),
                        targets.cols(),
                        inputs.rows()
                    )));
                }
                if groups.is_empty() {
                    return Err(Error::InvalidArgument(
                        "layerwise RMSE needs at least one group".into(),
                    ));
                }
                let mut cursor = 0usize;
                for g in *groups {
                    if g.len == 0 || g.start < cursor || g.end() > out_size {
                        return Err(Error::InvalidArgument(format!(
                            "group (start {}, len {}) overlaps or exceeds the {out_size} outputs",
                            g.start, g.len
                        )));
                    }
                    cursor = g.end();
                }
            }
        }
        Ok(())
    }

    /// Loss value given the network outputs for the batch.
    pub(crate) fn value(&self, outputs: &Matrix) -> f64 {
        match self {
            LossFn::CrossEntropy { labels } => {
                let mut total = 0.0f64;
                for (row, &label) in outputs.iter_rows().zip(*labels) {
                    total -= clamp_prob(row[label as usize]).ln();
                }
                total / outputs.rows() as f64
            }
            LossFn::LayerwiseRmse { targets, groups } => {
                let mut total = 0.0f64;
                for (row, target) in outputs.iter_rows().zip(targets.iter_rows()) {
                    total += layerwise_rmse_row(row, target, groups);
                }
                total / outputs.rows() as f64
            }
        }
    }

    /// Batch-mean loss and its gradient with respect to the head of the
    /// network: pre-softmax logits for cross-entropy (the fused
    /// `(p - onehot) / batch` form), raw outputs for the identity head.
    pub(crate) fn value_and_head_gradient(&self, outputs: &Matrix) -> (f64, Matrix) {
        let batch = outputs.rows();
        let inv_batch = 1.0 / batch as f32;
        let mut d_head = Matrix::zeros(batch, outputs.cols());
        let mut total = 0.0f64;
        match self {
            LossFn::CrossEntropy { labels } => {
                for b in 0..batch {
                    let probs = outputs.row(b);
                    let label = labels[b] as usize;
                    total -= clamp_prob(probs[label]).ln();
                    let d = d_head.row_mut(b);
                    for (dj, pj) in d.iter_mut().zip(probs) {
                        *dj = pj * inv_batch;
                    }
                    d[label] -= inv_batch;
                }
            }
            LossFn::LayerwiseRmse { targets, groups } => {
                let n_groups = groups.len() as f64;
                for b in 0..batch {
                    let out = outputs.row(b);
                    let target = targets.row(b);
                    let d = d_head.row_mut(b);
                    for g in *groups {
                        let range = g.start..g.end();
                        let mut ss = 0.0f64;
                        for (o, t) in out[range.clone()].iter().zip(&target[range.clone()]) {
                            let r = (*o - *t) as f64;
                            ss += r * r;
                        }
                        let rmse = (ss / g.len as f64).sqrt();
                        total += rmse / n_groups;
                        if rmse > 0.0 {
                            // d/d(out_j) of rmse/n_groups is
                            // residual_j / (n_groups * group_len * rmse).
                            let scale = (1.0 / (n_groups * g.len as f64 * rmse)) as f32
                                * inv_batch;
                            for j in range {
                                d[j] = (out[j] - target[j]) * scale;
                            }
                        }
                    }
                }
            }
        }
        (total / batch as f64, d_head)
    }
}

/// Clamp a probability from below while letting NaN through, so that a
/// diverged forward pass still yields a non-finite loss. A plain `f64::max`
/// would silently map NaN to the floor.
fn clamp_prob(p: f32) -> f64 {
    let p = p as f64;
    if p < LOG_FLOOR {
        LOG_FLOOR
    } else {
        p
    }
}

/// Mean over groups of the per-group RMSE for a single sample.
pub(crate) fn layerwise_rmse_row(out: &[f32], target: &[f32], groups: &[LayerSlice]) -> f64 {
    let mut total = 0.0f64;
    for g in groups {
        let mut ss = 0.0f64;
        for i in g.start..g.end() {
            let r = (out[i] - target[i]) as f64;
            ss += r * r;
        }
        total += (ss / g.len as f64).sqrt();
    }
    total / groups.len() as f64
}
