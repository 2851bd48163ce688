//! Evaluation metrics (accuracy, targeted accuracy, attack success rate,
//! detection quality) and the Friedman/Nemenyi cross-method ranking.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::defense::RoundReport;
use crate::error::{Error, Result};
use crate::nn::WeightSet;

/// Rows per forward pass when sweeping a test set.
const EVAL_CHUNK: usize = 512;

/// Two-tailed Nemenyi q values at α = 0.05 for 2..=10 compared methods.
const NEMENYI_Q_005: [f64; 9] = [
    1.959964, 2.343701, 2.569032, 2.727774, 2.849705, 2.948319, 3.030879, 3.101730, 3.163684,
];

/// One evaluated round, as recorded by the experiment runner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub round: u32,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targeted_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection_recall: Option<f64>,
    /// Wall-clock round time. Kept out of the deterministic metrics stream
    /// by the runner (it lands in `timings.jsonl`).
    #[serde(skip)]
    pub wall_ms: f64,
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0usize;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best as u32
}

/// Predicted class per row, evaluated in fixed-size chunks.
pub fn predictions(w: &WeightSet, data: &LabeledDataset) -> Result<Vec<u32>> {
    let samples = data.samples();
    let mut out = Vec::with_capacity(samples.rows());
    let mut start = 0usize;
    while start < samples.rows() {
        let end = (start + EVAL_CHUNK).min(samples.rows());
        let chunk = samples.gather_rows(&(start..end).collect::<Vec<usize>>());
        let probs = w.predict(&chunk)?;
        out.extend(probs.iter_rows().map(argmax));
        start = end;
    }
    Ok(out)
}

/// Fraction of argmax-correct predictions on `test`.
pub fn accuracy(w: &WeightSet, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate accuracy on an empty dataset".into(),
        ));
    }
    let predicted = predictions(w, test)?;
    let correct = predicted
        .iter()
        .zip(test.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Accuracy restricted to the rows whose true label is `class`.
pub fn targeted_accuracy(w: &WeightSet, test: &LabeledDataset, class: u32) -> Result<f64> {
    let indices: Vec<u32> = test
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class)
        .map(|(i, _)| i as u32)
        .collect();
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "test set has no samples of class {class}"
        )));
    }
    accuracy(w, &test.subset(&indices)?)
}

/// Fraction of a triggered test set classified as the attacker's label.
///
/// The triggered set carries the backdoor label on every row (that is what
/// the attacker wants the model to say), so this is exactly its accuracy.
pub fn attack_success_rate(w: &WeightSet, triggered_test: &LabeledDataset) -> Result<f64> {
    if triggered_test.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate ASR on an empty dataset".into(),
        ));
    }
    accuracy(w, triggered_test)
}

/// The overall-results convention: ASR column entries are reported as
/// `1 - ASR` so that higher is better for every column. Involutive.
pub fn asr_to_accuracy(asr: f64) -> f64 {
    1.0 - asr
}

/// Precision/recall of a round's rejected set against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionQuality {
    pub precision: f64,
    pub recall: f64,
    /// Nothing was rejected: precision is undefined and reported as 1.0 by
    /// convention, with this flag set so downstream tooling can tell.
    pub empty_rejection: bool,
}

/// Score the filter decision recorded in `report`. The rejected set is every
/// scored client not in the survivor set.
pub fn detection_quality(report: &RoundReport) -> DetectionQuality {
    let rejected: Vec<u32> = report
        .errors
        .keys()
        .filter(|id| !report.survivors.contains(id))
        .copied()
        .collect();
    let malicious = &report.ground_truth_malicious;
    let true_positives = rejected.iter().filter(|id| malicious.contains(id)).count() as f64;
    let precision = if rejected.is_empty() {
        1.0
    } else {
        true_positives / rejected.len() as f64
    };
    let recall = if malicious.is_empty() {
        1.0
    } else {
        true_positives / malicious.len() as f64
    };
    DetectionQuality {
        precision,
        recall,
        empty_rejection: rejected.is_empty(),
    }
}

/// Final scores arranged as experiments × methods, all entries oriented so
/// that higher is better (ASR entries converted via [`asr_to_accuracy`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultMatrix {
    pub methods: Vec<String>,
    pub experiments: Vec<String>,
    /// `values[row][col]` is the score of method `col` on experiment `row`.
    pub values: Vec<Vec<f64>>,
}

impl ResultMatrix {
    pub fn new(methods: Vec<String>, experiments: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != experiments.len() {
            return Err(Error::Analysis(format!(
                "{} value rows for {} experiments",
                values.len(),
                experiments.len()
            )));
        }
        if let Some(row) = values.iter().find(|r| r.len() != methods.len()) {
            return Err(Error::Analysis(format!(
                "ragged result matrix: a row has {} entries for {} methods",
                row.len(),
                methods.len()
            )));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Analysis("result matrix contains non-finite entries".into()));
        }
        Ok(ResultMatrix {
            methods,
            experiments,
            values,
        })
    }
}

/// Output of [`friedman_test`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub statistic: f64,
    pub alpha: f64,
    pub critical_difference: f64,
    /// Methods in matrix column order.
    pub methods: Vec<String>,
    /// Average rank per method, aligned with `methods` (rank 1 = best).
    pub avg_ranks: Vec<f64>,
    /// Maximal sets of methods whose average ranks all lie within one
    /// critical difference, each sorted best-first.
    pub groups: Vec<Vec<String>>,
}

/// Average ranks for one row, higher value = better = rank 1; ties share the
/// average of the positions they straddle.
fn row_ranks(row: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    let mut ranks = vec![0.0f64; row.len()];
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && row[order[j + 1]] == row[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the mean of ranks i+1..=j+1.
        let shared = (i + j + 2) as f64 / 2.0;
        for &col in &order[i..=j] {
            ranks[col] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// The Friedman test with Nemenyi critical differences at α = 0.05.
///
/// Ranks are computed per experiment row (rank 1 = highest score, ties
/// averaged); the statistic is
/// `χ²_F = 12N/(κ(κ+1)) · [Σ R̄_j² − κ(κ+1)²/4]`
/// over κ methods and N experiments, and the critical difference is
/// `CD = q_α · sqrt(κ(κ+1)/(6N))` with the tabulated two-tailed q.
pub fn friedman_test(m: &ResultMatrix, alpha: f64) -> Result<FriedmanResult> {
    let kappa = m.methods.len();
    let n = m.values.len();
    if kappa < 2 || n < 2 {
        return Err(Error::Analysis(format!(
            "friedman test needs at least 2 methods and 2 experiments, got {kappa} and {n}"
        )));
    }
    if (alpha - 0.05).abs() > 1e-12 {
        return Err(Error::Analysis(
            "only alpha = 0.05 is tabulated for the critical difference".into(),
        ));
    }
    if kappa > NEMENYI_Q_005.len() + 1 {
        return Err(Error::Analysis(format!(
            "critical-difference table covers up to {} methods, got {kappa}",
            NEMENYI_Q_005.len() + 1
        )));
    }

    let mut rank_sums = vec![0.0f64; kappa];
    for row in &m.values {
        for (sum, rank) in rank_sums.iter_mut().zip(row_ranks(row)) {
            *sum += rank;
        }
    }
    let avg_ranks: Vec<f64> = rank_sums.iter().map(|s| s / n as f64).collect();

    let k = kappa as f64;
    let sum_sq: f64 = avg_ranks.iter().map(|r| r * r).sum();
    let statistic = 12.0 * n as f64 / (k * (k + 1.0)) * (sum_sq - k * (k + 1.0) * (k + 1.0) / 4.0);
    let q = NEMENYI_Q_005[kappa - 2];
    let critical_difference = q * (k * (k + 1.0) / (6.0 * n as f64)).sqrt();

    // Maximal windows of rank-sorted methods spanning less than one CD.
    let mut by_rank: Vec<usize> = (0..kappa).collect();
    by_rank.sort_by(|&a, &b| avg_ranks[a].total_cmp(&avg_ranks[b]).then(a.cmp(&b)));
    let mut groups: Vec<Vec<String>> = Vec::new();
    let mut last_end = 0usize; // one past the end of the last kept window
    for i in 0..kappa {
        let mut j = i;
        while j + 1 < kappa && avg_ranks[by_rank[j + 1]] - avg_ranks[by_rank[i]] < critical_difference
        {
            j += 1;
        }
        if j + 1 > last_end {
            groups.push(by_rank[i..=j].iter().map(|&c| m.methods[c].clone()).collect());
            last_end = j + 1;
        }
    }

    Ok(FriedmanResult {
        statistic,
        alpha,
        critical_difference,
        methods: m.methods.clone(),
        avg_ranks,
        groups,
    })
}
