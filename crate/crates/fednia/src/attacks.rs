//! Data-poisoning transforms applied to a malicious client's local dataset
//! before training.
//!
//! Three families are implemented as pure dataset-to-dataset functions:
//! sample poisoning (additive feature noise, optionally restricted to one
//! class), label flipping (random or via a fixed class map), and backdoor
//! injection (a pixel trigger patch plus a forged label). All of them are
//! deterministic in `(dataset, spec)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

/// Attack family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    /// Additive noise on every sample's features.
    SamplePoisonUntargeted,
    /// Additive noise only on samples of `target_class`.
    SamplePoisonTargeted,
    /// Each label replaced (with probability gamma) by a uniformly chosen
    /// different label.
    LabelFlipUntargeted,
    /// Labels rewritten through `label_map` (with probability gamma).
    LabelFlipTargeted,
    /// Trigger patch plus forged label on every `target_class` sample.
    Backdoor,
}

impl AttackKind {
    /// Stable kebab-case name, matching the config-file spelling.
    pub fn label(&self) -> &'static str {
        match self {
            AttackKind::SamplePoisonUntargeted => "sample-poison-untargeted",
            AttackKind::SamplePoisonTargeted => "sample-poison-targeted",
            AttackKind::LabelFlipUntargeted => "label-flip-untargeted",
            AttackKind::LabelFlipTargeted => "label-flip-targeted",
            AttackKind::Backdoor => "backdoor",
        }
    }
}

/// A solid rectangular pixel patch written into an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerPatch {
    /// Top-left corner of the patch, in pixel coordinates.
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    /// Pixel value written over the patch area.
    pub intensity: f32,
}

impl TriggerPatch {
    /// The canonical 3x3 top-left corner patch at full intensity.
    pub fn corner() -> Self {
        TriggerPatch {
            row: 0,
            col: 0,
            height: 3,
            width: 3,
            intensity: 1.0,
        }
    }

    fn validate(&self, image_rows: usize, image_cols: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument(
                "trigger patch must have positive size".into(),
            ));
        }
        if self.row + self.height > image_rows || self.col + self.width > image_cols {
            return Err(Error::InvalidArgument(format!(
                "trigger patch {}x{} at ({}, {}) exceeds the {image_rows}x{image_cols} image",
                self.height, self.width, self.row, self.col
            )));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::InvalidArgument(format!(
                "trigger intensity {} outside [0, 1]",
                self.intensity
            )));
        }
        Ok(())
    }

    /// Write the patch into one flattened image row.
    fn stamp(&self, pixels: &mut [f32], image_cols: usize) {
        for r in self.row..self.row + self.height {
            for c in self.col..self.col + self.width {
                pixels[r * image_cols + c] = self.intensity;
            }
        }
    }
}

/// Full description of one attack, serializable into run configs.
///
/// `label_map` is stored as `(from, to)` pairs so it round-trips through
/// config files; sources must be unique and never map to themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Probability that an eligible sample is poisoned.
    pub gamma: f64,
    #[serde(default)]
    pub target_class: Option<u32>,
    #[serde(default)]
    pub label_map: Option<Vec<(u32, u32)>>,
    #[serde(default)]
    pub trigger: Option<TriggerPatch>,
    #[serde(default)]
    pub backdoor_label: Option<u32>,
    /// RNG seed; in a federated run this is overwritten per client and round.
    #[serde(default)]
    pub seed: u64,
    /// Half-width of the additive uniform noise for sample poisoning.
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f32,
}

fn default_noise_scale() -> f32 {
    1.0
}

impl AttackSpec {
    /// A copy of this spec with a different RNG seed (used to give each
    /// malicious client an independent noise stream).
    pub fn with_seed(&self, seed: u64) -> Self {
        AttackSpec {
            seed,
            ..self.clone()
        }
    }

    /// Validate internal consistency against a dataset's label space and
    /// image geometry.
    pub fn validate(&self, ds: &LabeledDataset) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "noise_scale {} must be finite and >= 0",
                self.noise_scale
            )));
        }
        let check_class = |label: u32, what: &str| {
            if label >= ds.num_classes() {
                return Err(Error::InvalidArgument(format!(
                    "{what} {label} out of range for {} classes",
                    ds.num_classes()
                )));
            }
            Ok(())
        };
        match self.kind {
            AttackKind::SamplePoisonUntargeted | AttackKind::LabelFlipUntargeted => {}
            AttackKind::SamplePoisonTargeted => {
                let c = self.target_class.ok_or_else(|| {
                    Error::InvalidArgument("targeted sample poisoning needs target_class".into())
                })?;
                check_class(c, "target_class")?;
            }
            AttackKind::LabelFlipTargeted => {
                let map = self.label_map.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("targeted label flipping needs label_map".into())
                })?;
                if map.is_empty() {
                    return Err(Error::InvalidArgument("label_map is empty".into()));
                }
                let mut seen = std::collections::BTreeSet::new();
                for &(from, to) in map {
                    if from == to {
                        return Err(Error::InvalidArgument(format!(
                            "label_map entry {from} -> {to} maps a class to itself"
                        )));
                    }
                    if !seen.insert(from) {
                        return Err(Error::InvalidArgument(format!(
                            "label_map lists source class {from} twice"
                        )));
                    }
                    check_class(from, "label_map source")?;
                    check_class(to, "label_map destination")?;
                }
            }
            AttackKind::Backdoor => {
                let c = self.target_class.ok_or_else(|| {
                    Error::InvalidArgument("backdoor needs target_class".into())
                })?;
                check_class(c, "target_class")?;
                let forged = self.backdoor_label.ok_or_else(|| {
                    Error::InvalidArgument("backdoor needs backdoor_label".into())
                })?;
                check_class(forged, "backdoor_label")?;
                if forged == c {
                    return Err(Error::InvalidArgument(format!(
                        "backdoor_label {forged} must differ from target_class {c}"
                    )));
                }
                let trigger = self.trigger.ok_or_else(|| {
                    Error::InvalidArgument("backdoor needs a trigger patch".into())
                })?;
                trigger.validate(ds.image_rows(), ds.image_cols())?;
            }
        }
        if self.kind == AttackKind::LabelFlipUntargeted && ds.num_classes() < 2 {
            return Err(Error::InvalidArgument(
                "untargeted label flipping needs at least 2 classes".into(),
            ));
        }
        Ok(())
    }
}

/// Apply whichever transform `spec.kind` selects.
pub fn apply(ds: &LabeledDataset, spec: &AttackSpec) -> Result<LabeledDataset> {
    match spec.kind {
        AttackKind::SamplePoisonUntargeted | AttackKind::SamplePoisonTargeted => {
            poison_samples(ds, spec)
        }
        AttackKind::LabelFlipUntargeted | AttackKind::LabelFlipTargeted => flip_labels(ds, spec),
        AttackKind::Backdoor => inject_backdoor(ds, spec),
    }
}

/// Perturb eligible samples (all of them, or only `target_class` rows for
/// the targeted variant) with probability `gamma` by adding uniform noise in
/// `±noise_scale` per pixel, clamped back to `[0, 1]`. Labels are unchanged.
///
/// The RNG is consumed in ascending row order over eligible rows only, so
/// the output is a pure function of `(dataset, spec)`.
pub fn poison_samples(ds: &LabeledDataset, spec: &AttackSpec) -> Result<LabeledDataset> {
    let target = match spec.kind {
        AttackKind::SamplePoisonUntargeted => None,
        AttackKind::SamplePoisonTargeted => spec.target_class,
        _ => {
            return Err(Error::InvalidArgument(
                "poison_samples requires a sample-poisoning spec".into(),
            ))
        }
    };
    spec.validate(ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut samples, labels, num_classes, rows, cols) = ds.clone().into_parts();
    for (i, &label) in labels.iter().enumerate() {
        if target.is_some_and(|c| c != label) {
            continue;
        }
        if !rng.random_bool(spec.gamma) {
            continue;
        }
        if spec.noise_scale > 0.0 {
            for v in samples.row_mut(i) {
                let noise = rng.random_range(-spec.noise_scale..spec.noise_scale);
                *v = (*v + noise).clamp(0.0, 1.0);
            }
        }
    }
    LabeledDataset::new(samples, labels, num_classes, rows, cols)
}

/// Flip labels. Untargeted: with probability `gamma` a label becomes a
/// uniformly drawn *different* class. Targeted: labels in the map's domain
/// are rewritten per the map with probability `gamma`. Samples are unchanged.
pub fn flip_labels(ds: &LabeledDataset, spec: &AttackSpec) -> Result<LabeledDataset> {
    let map: Option<BTreeMap<u32, u32>> = match spec.kind {
        AttackKind::LabelFlipUntargeted => None,
        AttackKind::LabelFlipTargeted => Some(
            spec.label_map
                .as_deref()
                .unwrap_or_default()
                .iter()
                .copied()
                .collect(),
        ),
        _ => {
            return Err(Error::InvalidArgument(
                "flip_labels requires a label-flipping spec".into(),
            ))
        }
    };
    spec.validate(ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (samples, mut labels, num_classes, rows, cols) = ds.clone().into_parts();
    for label in labels.iter_mut() {
        match &map {
            None => {
                if rng.random_bool(spec.gamma) {
                    // Uniform over the other num_classes - 1 labels.
                    let draw = rng.random_range(0..num_classes - 1);
                    *label = if draw >= *label { draw + 1 } else { draw };
                }
            }
            Some(map) => {
                if let Some(&to) = map.get(label) {
                    if rng.random_bool(spec.gamma) {
                        *label = to;
                    }
                }
            }
        }
    }
    LabeledDataset::new(samples, labels, num_classes, rows, cols)
}

/// Stamp the trigger onto every `target_class` sample and forge its label to
/// `backdoor_label`. Other rows are untouched; the sample count is preserved.
/// `gamma` plays no role here — the threat model poisons the entire class.
pub fn inject_backdoor(ds: &LabeledDataset, spec: &AttackSpec) -> Result<LabeledDataset> {
    if spec.kind != AttackKind::Backdoor {
        return Err(Error::InvalidArgument(
            "inject_backdoor requires a backdoor spec".into(),
        ));
    }
    spec.validate(ds)?;
    let target = spec.target_class.expect("validated");
    let forged = spec.backdoor_label.expect("validated");
    let trigger = spec.trigger.expect("validated");
    let (mut samples, mut labels, num_classes, rows, cols) = ds.clone().into_parts();
    for (i, label) in labels.iter_mut().enumerate() {
        if *label == target {
            trigger.stamp(samples.row_mut(i), cols);
            *label = forged;
        }
    }
    LabeledDataset::new(samples, labels, num_classes, rows, cols)
}

/// Build the attack-success testbed: copies of every `target_class` test
/// sample with the trigger applied and the label set to `backdoor_label`
/// (the attacker's expected output, used as ASR ground truth).
pub fn make_triggered_testset(test: &LabeledDataset, spec: &AttackSpec) -> Result<LabeledDataset> {
    if spec.kind != AttackKind::Backdoor {
        return Err(Error::InvalidArgument(
            "make_triggered_testset requires a backdoor spec".into(),
        ));
    }
    spec.validate(test)?;
    let target = spec.target_class.expect("validated");
    let indices: Vec<u32> = test
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == target)
        .map(|(i, _)| i as u32)
        .collect();
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "test set has no samples of class {target}"
        )));
    }
    inject_backdoor(&test.subset(&indices)?, spec)
}

/// Difference summary between a dataset and its poisoned counterpart,
/// emitted by the `poison-audit` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub rows_changed: usize,
    pub labels_changed: usize,
    pub pixels_changed: usize,
    /// Histogram of absolute pixel deltas over changed pixels: 10 bins of
    /// width 0.1 plus a final bin for deltas of exactly 1.0.
    pub pixel_delta_histogram: [u64; 11],
}

/// Compare `original` against `poisoned` row by row.
pub fn audit(original: &LabeledDataset, poisoned: &LabeledDataset) -> Result<AuditSummary> {
    if original.len() != poisoned.len() || original.feature_count() != poisoned.feature_count() {
        return Err(Error::Shape(format!(
            "audit inputs disagree: {}x{} vs {}x{}",
            original.len(),
            original.feature_count(),
            poisoned.len(),
            poisoned.feature_count()
        )));
    }
    let mut summary = AuditSummary {
        rows_changed: 0,
        labels_changed: 0,
        pixels_changed: 0,
        pixel_delta_histogram: [0; 11],
    };
    for i in 0..original.len() {
        let mut row_changed = original.labels()[i] != poisoned.labels()[i];
        if original.labels()[i] != poisoned.labels()[i] {
            summary.labels_changed += 1;
        }
        for (a, b) in original.samples().row(i).iter().zip(poisoned.samples().row(i)) {
            if a != b {
                row_changed = true;
                summary.pixels_changed += 1;
                let delta = (a - b).abs() as f64;
                let bin = ((delta * 10.0).floor() as usize).min(10);
                summary.pixel_delta_histogram[bin] += 1;
            }
        }
        if row_changed {
            summary.rows_changed += 1;
        }
    }
    Ok(summary)
}
