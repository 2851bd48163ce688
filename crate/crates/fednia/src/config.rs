//! Declarative experiment configuration: one TOML file describes the
//! dataset, model, federation shape, attacks, aggregator, optional defense,
//! and evaluation cadence of a run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::data::{self, LabeledDataset, PartitionPlan, SynthSpec};
use crate::defense::DefenseParams;
use crate::error::{Error, Result};
use crate::fl::{AggregatorSpec, FederationConfig};
use crate::seed::derive_seed;

/// Config format version this build reads and writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    /// IDX image/label file pairs (the MNIST container format). Relative
    /// paths are resolved against the config file's directory.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Self-contained generated dataset; see the data module for the layout.
    Synthetic {
        #[serde(default = "DatasetConfig::default_train_samples")]
        train_samples: usize,
        #[serde(default = "DatasetConfig::default_test_samples")]
        test_samples: usize,
        #[serde(default = "DatasetConfig::default_num_classes")]
        num_classes: u32,
        #[serde(default = "DatasetConfig::default_image_side")]
        image_rows: usize,
        #[serde(default = "DatasetConfig::default_image_side")]
        image_cols: usize,
    },
}

impl DatasetConfig {
    fn default_train_samples() -> usize {
        10_000
    }

    fn default_test_samples() -> usize {
        2_000
    }

    fn default_num_classes() -> u32 {
        10
    }

    fn default_image_side() -> usize {
        28
    }

    /// A short name used in report rows.
    pub fn label(&self) -> &'static str {
        match self {
            DatasetConfig::Idx { .. } => "idx",
            DatasetConfig::Synthetic { .. } => "synthetic",
        }
    }
}

/// Classifier architecture: hidden ReLU widths between the data width and
/// the softmax output sized by the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

/// How the training set is split across clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionStrategy {
    UniformRandom,
    LabelSkew,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    #[serde(default = "PartitionConfig::default_strategy")]
    pub strategy: PartitionStrategy,
    /// Only read for `label-skew`.
    #[serde(default = "PartitionConfig::default_classes_per_client")]
    pub classes_per_client: usize,
    /// When set, clients receive a fresh shard every round instead of
    /// keeping their round-0 data.
    #[serde(default)]
    pub repartition_each_round: bool,
}

impl PartitionConfig {
    fn default_strategy() -> PartitionStrategy {
        PartitionStrategy::UniformRandom
    }

    fn default_classes_per_client() -> usize {
        2
    }
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            strategy: Self::default_strategy(),
            classes_per_client: Self::default_classes_per_client(),
            repartition_each_round: false,
        }
    }
}

/// One attack and the clients it is assigned to. When `clients` is omitted
/// the attack claims every malicious slot not named by another entry (the
/// highest client ids); at most one entry may do that.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackAssignment {
    #[serde(flatten)]
    pub spec: AttackSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Evaluate the global model on the test set every `cadence` rounds
    /// (plus always on the final round); 0 disables accuracy evaluation.
    pub cadence: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { cadence: 5 }
    }
}

/// A full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Master seed; every random stream in the run is derived from it.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    pub aggregator: AggregatorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defense: Option<DefenseParams>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attacks: Vec<AttackAssignment>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Parse a TOML config file and validate it.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        // The federation engine derives all client streams from its own seed
        // field; couple it to the master seed here so a config file cannot
        // accidentally decouple the two.
        cfg.federation.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialize back to TOML (the exact text written into run directories).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("config not serializable: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!(
                    "unsupported schema version {} (this build reads {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        self.federation.validate()?;
        self.aggregator.validate()?;
        if let Some(defense) = &self.defense {
            defense.validate()?;
        }
        if let DatasetConfig::Synthetic {
            train_samples,
            test_samples,
            num_classes,
            image_rows,
            image_cols,
        } = self.dataset
        {
            if train_samples == 0 || test_samples == 0 {
                return Err(Error::config(
                    "dataset.train_samples",
                    "synthetic datasets need at least one train and test sample",
                ));
            }
            if num_classes < 2 {
                return Err(Error::config(
                    "dataset.num_classes",
                    "need at least two classes",
                ));
            }
            if image_rows == 0 || image_cols == 0 {
                return Err(Error::config(
                    "dataset.image_rows",
                    "image dimensions must be positive",
                ));
            }
        }
        if self.model.hidden.iter().any(|&w| w == 0) {
            return Err(Error::config(
                "model.hidden",
                "hidden layer widths must be positive",
            ));
        }
        if self.partition.strategy == PartitionStrategy::LabelSkew
            && self.partition.classes_per_client == 0
        {
            return Err(Error::config(
                "partition.classes_per_client",
                "label-skew needs at least one class per client",
            ));
        }
        self.malicious_assignments()?;
        Ok(())
    }

    /// Resolve the attack entries into a per-client map. Checks that ids are
    /// in range, listed at most once, and that exactly `num_malicious`
    /// clients end up with an attack.
    pub fn malicious_assignments(&self) -> Result<BTreeMap<u32, AttackSpec>> {
        let total = self.federation.total_clients();
        let r = self.federation.num_malicious as usize;
        if self.attacks.is_empty() {
            if r != 0 {
                return Err(Error::config(
                    "attacks",
                    format!("{r} malicious clients declared but no attacks configured"),
                ));
            }
            return Ok(BTreeMap::new());
        }
        if r == 0 {
            return Err(Error::config(
                "federation.num_malicious",
                "attacks are configured but num_malicious is 0",
            ));
        }

        let mut assigned: BTreeMap<u32, AttackSpec> = BTreeMap::new();
        let mut wildcard: Option<&AttackAssignment> = None;
        for (i, attack) in self.attacks.iter().enumerate() {
            match &attack.clients {
                Some(ids) => {
                    for &id in ids {
                        if id >= total {
                            return Err(Error::config(
                                format!("attacks[{i}].clients"),
                                format!("client id {id} out of range for {total} clients"),
                            ));
                        }
                        if assigned.insert(id, attack.spec.clone()).is_some() {
                            return Err(Error::config(
                                format!("attacks[{i}].clients"),
                                format!("client {id} is assigned to more than one attack"),
                            ));
                        }
                    }
                }
                None => {
                    if wildcard.is_some() {
                        return Err(Error::config(
                            format!("attacks[{i}].clients"),
                            "only one attack may omit its client list",
                        ));
                    }
                    wildcard = Some(attack);
                }
            }
        }
        if assigned.len() > r {
            return Err(Error::config(
                "attacks",
                format!("{} clients assigned to attacks but num_malicious is {r}", assigned.len()),
            ));
        }
        if let Some(attack) = wildcard {
            // The wildcard claims the highest unassigned ids.
            let mut remaining = r - assigned.len();
            if remaining == 0 {
                return Err(Error::config(
                    "attacks",
                    "an attack without a client list has no malicious slots left",
                ));
            }
            for id in (0..total).rev() {
                if remaining == 0 {
                    break;
                }
                if let std::collections::btree_map::Entry::Vacant(v) = assigned.entry(id) {
                    v.insert(attack.spec.clone());
                    remaining -= 1;
                }
            }
        } else if assigned.len() != r {
            return Err(Error::config(
                "attacks",
                format!(
                    "attacks name {} clients but num_malicious is {r}",
                    assigned.len()
                ),
            ));
        }
        Ok(assigned)
    }

    /// Load or generate the train/test datasets. Relative IDX paths are
    /// resolved against `base_dir` (normally the config file's directory).
    pub fn load_datasets(&self, base_dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
        match &self.dataset {
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let resolve = |p: &PathBuf| {
                    if p.is_absolute() {
                        p.clone()
                    } else {
                        base_dir.join(p)
                    }
                };
                let train = data::load_idx(&resolve(train_images), &resolve(train_labels))?;
                let test = data::load_idx(&resolve(test_images), &resolve(test_labels))?;
                if train.feature_count() != test.feature_count() {
                    return Err(Error::config(
                        "dataset",
                        "train and test sets have different image sizes",
                    ));
                }
                Ok((train, test))
            }
            DatasetConfig::Synthetic {
                train_samples,
                test_samples,
                num_classes,
                image_rows,
                image_cols,
            } => data::generate_synthetic(&SynthSpec {
                train_samples: *train_samples,
                test_samples: *test_samples,
                num_classes: *num_classes,
                image_rows: *image_rows,
                image_cols: *image_cols,
                seed: derive_seed(self.seed, "synth", &[]),
            }),
        }
    }

    /// The partition plan for a given round (the round index only matters
    /// with `repartition_each_round`).
    pub fn partition_plan(&self, round: u32) -> PartitionPlan {
        let index = if self.partition.repartition_each_round {
            u64::from(round)
        } else {
            0
        };
        let seed = derive_seed(self.seed, "partition", &[index]);
        let num_clients = self.federation.total_clients() as usize;
        match self.partition.strategy {
            PartitionStrategy::UniformRandom => PartitionPlan::UniformRandom { num_clients, seed },
            PartitionStrategy::LabelSkew => PartitionPlan::LabelSkew {
                num_clients,
                classes_per_client: self.partition.classes_per_client,
                seed,
            },
        }
    }

    /// Ground-truth malicious ids implied by the attack assignments.
    pub fn malicious_ids(&self) -> Result<BTreeSet<u32>> {
        Ok(self.malicious_assignments()?.keys().copied().collect())
    }

    /// The method name used in reports. It identifies the whole server-side
    /// pipeline: the canonical defended setup (defense + plain averaging) is
    /// `fednia`, a defended run over another rule is `fednia+<rule>`, and an
    /// undefended run is named by its aggregation rule alone.
    pub fn method_label(&self) -> String {
        match (&self.defense, &self.aggregator) {
            (Some(_), AggregatorSpec::FedAvg) => "fednia".to_string(),
            (Some(_), other) => format!("fednia+{}", other.label()),
            (None, other) => other.label().to_string(),
        }
    }

    /// The attack name used in reports: the first configured attack kind, or
    /// `none` for a benign run.
    pub fn attack_label(&self) -> &'static str {
        self.attacks
            .first()
            .map(|a| a.spec.kind.label())
            .unwrap_or("none")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackKind;

    fn minimal_toml() -> &'static str {
        r#"
            schema_version = 1
            seed = 42

            [dataset]
            kind = "synthetic"
            train_samples = 100
            test_samples = 40
            num_classes = 4
            image_rows = 8
            image_cols = 8

            [model]
            hidden = [16]

            [federation]
            num_benign = 4
            num_malicious = 2
            rounds = 3

            [aggregator]
            kind = "fed-avg"

            [[attacks]]
            kind = "label-flip-untargeted"
            gamma = 1.0
        "#
    }

    fn write_config(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn loads_minimal_config_with_defaults() {
        let (_dir, path) = write_config(minimal_toml());
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.federation.seed, 42);
        assert_eq!(cfg.federation.local_epochs, 5);
        assert!((cfg.federation.local_lr - 0.02).abs() < 1e-9);
        assert_eq!(cfg.federation.batch_size, 20);
        assert_eq!(cfg.eval.cadence, 5);
        assert_eq!(cfg.partition.strategy, PartitionStrategy::UniformRandom);
        assert!(cfg.defense.is_none());
        assert_eq!(cfg.aggregator, AggregatorSpec::FedAvg);
        assert_eq!(cfg.attacks.len(), 1);
        assert_eq!(cfg.attacks[0].spec.kind, AttackKind::LabelFlipUntargeted);
    }

    #[test]
    fn config_roundtrip_is_a_fixed_point() {
        let (_dir, path) = write_config(minimal_toml());
        let cfg = ExperimentConfig::load(&path).unwrap();
        let text = cfg.to_toml().unwrap();
        let reparsed: ExperimentConfig = toml::from_str(&text).unwrap();
        let text2 = reparsed.to_toml().unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn wildcard_attack_claims_highest_ids() {
        let (_dir, path) = write_config(minimal_toml());
        let cfg = ExperimentConfig::load(&path).unwrap();
        let ids = cfg.malicious_ids().unwrap();
        // 6 clients total, 2 malicious → the wildcard takes ids 4 and 5.
        assert_eq!(ids, [4u32, 5].into_iter().collect());
    }

    #[test]
    fn explicit_and_wildcard_assignments_combine() {
        let text = minimal_toml().replace(
            "[[attacks]]",
            r#"
            [[attacks]]
            kind = "sample-poison-untargeted"
            gamma = 0.5
            clients = [1]

            [[attacks]]
        "#,
        );
        let text = text.replace("num_malicious = 2", "num_malicious = 3");
        let (_dir, path) = write_config(&text);
        let cfg = ExperimentConfig::load(&path).unwrap();
        let map = cfg.malicious_assignments().unwrap();
        assert_eq!(map.len(), 3);
        // 4 benign + 3 malicious = 7 clients; the wildcard takes the highest
        // unassigned ids, 6 and 5.
        assert_eq!(map[&1].kind, AttackKind::SamplePoisonUntargeted);
        assert_eq!(map[&6].kind, AttackKind::LabelFlipUntargeted);
        assert_eq!(map[&5].kind, AttackKind::LabelFlipUntargeted);
    }

    #[test]
    fn rejects_bad_schema_and_assignment_mistakes() {
        let bad = minimal_toml().replace("schema_version = 1", "schema_version = 9");
        let (_d1, path) = write_config(&bad);
        assert!(matches!(
            ExperimentConfig::load(&path),
            Err(Error::Config { field, .. }) if field == "schema_version"
        ));

        // An out-of-range client id.
        let bad = minimal_toml().replace("gamma = 1.0", "gamma = 1.0\nclients = [9]");
        let (_d2, path) = write_config(&bad);
        assert!(ExperimentConfig::load(&path).is_err());

        // Attacks declared with no malicious slots.
        let bad = minimal_toml().replace("num_malicious = 2", "num_malicious = 0");
        let (_d3, path) = write_config(&bad);
        assert!(ExperimentConfig::load(&path).is_err());

        // Malicious slots without attacks.
        let bad = minimal_toml()
            .replace("[[attacks]]", "[[removed]]")
            .replace("kind = \"label-flip-untargeted\"", "x = 1")
            .replace("gamma = 1.0", "y = 2");
        let (_d4, path) = write_config(&bad);
        assert!(ExperimentConfig::load(&path).is_err());

        // Unparseable TOML reports the path.
        let (_d5, path) = write_config("schema_version = ");
        assert!(matches!(
            ExperimentConfig::load(&path),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn synthetic_dataset_loads_and_partition_plan_derives_seeds() {
        let (_dir, path) = write_config(minimal_toml());
        let cfg = ExperimentConfig::load(&path).unwrap();
        let (train, test) = cfg.load_datasets(path.parent().unwrap()).unwrap();
        assert_eq!(train.len(), 100);
        assert_eq!(test.len(), 40);
        assert_eq!(train.feature_count(), 64);

        let p0 = cfg.partition_plan(0);
        let p1 = cfg.partition_plan(1);
        assert_eq!(p0, p1, "fixed partitions by default");
        let mut repartition = cfg.clone();
        repartition.partition.repartition_each_round = true;
        assert_ne!(repartition.partition_plan(0), repartition.partition_plan(1));
        assert_eq!(p0.num_clients(), 6);
    }

    #[test]
    fn idx_dataset_paths_resolve_against_base_dir() {
        let dir = tempfile::tempdir().unwrap();
        // Build a tiny dataset and save it as IDX files inside the dir.
        let spec = SynthSpec {
            train_samples: 12,
            test_samples: 6,
            num_classes: 3,
            image_rows: 8,
            image_cols: 8,
            seed: 1,
        };
        let (train, test) = data::generate_synthetic(&spec).unwrap();
        data::save_idx(&train, &dir.path().join("train-img"), &dir.path().join("train-lbl"))
            .unwrap();
        data::save_idx(&test, &dir.path().join("test-img"), &dir.path().join("test-lbl"))
            .unwrap();

        let text = r#"
            schema_version = 1
            seed = 7

            [dataset]
            kind = "idx"
            train_images = "train-img"
            train_labels = "train-lbl"
            test_images = "test-img"
            test_labels = "test-lbl"

            [model]
            hidden = []

            [federation]
            num_benign = 2
            rounds = 1

            [aggregator]
            kind = "coordinate-median"
        "#;
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, text).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        let (train2, _) = cfg.load_datasets(dir.path()).unwrap();
        assert_eq!(train2.len(), 12);
        assert_eq!(train2.num_classes(), 3);
    }
}
