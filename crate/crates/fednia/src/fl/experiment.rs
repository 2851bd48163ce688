//! End-to-end experiment runner: load data, partition it over clients, run
//! the federated rounds, evaluate on a cadence, and persist every artifact
//! needed to reproduce or analyze the run.
//!
//! A run directory contains:
//! - `config.toml` — the resolved configuration actually executed
//! - `metrics.jsonl` — one [`RoundRecord`] per round (fully deterministic)
//! - `timings.jsonl` — wall-clock time per round (deliberately kept out of
//!   `metrics.jsonl` so that stream is byte-identical across repeat runs)
//! - `partition.json` — client id → sample indices, for audit
//! - `report.csv` — long-format rows (method,dataset,attack,delta,round,
//!   metric,value) ready for plotting or cross-method ranking
//! - `checkpoint.fnwb` — final global weights
//! - `run_meta.json` — version, seed, and the config digest

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{self, AttackKind, AttackSpec};
use crate::config::ExperimentConfig;
use crate::data::{partition_indices, LabeledDataset};
use crate::defense::{DetectorNet, RoundReport};
use crate::error::{Error, Result};
use crate::eval;
use crate::fl::{classifier_specs, run_round, Client};
use crate::nn::{init_weights, save_checkpoint, WeightSet};
use crate::seed::derive_seed;

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Mean cross-entropy of the returned updates on their own local shards.
    pub loss: f64,
    /// Test-set accuracy; present only on evaluation rounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Accuracy restricted to the attacked class, when an attack names one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targeted_accuracy: Option<f64>,
    /// Attack success rate on the triggered test set (backdoor runs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asr: Option<f64>,
    /// Defense telemetry; absent when the run is undefended.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defense: Option<DefenseRecord>,
}

/// Defense telemetry embedded in a [`RoundRecord`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseRecord {
    /// Reconstruction error per client id.
    pub errors: BTreeMap<u32, f64>,
    pub tau: f64,
    pub sigma: f64,
    /// Clients whose updates were aggregated.
    pub survivors: Vec<u32>,
    /// Clients excluded from aggregation this round.
    pub filtered: Vec<u32>,
    /// True when the filter kept everyone because it could not produce a
    /// usable survivor set.
    pub fallback: bool,
    /// Final detector training loss; absent if detector training diverged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector_loss: Option<f64>,
    /// Precision of the rejected set against ground truth (1.0 when nothing
    /// was rejected).
    pub precision: f64,
    /// Recall of the rejected set against ground truth (1.0 when no client
    /// is malicious).
    pub recall: f64,
}

impl DefenseRecord {
    fn from_report(report: &RoundReport) -> Self {
        let quality = eval::detection_quality(report);
        let filtered: Vec<u32> = report
            .errors
            .keys()
            .filter(|id| !report.survivors.contains(id))
            .copied()
            .collect();
        DefenseRecord {
            errors: report.errors.clone(),
            tau: report.tau,
            sigma: report.sigma,
            survivors: report.survivors.iter().copied().collect(),
            filtered,
            fallback: report.fallback,
            detector_loss: Some(report.detector_final_loss)
                .filter(|l| l.is_finite()),
            precision: quality.precision,
            recall: quality.recall,
        }
    }
}

/// One line of `timings.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub round: u32,
    pub wall_ms: f64,
}

/// Contents of `run_meta.json`: enough to identify and reproduce the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub version: String,
    pub seed: u64,
    /// SHA-256 of the `config.toml` written next to this file.
    pub config_sha256: String,
    pub method: String,
    pub dataset: String,
    pub attack: String,
    /// Malicious fraction r / (k + r).
    pub delta: f64,
    pub rounds: u32,
    pub clients: u32,
    pub model_params: usize,
}

/// Knobs that affect persistence/verbosity but never the computed results.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Write raw activation profiles under `profiles/round_NNN/` for each
    /// defended round.
    pub dump_profiles: bool,
    /// Print one progress line per round to stderr.
    pub progress: bool,
}

/// Everything a caller might want to inspect after a run, beyond the files
/// in the run directory.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub final_state: WeightSet,
    pub records: Vec<RoundRecord>,
    /// Raw defense reports per round (`None` entries for undefended runs).
    pub reports: Vec<Option<RoundReport>>,
    /// Wall-clock time per round, in milliseconds.
    pub wall_ms: Vec<f64>,
}

impl ExperimentOutcome {
    /// The last round's record (every run has at least one round).
    pub fn final_record(&self) -> &RoundRecord {
        self.records.last().expect("a run has at least one round")
    }

    /// Test accuracy at the final round, if evaluation ran.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.final_record().accuracy
    }

    /// Attack success rate at the final round, if evaluated.
    pub fn final_asr(&self) -> Option<f64> {
        self.final_record().asr
    }

    /// Mean wall-clock round time in milliseconds.
    pub fn mean_round_wall_ms(&self) -> f64 {
        self.wall_ms.iter().sum::<f64>() / self.wall_ms.len() as f64
    }

    /// Mean detection recall over all defended rounds.
    pub fn mean_detection_recall(&self) -> Option<f64> {
        let recalls: Vec<f64> = self
            .records
            .iter()
            .filter_map(|r| r.defense.as_ref().map(|d| d.recall))
            .collect();
        if recalls.is_empty() {
            None
        } else {
            Some(recalls.iter().sum::<f64>() / recalls.len() as f64)
        }
    }
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    round: u32,
    /// Client id → indices into the training set.
    clients: BTreeMap<u32, Vec<u32>>,
}

#[derive(Debug, Serialize)]
struct PartitionManifest {
    /// True when one partition is reused for every round.
    fixed: bool,
    rounds: Vec<ManifestEntry>,
}

fn manifest_entry(round: u32, indices: &[Vec<u32>]) -> ManifestEntry {
    ManifestEntry {
        round,
        clients: indices
            .iter()
            .enumerate()
            .map(|(id, idx)| (id as u32, idx.clone()))
            .collect(),
    }
}

fn build_clients(
    train: &LabeledDataset,
    indices: &[Vec<u32>],
    assignments: &BTreeMap<u32, AttackSpec>,
) -> Result<Vec<Client>> {
    indices
        .iter()
        .enumerate()
        .map(|(id, idx)| {
            let id = id as u32;
            Ok(Client {
                id,
                data: train.subset(idx)?,
                attack: assignments.get(&id).cloned(),
            })
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Append the long-format rows for one round to the report writer.
fn report_rows(
    w: &mut csv::Writer<File>,
    meta: &RunMeta,
    record: &RoundRecord,
) -> std::result::Result<(), csv::Error> {
    let mut row = |metric: &str, value: f64| {
        w.write_record([
            meta.method.as_str(),
            meta.dataset.as_str(),
            meta.attack.as_str(),
            &meta.delta.to_string(),
            &record.round.to_string(),
            metric,
            &value.to_string(),
        ])
    };
    row("loss", record.loss)?;
    if let Some(v) = record.accuracy {
        row("accuracy", v)?;
    }
    if let Some(v) = record.targeted_accuracy {
        row("targeted_accuracy", v)?;
    }
    if let Some(v) = record.asr {
        row("asr", v)?;
    }
    if let Some(d) = &record.defense {
        row("tau", d.tau)?;
        row("detection_precision", d.precision)?;
        row("detection_recall", d.recall)?;
    }
    Ok(())
}

/// Execute a full experiment and persist its artifacts into `run_dir`.
///
/// Relative dataset paths in `cfg` resolve against `base_dir` (normally the
/// config file's directory). The run directory is created if missing; files
/// inside it are overwritten. Everything except `timings.jsonl` (and the
/// timing-derived fields of the outcome) is a pure function of the config.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    run_dir: &Path,
    options: &RunOptions,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;

    let (train, test) = cfg.load_datasets(base_dir)?;
    let assignments = cfg.malicious_assignments()?;
    let num_classes = train.num_classes().max(test.num_classes()) as usize;
    let specs = classifier_specs(train.feature_count(), &cfg.model.hidden, num_classes);
    let mut state = init_weights(&specs, derive_seed(cfg.seed, "init", &[]))?;

    // Attack-derived evaluation targets: the first attack that names a class
    // drives targeted accuracy; a backdoor spec yields a triggered test set.
    let target_class = cfg
        .attacks
        .iter()
        .find_map(|a| a.spec.target_class.filter(|_| a.spec.kind != AttackKind::Backdoor));
    let backdoor_spec = cfg
        .attacks
        .iter()
        .find(|a| a.spec.kind == AttackKind::Backdoor)
        .map(|a| a.spec.clone());
    let triggered = backdoor_spec
        .as_ref()
        .map(|spec| attacks::make_triggered_testset(&test, spec))
        .transpose()?;

    // Resolved config and its digest go down first, so even a crashed run
    // records what it was trying to do.
    let config_text = cfg.to_toml()?;
    let config_path = run_dir.join("config.toml");
    fs::write(&config_path, &config_text).map_err(|e| Error::io(&config_path, e))?;
    let meta = RunMeta {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config_sha256: format!("{:x}", Sha256::digest(config_text.as_bytes())),
        method: cfg.method_label(),
        dataset: cfg.dataset.label().to_string(),
        attack: cfg.attack_label().to_string(),
        delta: cfg.federation.malicious_fraction(),
        rounds: cfg.federation.rounds,
        clients: cfg.federation.total_clients(),
        model_params: state.param_count(),
    };
    write_json(&run_dir.join("run_meta.json"), &meta)?;

    let metrics_path = run_dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(
        File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?,
    );
    let timings_path = run_dir.join("timings.jsonl");
    let mut timings = BufWriter::new(
        File::create(&timings_path).map_err(|e| Error::io(&timings_path, e))?,
    );
    let report_path = run_dir.join("report.csv");
    let mut report = csv::Writer::from_writer(
        File::create(&report_path).map_err(|e| Error::io(&report_path, e))?,
    );
    report
        .write_record(["method", "dataset", "attack", "delta", "round", "metric", "value"])
        .map_err(|e| Error::io(&report_path, std::io::Error::other(e)))?;

    // Fixed partitions are computed once and shared by reference across
    // rounds; repartitioned runs rebuild the client set per round.
    let mut manifest = PartitionManifest {
        fixed: !cfg.partition.repartition_each_round,
        rounds: Vec::new(),
    };
    let fixed_clients: Option<Vec<Client>> = if cfg.partition.repartition_each_round {
        None
    } else {
        let indices = partition_indices(&train, &cfg.partition_plan(0))?;
        manifest.rounds.push(manifest_entry(0, &indices));
        Some(build_clients(&train, &indices, &assignments)?)
    };

    let rounds = cfg.federation.rounds;
    let mut records: Vec<RoundRecord> = Vec::with_capacity(rounds as usize);
    let mut reports: Vec<Option<RoundReport>> = Vec::with_capacity(rounds as usize);
    let mut wall_ms: Vec<f64> = Vec::with_capacity(rounds as usize);
    let mut detector_warm: Option<DetectorNet> = None;

    for t in 0..rounds {
        let started = Instant::now();
        let per_round_storage;
        let clients: &[Client] = match &fixed_clients {
            Some(c) => c,
            None => {
                let indices = partition_indices(&train, &cfg.partition_plan(t))?;
                manifest.rounds.push(manifest_entry(t, &indices));
                per_round_storage = build_clients(&train, &indices, &assignments)?;
                &per_round_storage
            }
        };

        let dump_dir = options
            .dump_profiles
            .then(|| run_dir.join("profiles").join(format!("round_{t:03}")));
        let outcome = run_round(
            &state,
            clients,
            t,
            &cfg.federation,
            &cfg.aggregator,
            cfg.defense.as_ref(),
            &mut detector_warm,
            dump_dir.as_deref(),
        )?;
        state = outcome.state;

        let evaluate = cfg.eval.cadence > 0
            && ((t + 1) % cfg.eval.cadence == 0 || t + 1 == rounds);
        let mut record = RoundRecord {
            round: t,
            loss: outcome.mean_local_loss,
            accuracy: None,
            targeted_accuracy: None,
            asr: None,
            defense: outcome.report.as_ref().map(DefenseRecord::from_report),
        };
        if evaluate {
            record.accuracy = Some(eval::accuracy(&state, &test)?);
            if let Some(class) = target_class {
                record.targeted_accuracy = Some(eval::targeted_accuracy(&state, &test, class)?);
            }
            if let Some(spec) = &backdoor_spec {
                if let Some(class) = spec.target_class {
                    record.targeted_accuracy =
                        Some(eval::targeted_accuracy(&state, &test, class)?);
                }
            }
            if let Some(triggered) = &triggered {
                record.asr = Some(eval::attack_success_rate(&state, triggered)?);
            }
        }

        let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
        if options.progress {
            let acc = record
                .accuracy
                .map(|a| format!(" acc {a:.4}"))
                .unwrap_or_default();
            eprintln!(
                "round {}/{} loss {:.4}{} ({:.0} ms)",
                t + 1,
                rounds,
                record.loss,
                acc,
                elapsed_ms
            );
        }

        let line = serde_json::to_string(&record)
            .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
        writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        let timing = serde_json::to_string(&TimingRecord {
            round: t,
            wall_ms: elapsed_ms,
        })
        .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
        writeln!(timings, "{timing}").map_err(|e| Error::io(&timings_path, e))?;
        report_rows(&mut report, &meta, &record)
            .map_err(|e| Error::io(&report_path, std::io::Error::other(e)))?;

        records.push(record);
        reports.push(outcome.report);
        wall_ms.push(elapsed_ms);
    }

    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    timings.flush().map_err(|e| Error::io(&timings_path, e))?;
    report
        .flush()
        .map_err(|e| Error::io(&report_path, e))?;
    write_json(&run_dir.join("partition.json"), &manifest)?;
    save_checkpoint(&state, cfg.seed, &run_dir.join("checkpoint.fnwb"))?;

    Ok(ExperimentOutcome {
        run_dir: run_dir.to_path_buf(),
        final_state: state,
        records,
        reports,
        wall_ms,
    })
}
