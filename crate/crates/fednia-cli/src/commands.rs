//! Implementations of the `run`, `sweep`, `validate`, and `poison-audit`
//! subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fednia::attacks::{self, AttackSpec};
use fednia::config::ExperimentConfig;
use fednia::data;
use fednia::fl::experiment::{run_experiment, ExperimentOutcome, RunOptions};
use fednia::fl::AggregatorSpec;
use fednia::{Error, Result};

use crate::SweepAxis;

/// Load a config, apply the CLI seed override, and return it together with
/// the directory that relative paths resolve against.
fn load_config(path: &Path, seed: Option<u64>) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.federation.seed = seed;
    }
    let base_dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    Ok((cfg, base_dir))
}

/// Where artifacts go: the CLI flag wins, then the config's `output_dir`
/// (resolved against the config file), then `runs/<config-stem><suffix>`.
fn resolve_output_dir(
    cli_output: Option<&Path>,
    cfg: &ExperimentConfig,
    base_dir: &Path,
    config_path: &Path,
    suffix: &str,
) -> PathBuf {
    if let Some(dir) = cli_output {
        return dir.to_path_buf();
    }
    if let Some(dir) = &cfg.output_dir {
        return if dir.is_absolute() {
            dir.clone()
        } else {
            base_dir.join(dir)
        };
    }
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    PathBuf::from("runs").join(format!("{stem}{suffix}"))
}

fn print_outcome(label: &str, outcome: &ExperimentOutcome) {
    let last = outcome.final_record();
    let mut line = format!(
        "{label}: {} rounds, final loss {:.4}",
        outcome.records.len(),
        last.loss
    );
    if let Some(acc) = last.accuracy {
        line.push_str(&format!(", accuracy {acc:.4}"));
    }
    if let Some(t) = last.targeted_accuracy {
        line.push_str(&format!(", targeted accuracy {t:.4}"));
    }
    if let Some(asr) = last.asr {
        line.push_str(&format!(", asr {asr:.4}"));
    }
    if let Some(recall) = outcome.mean_detection_recall() {
        line.push_str(&format!(", mean detection recall {recall:.4}"));
    }
    println!("{line}");
    println!("artifacts: {}", outcome.run_dir.display());
}

pub fn validate(config: &Path, seed: Option<u64>) -> Result<()> {
    let (cfg, _) = load_config(config, seed)?;
    print!("{}", cfg.to_toml()?);
    eprintln!(
        "ok: {} on {} ({} clients, {} malicious, {} rounds)",
        cfg.method_label(),
        cfg.dataset.label(),
        cfg.federation.total_clients(),
        cfg.federation.num_malicious,
        cfg.federation.rounds,
    );
    Ok(())
}

pub fn run(
    config: &Path,
    seed: Option<u64>,
    cli_output: Option<&Path>,
    dry_run: bool,
    dump_profiles: bool,
    quiet: bool,
) -> Result<()> {
    let (cfg, base_dir) = load_config(config, seed)?;
    let run_dir = resolve_output_dir(cli_output, &cfg, &base_dir, config, "");
    if dry_run {
        eprintln!("dry run: would write artifacts to {}", run_dir.display());
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let options = RunOptions {
        dump_profiles,
        progress: !quiet,
    };
    let outcome = run_experiment(&cfg, &base_dir, &run_dir, &options)?;
    print_outcome("run complete", &outcome);
    Ok(())
}

/// One planned sweep run: directory label plus the rewritten config.
struct SweepVariant {
    label: String,
    cfg: ExperimentConfig,
}

/// Split raw `--values` arguments. Numeric axes also split on commas;
/// aggregator values split on commas only when they are not inline tables.
fn expand_values(axis: SweepAxis, raw: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for arg in raw {
        if axis != SweepAxis::Aggregator || !arg.contains('{') {
            out.extend(arg.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()));
        } else {
            out.push(arg.trim().to_string());
        }
    }
    out
}

fn parse_number(axis: &str, raw: &str) -> Result<f64> {
    raw.parse::<f64>().map_err(|_| {
        Error::config(format!("sweep.{axis}"), format!("`{raw}` is not a number"))
    })
}

fn plan_variant(base: &ExperimentConfig, axis: SweepAxis, raw: &str) -> Result<SweepVariant> {
    let mut cfg = base.clone();
    let label = match axis {
        SweepAxis::Delta => {
            let delta = parse_number("delta", raw)?;
            if !(0.0..0.5).contains(&delta) {
                return Err(Error::config(
                    "sweep.delta",
                    format!("delta must be in [0, 0.5), got {delta}"),
                ));
            }
            let total = base.federation.total_clients();
            let r = (delta * f64::from(total)).round() as u32;
            if r == 0 {
                return Err(Error::config(
                    "sweep.delta",
                    format!("delta {delta} rounds to zero malicious clients out of {total}"),
                ));
            }
            cfg.federation.num_malicious = r;
            cfg.federation.num_benign = total - r;
            format!("delta-{raw}")
        }
        SweepAxis::Lambda => {
            let lambda = parse_number("lambda", raw)?;
            let defense = cfg.defense.as_mut().ok_or_else(|| {
                Error::config("sweep.lambda", "the config has no [defense] section to sweep")
            })?;
            defense.lambda = lambda;
            format!("lambda-{raw}")
        }
        SweepAxis::Aggregator => {
            #[derive(Deserialize)]
            struct Wrapper {
                aggregator: AggregatorSpec,
            }
            let text = if raw.starts_with('{') {
                format!("aggregator = {raw}")
            } else {
                format!("aggregator = {{ kind = \"{raw}\" }}")
            };
            let wrapper: Wrapper = toml::from_str(&text).map_err(|e| {
                Error::config("sweep.aggregator", format!("bad value `{raw}`: {e}"))
            })?;
            cfg.aggregator = wrapper.aggregator;
            cfg.aggregator.label().to_string()
        }
    };
    cfg.validate()?;
    Ok(SweepVariant { label, cfg })
}

/// Contents of `sweep.json`, written next to the per-value run directories.
#[derive(Serialize)]
struct SweepSummary {
    axis: String,
    runs: Vec<SweepRun>,
}

#[derive(Serialize)]
struct SweepRun {
    label: String,
    dir: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_asr: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn sweep(
    config: &Path,
    axis: SweepAxis,
    values: &[String],
    seed: Option<u64>,
    cli_output: Option<&Path>,
    dry_run: bool,
    quiet: bool,
) -> Result<()> {
    let (base_cfg, base_dir) = load_config(config, seed)?;
    let values = expand_values(axis, values);
    if values.is_empty() {
        return Err(Error::config("sweep.values", "no axis values given"));
    }
    let axis_name = match axis {
        SweepAxis::Delta => "delta",
        SweepAxis::Lambda => "lambda",
        SweepAxis::Aggregator => "aggregator",
    };

    let mut variants: Vec<SweepVariant> = Vec::with_capacity(values.len());
    for raw in &values {
        let mut variant = plan_variant(&base_cfg, axis, raw)?;
        // Keep directory names unique even if two values share a label.
        let clashes = variants.iter().filter(|v| {
            v.label == variant.label || v.label.starts_with(&format!("{}-", variant.label))
        });
        let n = clashes.count();
        if n > 0 {
            variant.label = format!("{}-{}", variant.label, n + 1);
        }
        variants.push(variant);
    }

    let sweep_dir = resolve_output_dir(cli_output, &base_cfg, &base_dir, config, "-sweep");
    if dry_run {
        eprintln!(
            "dry run: {axis_name} sweep over {} values under {}",
            variants.len(),
            sweep_dir.display()
        );
        for v in &variants {
            eprintln!("  would run {} -> {}", v.label, sweep_dir.join(&v.label).display());
        }
        return Ok(());
    }

    let options = RunOptions {
        dump_profiles: false,
        progress: !quiet,
    };
    let mut summary = SweepSummary {
        axis: axis_name.to_string(),
        runs: Vec::with_capacity(variants.len()),
    };
    let mut reports: Vec<PathBuf> = Vec::with_capacity(variants.len());
    for v in &variants {
        let dir = sweep_dir.join(&v.label);
        let outcome = run_experiment(&v.cfg, &base_dir, &dir, &options)?;
        print_outcome(&v.label, &outcome);
        reports.push(dir.join("report.csv"));
        summary.runs.push(SweepRun {
            label: v.label.clone(),
            dir: dir.display().to_string(),
            final_accuracy: outcome.final_accuracy(),
            final_asr: outcome.final_asr(),
        });
    }

    // Aggregate the per-run reports into one plot-ready file (one header).
    let mut combined = String::new();
    for (i, path) in reports.iter().enumerate() {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let skip = usize::from(i > 0);
        for line in text.lines().skip(skip) {
            combined.push_str(line);
            combined.push('\n');
        }
    }
    let combined_path = sweep_dir.join("report.csv");
    fs::write(&combined_path, combined).map_err(|e| Error::io(&combined_path, e))?;

    let summary_path = sweep_dir.join("sweep.json");
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
    fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
    println!(
        "sweep complete: {} runs, aggregated report at {}",
        summary.runs.len(),
        combined_path.display()
    );
    Ok(())
}

pub fn poison_audit(
    images: &Path,
    labels: &Path,
    attack: &Path,
    save_images: Option<&Path>,
    save_labels: Option<&Path>,
) -> Result<()> {
    let ds = data::load_idx(images, labels)?;
    let text = fs::read_to_string(attack).map_err(|e| Error::io(attack, e))?;
    let spec: AttackSpec = toml::from_str(&text).map_err(|e| Error::Parse {
        path: attack.to_path_buf(),
        message: e.to_string(),
    })?;
    let poisoned = attacks::apply(&ds, &spec)?;
    let summary = attacks::audit(&ds, &poisoned)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?
    );
    if let (Some(img), Some(lbl)) = (save_images, save_labels) {
        data::save_idx(&poisoned, img, lbl)?;
        eprintln!("wrote poisoned dataset to {} / {}", img.display(), lbl.display());
    }
    Ok(())
}
