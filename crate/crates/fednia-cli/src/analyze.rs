//! The `analyze` subcommand: collect final accuracy/ASR values from report
//! files, rank methods per experiment, and emit the Friedman statistic with
//! Nemenyi critical-difference groups (`friedman.json`, `ranks.csv`).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use fednia::eval;
use fednia::{Error, Result};

const EXPECTED_HEADER: [&str; 7] =
    ["method", "dataset", "attack", "delta", "round", "metric", "value"];

/// Experiment identity: dataset, attack, delta (kept as text to avoid float
/// re-formatting mismatches), metric.
type ExperimentKey = (String, String, String, String);

/// Per experiment and method: the value at the highest round seen.
type Cells = BTreeMap<ExperimentKey, BTreeMap<String, (u32, f64)>>;

fn read_report(path: &Path, cells: &mut Cells, methods: &mut BTreeSet<String>) -> Result<()> {
    let analysis = |message: String| {
        Error::Analysis(format!("{}: {message}", path.display()))
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let header = reader
        .headers()
        .map_err(|e| analysis(format!("unreadable header: {e}")))?
        .clone();
    if header.iter().ne(EXPECTED_HEADER) {
        return Err(analysis(format!(
            "unexpected header `{}` (expected `{}`)",
            header.iter().collect::<Vec<_>>().join(","),
            EXPECTED_HEADER.join(",")
        )));
    }
    for record in reader.records() {
        let record = record.map_err(|e| analysis(format!("bad row: {e}")))?;
        let field = |i: usize| record.get(i).unwrap_or("").to_string();
        let metric = field(5);
        if metric != "accuracy" && metric != "asr" {
            continue;
        }
        let round: u32 = field(4)
            .parse()
            .map_err(|_| analysis(format!("bad round `{}`", field(4))))?;
        let value: f64 = field(6)
            .parse()
            .map_err(|_| analysis(format!("bad value `{}`", field(6))))?;
        if !value.is_finite() {
            return Err(analysis(format!("non-finite {metric} value at round {round}")));
        }
        let method = field(0);
        methods.insert(method.clone());
        let key = (field(1), field(2), field(3), metric);
        let slot = cells.entry(key).or_default().entry(method).or_insert((round, value));
        if round >= slot.0 {
            *slot = (round, value);
        }
    }
    Ok(())
}

pub fn analyze(reports: &[PathBuf], alpha: f64, out_dir: Option<&Path>) -> Result<()> {
    let mut cells = Cells::new();
    let mut methods = BTreeSet::new();
    for path in reports {
        read_report(path, &mut cells, &mut methods)?;
    }
    if cells.is_empty() {
        return Err(Error::Analysis(
            "no accuracy or asr rows found in the given reports".into(),
        ));
    }

    // Every experiment must cover every method, or ranks are meaningless.
    let method_list: Vec<String> = methods.into_iter().collect();
    let mut experiments = Vec::with_capacity(cells.len());
    let mut values = Vec::with_capacity(cells.len());
    for ((dataset, attack, delta, metric), per_method) in &cells {
        let mut row = Vec::with_capacity(method_list.len());
        for method in &method_list {
            let (_, value) = per_method.get(method).ok_or_else(|| {
                Error::Analysis(format!(
                    "method `{method}` has no `{metric}` entry for \
                     {dataset}/{attack}/delta={delta}; every method must \
                     cover every experiment"
                ))
            })?;
            // Orient every column so higher is better.
            row.push(if metric == "asr" {
                eval::asr_to_accuracy(*value)
            } else {
                *value
            });
        }
        experiments.push(format!("{dataset}/{attack}/delta={delta}/{metric}"));
        values.push(row);
    }

    let matrix = eval::ResultMatrix::new(method_list, experiments, values)?;
    let result = eval::friedman_test(&matrix, alpha)?;

    let default_dir = reports[0]
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let dir = out_dir.map(Path::to_path_buf).unwrap_or(default_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let friedman_path = dir.join("friedman.json");
    let text = serde_json::to_string_pretty(&result)
        .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
    fs::write(&friedman_path, text).map_err(|e| Error::io(&friedman_path, e))?;

    let ranks_path = dir.join("ranks.csv");
    let mut by_rank: Vec<(&String, f64)> = result
        .methods
        .iter()
        .zip(result.avg_ranks.iter().copied())
        .collect();
    by_rank.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let mut ranks_text = String::from("method,avg_rank\n");
    for (method, rank) in &by_rank {
        ranks_text.push_str(&format!("{method},{rank}\n"));
    }
    fs::write(&ranks_path, ranks_text).map_err(|e| Error::io(&ranks_path, e))?;

    println!(
        "friedman statistic {:.6} over {} experiments x {} methods (alpha {})",
        result.statistic,
        matrix.experiments.len(),
        matrix.methods.len(),
        result.alpha
    );
    println!("critical difference {:.6}", result.critical_difference);
    for (method, rank) in &by_rank {
        println!("  rank {rank:.3}  {method}");
    }
    let groups: Vec<String> = result
        .groups
        .iter()
        .map(|g| format!("[{}]", g.join(", ")))
        .collect();
    println!("indistinguishable groups: {}", groups.join(" "));
    println!("wrote {} and {}", friedman_path.display(), ranks_path.display());
    Ok(())
}
