//! Plot-ready CSVs and a results table from an experiment directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::{read_metrics, RunResult, METRICS_FILE, RESULT_FILE};
use crate::stats::{mean, sample_std};
use crate::trainer::{Mode, Phase};

pub const REPORT_DIR: &str = "report";
pub const SHARING_FILE: &str = "sharing_groups.csv";
pub const TABLE_FILE: &str = "table.txt";

pub fn accuracy_file(mode: Mode) -> String {
    format!("accuracy_{}.csv", mode.name())
}

struct Run {
    result: RunResult,
    /// `(iteration, test error)` of every evaluation row.
    evals: Vec<(u64, f64)>,
}

fn seed_dirs(mode_dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(mode_dir).map_err(|e| Error::io(mode_dir, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(mode_dir, e))?.path();
        let is_seed = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed_"));
        if is_seed && path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn load_runs(run_dir: &Path) -> Result<BTreeMap<usize, (Mode, Vec<Run>)>> {
    let mut found: Vec<(usize, Mode, Vec<PathBuf>)> = Vec::new();
    for (i, mode) in Mode::ALL.into_iter().enumerate() {
        let dir = run_dir.join(mode.name());
        if dir.is_dir() {
            let seeds = seed_dirs(&dir)?;
            if !seeds.is_empty() {
                found.push((i, mode, seeds));
            }
        }
    }
    if found.is_empty() {
        return Err(Error::Report(format!("no runs found under {}", run_dir.display())));
    }
    let missing: Vec<String> = found
        .iter()
        .flat_map(|(_, _, seeds)| seeds)
        .flat_map(|d| [d.join(METRICS_FILE), d.join(RESULT_FILE)])
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Report(format!("missing run files: {}", missing.join(", "))));
    }

    let mut runs = BTreeMap::new();
    for (i, mode, seeds) in found {
        let mut list = Vec::new();
        for dir in seeds {
            let path = dir.join(RESULT_FILE);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let result: RunResult = serde_json::from_str(&text)?;
            let evals = read_metrics(&dir.join(METRICS_FILE))?
                .into_iter()
                .filter(|r| r.phase == Phase::Eval)
                .filter_map(|r| r.mean_test_error.map(|e| (r.iteration, e)))
                .collect();
            list.push(Run { result, evals });
        }
        runs.insert(i, (mode, list));
    }
    Ok(runs)
}

fn accuracy_csv(runs: &[Run]) -> Result<String> {
    let mut by_iter: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for &(it, err) in &run.evals {
            by_iter.entry(it).or_default().push(1.0 - err);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "runs", "mean_test_accuracy", "std_test_accuracy"])?;
    for (it, accs) in by_iter {
        let std = sample_std(&accs).map(|s| s.to_string()).unwrap_or_default();
        w.write_record([it.to_string(), accs.len().to_string(), mean(&accs).to_string(), std])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Percentage of tasks sitting in groups of each size, per layer, pooled over
/// runs. Each layer's percentages sum to 100.
pub fn group_percentages(results: &[&RunResult]) -> Vec<BTreeMap<usize, f64>> {
    let layers = results.first().map_or(0, |r| r.sharing.layers.len());
    (0..layers)
        .map(|l| {
            let mut tasks_in: BTreeMap<usize, usize> = BTreeMap::new();
            let mut total = 0;
            for r in results {
                for (&size, &count) in &r.sharing.layers[l] {
                    *tasks_in.entry(size).or_default() += size * count;
                    total += size * count;
                }
            }
            tasks_in
                .into_iter()
                .map(|(size, n)| (size, 100.0 * n as f64 / total as f64))
                .collect()
        })
        .collect()
}

fn sharing_csv(runs: &BTreeMap<usize, (Mode, Vec<Run>)>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["mode", "layer", "group_size", "percent_of_tasks"])?;
    for (mode, list) in runs.values() {
        let results: Vec<&RunResult> = list.iter().map(|r| &r.result).collect();
        for (l, pct) in group_percentages(&results).into_iter().enumerate() {
            for (size, p) in pct {
                w.write_record([mode.name().to_string(), l.to_string(), size.to_string(), p.to_string()])?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn table(runs: &BTreeMap<usize, (Mode, Vec<Run>)>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<14} {:>5} {:>22} {:>14}", "method", "runs", "test error (%)", "parameters");
    for (mode, list) in runs.values() {
        let errors: Vec<f64> = list.iter().map(|r| 100.0 * r.result.mean_test_error).collect();
        let params: Vec<f64> = list.iter().map(|r| r.result.effective_params as f64).collect();
        let std = sample_std(&errors).map_or("n/a".to_string(), |s| format!("{s:.2}"));
        let _ = writeln!(
            out,
            "{:<14} {:>5} {:>22} {:>14.0}",
            mode.name(),
            errors.len(),
            format!("{:.2} ± {}", mean(&errors), std),
            mean(&params)
        );
    }
    out
}

/// Writes `accuracy_<mode>.csv`, the sharing CSV and the table into
/// `<run_dir>/report/` and returns the written paths. All inputs are read and
/// checked before anything is written.
pub fn emit_reports(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let runs = load_runs(run_dir)?;
    let mut files: Vec<(String, String)> = Vec::new();
    for (mode, list) in runs.values() {
        files.push((accuracy_file(*mode), accuracy_csv(list)?));
    }
    files.push((SHARING_FILE.to_string(), sharing_csv(&runs)?));
    files.push((TABLE_FILE.to_string(), table(&runs)));

    let dir = run_dir.join(REPORT_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
