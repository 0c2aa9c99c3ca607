//! Repeated runs of every training mode on one dataset, with a statistical
//! summary of the final test errors.
//!
//! Layout of an experiment directory:
//!
//! ```text
//! <out>/summary.json
//! <out>/<mode>/seed_<s>/metrics.csv
//! <out>/<mode>/seed_<s>/result.json
//! <out>/<mode>/seed_<s>/checkpoint.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::idx::load_idx;
use crate::data::synthetic::{synthetic_suite, SyntheticSuiteSpec};
use crate::data::TaskData;
use crate::distribution::Assignment;
use crate::error::{Error, Result};
use crate::sharing::{sharing_summary, ArchitectureSpec, SharingSummary};
use crate::stats::{mann_whitney_u, mean, sample_std};
use crate::trainer::{Mode, MetricsRow, Phase, TrainConfig, Trainer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const RESULT_FILE: &str = "result.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// One task stored as four IDX files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdxTask {
    pub name: String,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Idx {
        tasks: Vec<IdxTask>,
        /// Training examples kept per task, drawn without replacement.
        #[serde(default)]
        train_per_task: Option<usize>,
        #[serde(default)]
        subsample_seed: u64,
    },
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSuiteSpec,
        #[serde(default)]
        data_seed: u64,
    },
}

impl DatasetSpec {
    /// Relative IDX paths are taken relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSpec::Idx { tasks, .. } = self {
            for t in tasks {
                for p in [&mut t.train_images, &mut t.train_labels, &mut t.test_images, &mut t.test_labels] {
                    if p.is_relative() {
                        *p = base.join(&*p);
                    }
                }
            }
        }
    }

    pub fn load(&self) -> Result<Vec<TaskData>> {
        match self {
            DatasetSpec::Synthetic { spec, data_seed } => Ok(synthetic_suite(spec, *data_seed)?.tasks),
            DatasetSpec::Idx {
                tasks,
                train_per_task,
                subsample_seed,
            } => {
                if tasks.is_empty() {
                    return Err(Error::Config("dataset lists no tasks".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*subsample_seed);
                tasks
                    .iter()
                    .map(|t| {
                        let (train_x, train_y) = load_idx(&t.train_images, &t.train_labels)?;
                        let (test_x, test_y) = load_idx(&t.test_images, &t.test_labels)?;
                        let mut task = TaskData::from_raw_labels(&t.name, train_x, &train_y, test_x, &test_y)?;
                        if let Some(n) = train_per_task {
                            task.train = task.train.subsample(*n, &mut rng)?;
                        }
                        Ok(task)
                    })
                    .collect()
            }
        }
    }
}

fn default_repeats() -> usize {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub architecture: ArchitectureSpec,
    pub dataset: DatasetSpec,
    /// Runs per mode; run `r` uses seed `train.seed + r`.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Modes run by `compare`; all three when absent.
    #[serde(default)]
    pub modes: Option<Vec<Mode>>,
}

impl ExperimentConfig {
    /// Reads a JSON config; relative dataset paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.dataset.resolve_paths(base);
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if let DatasetSpec::Synthetic { spec, .. } = &self.dataset {
            spec.validate()?;
        }
        self.architecture.validate()?;
        for mode in self.modes() {
            self.train_config(mode, self.train.seed, 1).validate()?;
        }
        Ok(())
    }

    pub fn modes(&self) -> Vec<Mode> {
        self.modes.clone().unwrap_or_else(|| Mode::ALL.to_vec())
    }

    /// Per-run training config. The no-sharing baseline needs one candidate
    /// per task, so it uses `max(K, T)` candidates.
    pub fn train_config(&self, mode: Mode, seed: u64, tasks: usize) -> TrainConfig {
        let mut c = self.train.clone();
        c.mode = mode;
        c.seed = seed;
        if mode == Mode::NoSharing {
            c.k = c.k.max(tasks);
        }
        c
    }
}

pub fn run_dir(out: &Path, mode: Mode, seed: u64) -> PathBuf {
    out.join(mode.name()).join(format!("seed_{seed}"))
}

/// Final outcome of one run, stored as `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub task_names: Vec<String>,
    pub per_task_error: Vec<f64>,
    pub mean_test_error: f64,
    pub assignment: Assignment,
    pub sharing: SharingSummary,
    pub effective_params: usize,
    pub pi_entropy: f64,
}

/// Flat CSV form of [`MetricsRow`]; empty cells for absent values.
#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub phase: Phase,
    pub mean_train_loss: Option<f64>,
    pub mean_test_error: Option<f64>,
    pub pi_entropy: Option<f64>,
    pub effective_params: Option<usize>,
}

impl From<&MetricsRow> for MetricsRecord {
    fn from(r: &MetricsRow) -> Self {
        MetricsRecord {
            iteration: r.iteration,
            phase: r.phase,
            mean_train_loss: r.mean_train_loss,
            mean_test_error: r.mean_test_error,
            pi_entropy: r.pi_entropy,
            effective_params: r.effective_params,
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Trains one run from scratch and writes its directory.
pub fn run_single(
    config: &TrainConfig,
    arch: &ArchitectureSpec,
    tasks: &[TaskData],
    dir: &Path,
) -> Result<RunResult> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut writer = csv::Writer::from_path(&metrics_path)?;
    let mut trainer = Trainer::new(config.clone(), arch, tasks)?;
    let eval = trainer.run(Some(&dir.join(CHECKPOINT_FILE)), |row| {
        writer.serialize(MetricsRecord::from(row))?;
        Ok(())
    })?;
    writer.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let state = &trainer.state;
    let assignment = state.inference_assignment();
    let result = RunResult {
        mode: config.mode,
        seed: config.seed,
        task_names: tasks.iter().map(|t| t.name.clone()).collect(),
        per_task_error: eval.per_task_error,
        mean_test_error: eval.mean_error,
        sharing: sharing_summary(&assignment, state.bank.num_tasks(), state.bank.num_layers())?,
        effective_params: state.bank.count_effective_parameters(&assignment)?,
        pi_entropy: state.dist.entropy(),
        assignment,
    };
    let path = dir.join(RESULT_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&result)?).map_err(|e| Error::io(&path, e))?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub mode: Mode,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub runs: usize,
    pub test_errors: Vec<f64>,
    pub mean_test_error: f64,
    /// Sample standard deviation; 0 with `std_undefined` set for a single run.
    pub std_test_error: f64,
    pub std_undefined: bool,
    /// One-sided Mann-Whitney p-value for this mode's errors being smaller
    /// than the full-sharing errors.
    pub p_vs_full: Option<f64>,
    pub p_vs_none: Option<f64>,
    pub effective_params: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub modes: Vec<ModeSummary>,
    pub failures: Vec<RunFailure>,
}

impl ExperimentSummary {
    pub fn mode(&self, mode: Mode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

/// Aggregates finished runs. Modes without a successful run are omitted.
pub fn summarize(results: &[RunResult], failures: Vec<RunFailure>) -> ExperimentSummary {
    let errors_of = |mode: Mode| -> Vec<f64> {
        results.iter().filter(|r| r.mode == mode).map(|r| r.mean_test_error).collect()
    };
    let full = errors_of(Mode::FullSharing);
    let none = errors_of(Mode::NoSharing);
    let p_against = |mine: &[f64], other: &[f64], same: bool| {
        (!same && !other.is_empty()).then(|| mann_whitney_u(mine, other).p_value)
    };
    let mut modes = Vec::new();
    for mode in Mode::ALL {
        let errors = errors_of(mode);
        if errors.is_empty() {
            continue;
        }
        let params: Vec<f64> = results
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.effective_params as f64)
            .collect();
        let std = sample_std(&errors);
        modes.push(ModeSummary {
            mode,
            runs: errors.len(),
            mean_test_error: mean(&errors),
            std_test_error: std.unwrap_or(0.0),
            std_undefined: std.is_none(),
            p_vs_full: p_against(&errors, &full, mode == Mode::FullSharing),
            p_vs_none: p_against(&errors, &none, mode == Mode::NoSharing),
            effective_params: mean(&params),
            test_errors: errors,
        });
    }
    ExperimentSummary { modes, failures }
}

/// Runs `repeats` seeds of every requested mode into `config.out_dir`. A
/// failing run is recorded and the rest continue; if every run fails the
/// result is [`Error::AllRunsFailed`].
pub fn run_experiment(config: &ExperimentConfig, modes: &[Mode]) -> Result<ExperimentSummary> {
    config.validate()?;
    let tasks = config.dataset.load()?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for &mode in modes {
        for r in 0..config.repeats {
            let seed = config.train.seed + r as u64;
            let train = config.train_config(mode, seed, tasks.len());
            match run_single(&train, &config.architecture, &tasks, &run_dir(out, mode, seed)) {
                Ok(res) => results.push(res),
                Err(e) => failures.push(RunFailure {
                    mode,
                    seed,
                    error: e.to_string(),
                }),
            }
        }
    }
    let summary = summarize(&results, failures);
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    if results.is_empty() {
        let first = summary.failures.first().map(|f| f.error.clone()).unwrap_or_default();
        return Err(Error::AllRunsFailed(first));
    }
    Ok(summary)
}
