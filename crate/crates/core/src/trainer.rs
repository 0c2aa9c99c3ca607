//! Alternating optimization of the assignment distribution (NES) and the
//! layer weights (Adam on Monte-Carlo averaged gradients).
//!
//! Every iteration runs one NES step followed by one SGD step. Each step draws
//! its own batch. Randomness is split into independent streams so that the
//! NES phase never perturbs the weight-update phase:
//!
//! * `nes`: batches and assignment samples of the NES step,
//! * `sgd_batch`: batches of the SGD step,
//! * `sgd_assign`: assignment samples of the SGD step.
//!
//! The baselines run only the SGD step under a fixed assignment, drawing
//! their batches from the same `sgd_batch` stream.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::autodiff::Tape;
use crate::data::{make_batch, Batch, TaskData};
use crate::distribution::{Assignment, JointAssignmentDistribution};
use crate::error::{Error, Result};
use crate::nes::{nes_update, NesConfig};
use crate::sharing::{fixed_assignment, ArchitectureSpec, FixedSharing, WeightBank};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Lws,
    #[serde(alias = "full")]
    FullSharing,
    #[serde(alias = "none")]
    NoSharing,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Lws, Mode::FullSharing, Mode::NoSharing];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Lws => "lws",
            Mode::FullSharing => "full_sharing",
            Mode::NoSharing => "no_sharing",
        }
    }

    pub fn fixed(self) -> Option<FixedSharing> {
        match self {
            Mode::Lws => None,
            Mode::FullSharing => Some(FixedSharing::FullSharing),
            Mode::NoSharing => Some(FixedSharing::NoSharing),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lws" => Ok(Mode::Lws),
            "full" | "full_sharing" => Ok(Mode::FullSharing),
            "none" | "no_sharing" => Ok(Mode::NoSharing),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

fn default_batch() -> usize {
    16
}

fn default_floor() -> f64 {
    0.001
}

fn default_eval_interval() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Assignment samples per SGD step.
    pub lambda_theta: usize,
    /// Assignment samples per NES step.
    pub lambda_pi: usize,
    pub eta_theta: f64,
    pub eta_pi: f64,
    /// Candidate weights per shareable layer.
    pub k: usize,
    #[serde(default = "default_batch")]
    pub batch_per_task: usize,
    pub iterations: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.lambda_theta == 0 {
            return fail("lambda_theta must be at least 1".into());
        }
        if self.mode == Mode::Lws {
            self.nes_config().validate()?;
        }
        if !(self.eta_theta > 0.0) {
            return fail(format!("eta_theta must be positive, got {}", self.eta_theta));
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.batch_per_task == 0 {
            return fail("batch_per_task must be at least 1".into());
        }
        if self.eval_interval == 0 {
            return fail("eval_interval must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.floor) || self.floor * self.k as f64 >= 1.0 {
            return fail(format!("floor {} must lie in [0, 1/k)", self.floor));
        }
        Ok(())
    }

    pub fn nes_config(&self) -> NesConfig {
        NesConfig {
            population: self.lambda_pi,
            learning_rate: self.eta_pi,
            floor: self.floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub nes: ChaCha8Rng,
    pub sgd_batch: ChaCha8Rng,
    pub sgd_assign: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams {
            nes: stream(seed, 1),
            sgd_batch: stream(seed, 2),
            sgd_assign: stream(seed, 3),
        }
    }
}

/// Generator for weight initialization under `seed`.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    stream(seed, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub bank: WeightBank,
    pub dist: JointAssignmentDistribution,
    pub adam: AdamState,
    pub iteration: u64,
    /// Set in the baseline modes, which never sample.
    pub fixed: Option<Assignment>,
    pub rngs: RngStreams,
}

impl TrainState {
    /// Fresh state: He-initialized bank, `π` uniform at `1/K`, zero Adam moments.
    pub fn init(config: &TrainConfig, arch: &ArchitectureSpec, task_classes: &[usize]) -> Result<Self> {
        config.validate()?;
        let bank = WeightBank::build(arch, config.k, task_classes, &mut init_rng(config.seed))?;
        let dist = JointAssignmentDistribution::uniform(bank.num_slots(), config.k)?;
        let fixed = config
            .mode
            .fixed()
            .map(|m| fixed_assignment(m, bank.num_tasks(), bank.num_layers(), config.k))
            .transpose()?;
        let adam = AdamState::new(&bank.store, config.adam);
        Ok(TrainState {
            bank,
            dist,
            adam,
            iteration: 0,
            fixed,
            rngs: RngStreams::new(config.seed),
        })
    }

    /// Assignment used for inference: the fixed one for baselines, otherwise
    /// the most probable one under `π`.
    pub fn inference_assignment(&self) -> Assignment {
        self.fixed.clone().unwrap_or_else(|| self.dist.argmax_assignment())
    }
}

/// Mean over tasks of each task's batch-mean cross-entropy.
pub fn multi_task_loss(bank: &WeightBank, tape: &mut Tape, assignment: &Assignment, batches: &[Batch]) -> Result<crate::autodiff::Var> {
    if batches.len() != bank.num_tasks() {
        return Err(Error::dim("multi_task_loss", &[batches.len()], &[bank.num_tasks()]));
    }
    let mut total = None;
    for (task, batch) in batches.iter().enumerate() {
        let logits = bank.forward_task(tape, task, assignment, &batch.x)?;
        let loss = tape.softmax_cross_entropy_mean(logits, &batch.y)?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    let total = total.expect("at least one task");
    Ok(tape.scale(total, 1.0 / batches.len() as f64))
}

/// Loss value of `assignment` on `batches` without recording gradients.
pub fn assignment_loss(bank: &WeightBank, assignment: &Assignment, batches: &[Batch]) -> Result<f64> {
    let mut tape = Tape::inference();
    let loss = multi_task_loss(bank, &mut tape, assignment, batches)?;
    Ok(tape.value(loss).item())
}

/// Accumulates `(1/λ) Σᵢ ∇θ f(θ, aᵢ)` into the bank's gradients and returns
/// the mean loss. Repeated assignments are evaluated once and weighted by
/// their multiplicity, which leaves the average unchanged.
pub fn accumulate_mean_gradient(bank: &mut WeightBank, assignments: &[Assignment], batches: &[Batch]) -> Result<f64> {
    let mut groups: Vec<(&Assignment, usize)> = Vec::new();
    for a in assignments {
        match groups.iter_mut().find(|(g, _)| *g == a) {
            Some((_, n)) => *n += 1,
            None => groups.push((a, 1)),
        }
    }
    let lambda = assignments.len() as f64;
    let mut mean_loss = 0.0;
    for (a, count) in groups {
        let weight = count as f64 / lambda;
        let mut tape = Tape::new();
        let loss = multi_task_loss(bank, &mut tape, a, batches)?;
        mean_loss += weight * tape.value(loss).item();
        tape.backward_scaled(loss, weight, &mut bank.store)?;
    }
    Ok(mean_loss)
}

/// NES phase: one batch, `λ_π` sampled assignments scored with fixed `θ`,
/// utilities, search gradient, ascent step and floor. Returns the mean
/// sample loss. `θ`, Adam state and the SGD streams are not touched.
pub fn step_nes(state: &mut TrainState, config: &TrainConfig, tasks: &[TaskData]) -> Result<f64> {
    if config.mode != Mode::Lws {
        return Err(Error::Config(format!("NES step requires lws mode, got {:?}", config.mode)));
    }
    let batches = make_batch(tasks, config.batch_per_task, &mut state.rngs.nes)?;
    let assignments: Vec<Assignment> = (0..config.lambda_pi)
        .map(|_| state.dist.sample(&mut state.rngs.nes))
        .collect();
    let bank = &state.bank;
    let samples = nes_update(&mut state.dist, assignments, &config.nes_config(), |a| {
        assignment_loss(bank, a, &batches)
    })?;
    Ok(samples.iter().map(|s| s.loss).sum::<f64>() / samples.len() as f64)
}

/// SGD phase: one batch, `λ_θ` sampled assignments (or the fixed one), mean
/// gradient, one Adam step. Returns the mean loss before the update. `π` is
/// not touched.
pub fn step_sgd(state: &mut TrainState, config: &TrainConfig, tasks: &[TaskData]) -> Result<f64> {
    let batches = make_batch(tasks, config.batch_per_task, &mut state.rngs.sgd_batch)?;
    let assignments: Vec<Assignment> = match &state.fixed {
        Some(a) => vec![a.clone()],
        None => (0..config.lambda_theta)
            .map(|_| state.dist.sample(&mut state.rngs.sgd_assign))
            .collect(),
    };
    state.bank.store.zero_grad();
    let loss = accumulate_mean_gradient(&mut state.bank, &assignments, &batches)?;
    state.adam.step(&mut state.bank.store, config.eta_theta)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_task_error: Vec<f64>,
    pub mean_error: f64,
}

const EVAL_CHUNK: usize = 256;

/// Top-1 test error of every task under `assignment`; `mean_error` is the
/// unweighted mean over tasks.
pub fn evaluate(bank: &WeightBank, assignment: &Assignment, tasks: &[TaskData]) -> Result<Evaluation> {
    let mut per_task_error = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let n = task.test.len();
        if n == 0 {
            return Err(Error::Data(format!("task {} has an empty test set", task.name)));
        }
        let mut wrong = 0usize;
        for start in (0..n).step_by(EVAL_CHUNK) {
            let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let chunk = task.test.select(&rows)?;
            let mut tape = Tape::inference();
            let logits = bank.forward_task(&mut tape, t, assignment, &chunk.x)?;
            let pred = tape.value(logits).argmax_rows()?;
            wrong += pred.iter().zip(&chunk.y).filter(|(p, y)| p != y).count();
        }
        per_task_error.push(wrong as f64 / n as f64);
    }
    let mean_error = per_task_error.iter().sum::<f64>() / per_task_error.len() as f64;
    Ok(Evaluation {
        per_task_error,
        mean_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Nes,
    Sgd,
    Eval,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub phase: Phase,
    pub mean_train_loss: Option<f64>,
    pub mean_test_error: Option<f64>,
    pub pi_entropy: Option<f64>,
    pub effective_params: Option<usize>,
}

/// A run's configuration plus everything needed to continue it bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    /// Writes via a temporary file and rename, so an interrupted save never
    /// clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let json = serde_json::to_vec(self)?;
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub tasks: &'a [TaskData],
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, arch: &ArchitectureSpec, tasks: &'a [TaskData]) -> Result<Self> {
        let classes: Vec<usize> = tasks.iter().map(|t| t.classes).collect();
        let state = TrainState::init(&config, arch, &classes)?;
        Ok(Trainer { config, tasks, state })
    }

    pub fn resume(checkpoint: Checkpoint, tasks: &'a [TaskData]) -> Result<Self> {
        checkpoint.config.validate()?;
        if checkpoint.state.bank.task_classes != tasks.iter().map(|t| t.classes).collect::<Vec<_>>() {
            return Err(Error::Data("checkpoint tasks do not match the datasets".into()));
        }
        Ok(Trainer {
            config: checkpoint.config,
            tasks,
            state: checkpoint.state,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            state: self.state.clone(),
        }
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        evaluate(&self.state.bank, &self.state.inference_assignment(), self.tasks)
    }

    fn eval_row(&self) -> Result<MetricsRow> {
        let a = self.state.inference_assignment();
        let eval = evaluate(&self.state.bank, &a, self.tasks)?;
        Ok(MetricsRow {
            iteration: self.state.iteration,
            phase: Phase::Eval,
            mean_train_loss: None,
            mean_test_error: Some(eval.mean_error),
            pi_entropy: Some(self.state.dist.entropy()),
            effective_params: Some(self.state.bank.count_effective_parameters(&a)?),
        })
    }

    /// One iteration: NES step (LWS only), then SGD step.
    pub fn iterate(&mut self) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::with_capacity(2);
        let next = self.state.iteration + 1;
        if self.config.mode == Mode::Lws {
            let loss = step_nes(&mut self.state, &self.config, self.tasks)?;
            rows.push(MetricsRow {
                iteration: next,
                phase: Phase::Nes,
                mean_train_loss: Some(loss),
                mean_test_error: None,
                pi_entropy: Some(self.state.dist.entropy()),
                effective_params: None,
            });
        }
        let loss = step_sgd(&mut self.state, &self.config, self.tasks)?;
        self.state.iteration = next;
        rows.push(MetricsRow {
            iteration: next,
            phase: Phase::Sgd,
            mean_train_loss: Some(loss),
            mean_test_error: None,
            pi_entropy: None,
            effective_params: None,
        });
        Ok(rows)
    }

    /// Trains until `config.iterations`, handing every metrics row to `sink`.
    /// Evaluates at the start of a fresh run, every `eval_interval`
    /// iterations and at the end; a checkpoint, if requested, is written at
    /// every evaluation.
    pub fn run<F>(&mut self, checkpoint: Option<&Path>, mut sink: F) -> Result<Evaluation>
    where
        F: FnMut(&MetricsRow) -> Result<()>,
    {
        if self.state.iteration == 0 {
            sink(&self.eval_row()?)?;
        }
        while self.state.iteration < self.config.iterations {
            for row in self.iterate()? {
                sink(&row)?;
            }
            let it = self.state.iteration;
            if it.is_multiple_of(self.config.eval_interval) || it == self.config.iterations {
                sink(&self.eval_row()?)?;
                if let Some(path) = checkpoint {
                    self.checkpoint().save(path)?;
                }
            }
        }
        self.evaluate()
    }
}

/// Snapshot of every weight value, for phase-separation checks.
pub fn weight_snapshot(bank: &WeightBank) -> Vec<Tensor> {
    bank.store.iter().map(|p| p.value.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn config(mode: Mode) -> TrainConfig {
        TrainConfig {
            lambda_theta: 4,
            lambda_pi: 4,
            eta_theta: 1e-2,
            eta_pi: 1e-2,
            k: 2,
            batch_per_task: 4,
            iterations: 5,
            seed: 3,
            floor: 0.001,
            mode,
            eval_interval: 2,
            adam: AdamConfig::default(),
        }
    }

    fn tasks() -> Vec<TaskData> {
        (0..2)
            .map(|t| {
                let x = Tensor::new(vec![6, 3], (0..18).map(|i| ((i * (t + 2)) % 7) as f64 / 7.0).collect()).unwrap();
                let split = Split::new(x, vec![0, 1, 2, 0, 1, 2]).unwrap();
                TaskData::new(format!("t{t}"), 3, split.clone(), split).unwrap()
            })
            .collect()
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("full".parse::<Mode>().unwrap(), Mode::FullSharing);
        assert_eq!("none".parse::<Mode>().unwrap(), Mode::NoSharing);
        assert!("x".parse::<Mode>().is_err());
        let m: Mode = serde_json::from_str("\"none\"").unwrap();
        assert_eq!(m, Mode::NoSharing);
    }

    #[test]
    fn config_validation() {
        let mut c = config(Mode::Lws);
        c.lambda_pi = 1;
        assert!(c.validate().is_err());
        c.mode = Mode::FullSharing;
        assert!(c.validate().is_ok());
        c.batch_per_task = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_iterations_leave_uniform_pi() {
        let data = tasks();
        let mut c = config(Mode::Lws);
        c.iterations = 0;
        let mut tr = Trainer::new(c, &ArchitectureSpec::mlp(3, &[4]), &data).unwrap();
        let mut rows = Vec::new();
        tr.run(None, |r| {
            rows.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert!(tr.state.dist.to_probs().iter().flatten().all(|&p| p == 0.5));
    }

    #[test]
    fn nes_rejected_outside_lws() {
        let data = tasks();
        let c = config(Mode::FullSharing);
        let mut tr = Trainer::new(c.clone(), &ArchitectureSpec::mlp(3, &[4]), &data).unwrap();
        assert!(step_nes(&mut tr.state, &c, &data).is_err());
    }

    #[test]
    fn metrics_rows_per_iteration() {
        let data = tasks();
        let mut tr = Trainer::new(config(Mode::Lws), &ArchitectureSpec::mlp(3, &[4]), &data).unwrap();
        let mut rows = Vec::new();
        tr.run(None, |r| {
            rows.push(r.clone());
            Ok(())
        })
        .unwrap();
        // initial eval, 5 × (nes, sgd), evals at 2, 4, 5
        assert_eq!(rows.len(), 1 + 10 + 3);
        assert_eq!(rows.iter().filter(|r| r.phase == Phase::Eval).count(), 4);
        assert_eq!(rows.last().unwrap().iteration, 5);
    }
}
