//! Synthetic multi-task suites labelled by frozen random teacher networks.
//! Tasks in the same teacher group are labelled by the very same teacher, so
//! features learned for one transfer to the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Split, TaskData};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSuiteSpec {
    /// Teacher group of every task; tasks with equal ids share a teacher.
    pub teacher_groups: Vec<usize>,
    pub input_dim: usize,
    pub classes: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub teacher_hidden: usize,
    #[serde(default)]
    pub label_noise: f64,
}

impl SyntheticSuiteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.teacher_groups.is_empty() {
            return Err(Error::Config("synthetic suite needs at least one task".into()));
        }
        if self.input_dim == 0 || self.teacher_hidden == 0 {
            return Err(Error::Config("synthetic dimensions must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("synthetic tasks need at least 2 classes".into()));
        }
        if self.train_per_task == 0 || self.test_per_task == 0 {
            return Err(Error::Config("synthetic splits must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!("label noise {} outside [0, 1]", self.label_noise)));
        }
        Ok(())
    }
}

/// `argmax(tanh(x·W₁ + b₁)·W₂ + b₂)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    w1: Tensor,
    b1: Vec<f64>,
    w2: Tensor,
    b2: Vec<f64>,
}

impl Teacher {
    fn random<R: Rng + ?Sized>(input_dim: usize, hidden: usize, classes: usize, rng: &mut R) -> Result<Self> {
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
        };
        let w1 = Tensor::new(
            vec![input_dim, hidden],
            draw(input_dim * hidden, (3.0 / input_dim as f64).sqrt()),
        )?;
        let b1 = draw(hidden, 0.5);
        let w2 = Tensor::new(vec![hidden, classes], draw(hidden * classes, (3.0 / hidden as f64).sqrt()))?;
        let mut teacher = Teacher {
            w1,
            b1,
            w2,
            b2: vec![0.0; classes],
        };
        // center each class logit over a probe sample so classes are roughly balanced
        let probe = random_inputs(2000, input_dim, rng)?;
        let logits = teacher.logits(&probe)?;
        for c in 0..classes {
            let mean = logits.data().iter().skip(c).step_by(classes).sum::<f64>() / 2000.0;
            teacher.b2[c] = -mean;
        }
        Ok(teacher)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.matmul(&self.w1)?;
        let hidden = self.b1.len();
        for row in h.data_mut().chunks_mut(hidden) {
            for (v, b) in row.iter_mut().zip(&self.b1) {
                *v = (*v + b).tanh();
            }
        }
        let mut out = h.matmul(&self.w2)?;
        let classes = self.b2.len();
        for row in out.data_mut().chunks_mut(classes) {
            for (v, b) in row.iter_mut().zip(&self.b2) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.logits(x)?.argmax_rows()
    }
}

fn random_inputs<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Result<Tensor> {
    Tensor::new(vec![n, dim], (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSuite {
    pub tasks: Vec<TaskData>,
    /// Indexed by teacher group id.
    pub teachers: Vec<Teacher>,
}

/// Generates the suite deterministically from `seed`. Each task draws its own
/// inputs; labels come from its group's teacher, each flipped to a uniformly
/// random class with probability `label_noise`.
pub fn synthetic_suite(spec: &SyntheticSuiteSpec, seed: u64) -> Result<SyntheticSuite> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = spec.teacher_groups.iter().max().map_or(0, |g| g + 1);
    let teachers = (0..groups)
        .map(|_| Teacher::random(spec.input_dim, spec.teacher_hidden, spec.classes, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut tasks = Vec::with_capacity(spec.teacher_groups.len());
    for (t, &g) in spec.teacher_groups.iter().enumerate() {
        let mut split = |n: usize| -> Result<Split> {
            let x = random_inputs(n, spec.input_dim, &mut rng)?;
            let mut y = teachers[g].predict(&x)?;
            for label in &mut y {
                if rng.gen::<f64>() < spec.label_noise {
                    *label = rng.gen_range(0..spec.classes);
                }
            }
            Split::new(x, y)
        };
        let train = split(spec.train_per_task)?;
        let test = split(spec.test_per_task)?;
        tasks.push(TaskData::new(task_name(t), spec.classes, train, test)?);
    }
    Ok(SyntheticSuite { tasks, teachers })
}

fn task_name(t: usize) -> String {
    if t < 26 {
        ((b'A' + t as u8) as char).to_string()
    } else {
        format!("task{t}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> SyntheticSuiteSpec {
        SyntheticSuiteSpec {
            teacher_groups: vec![0, 0, 1],
            input_dim: 6,
            classes: 4,
            train_per_task: 50,
            test_per_task: 200,
            teacher_hidden: 8,
            label_noise: noise,
        }
    }

    #[test]
    fn grouped_tasks_share_a_teacher() {
        let suite = synthetic_suite(&spec(0.0), 3).unwrap();
        assert_eq!(suite.teachers.len(), 2);
        assert_ne!(suite.teachers[0], suite.teachers[1]);
        // A and B are labelled by the same function
        let a = &suite.tasks[0];
        assert_eq!(suite.teachers[0].predict(&suite.tasks[1].test.x).unwrap(), suite.tasks[1].test.y);
        assert_eq!(suite.teachers[0].predict(&a.train.x).unwrap(), a.train.y);
        assert_eq!(suite.tasks.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(), ["A", "B", "C"]);
    }

    #[test]
    fn noiseless_teacher_has_zero_error_on_own_data() {
        let suite = synthetic_suite(&spec(0.0), 9).unwrap();
        let c = &suite.tasks[2];
        assert_eq!(suite.teachers[1].predict(&c.test.x).unwrap(), c.test.y);
    }

    #[test]
    fn same_seed_same_suite() {
        assert_eq!(synthetic_suite(&spec(0.1), 5).unwrap(), synthetic_suite(&spec(0.1), 5).unwrap());
        assert_ne!(synthetic_suite(&spec(0.1), 5).unwrap(), synthetic_suite(&spec(0.1), 6).unwrap());
    }

    #[test]
    fn classes_are_not_degenerate() {
        let suite = synthetic_suite(&spec(0.0), 1).unwrap();
        let mut counts = [0usize; 4];
        for &y in &suite.tasks[0].test.y {
            counts[y] += 1;
        }
        assert!(counts.iter().all(|&c| c > 10), "{counts:?}");
    }
}
