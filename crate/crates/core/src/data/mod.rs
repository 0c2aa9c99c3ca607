//! Task datasets, batch construction, IDX ingestion and synthetic suites.

pub mod idx;
pub mod synthetic;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Examples stacked along the leading axis of `x`, with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Split {
    pub fn new(x: Tensor, y: Vec<usize>) -> Result<Self> {
        if x.shape()[0] != y.len() {
            return Err(Error::Data(format!(
                "{} examples but {} labels",
                x.shape()[0],
                y.len()
            )));
        }
        Ok(Split { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Result<Split> {
        Ok(Split {
            x: self.x.select_rows(rows)?,
            y: rows.iter().map(|&r| self.y[r]).collect(),
        })
    }

    /// `n` examples drawn uniformly without replacement, in ascending order.
    pub fn subsample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Split> {
        if n > self.len() {
            return Err(Error::Data(format!("cannot take {n} of {} examples", self.len())));
        }
        let mut rows = rand::seq::index::sample(rng, self.len(), n).into_vec();
        rows.sort_unstable();
        self.select(&rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub name: String,
    pub classes: usize,
    pub train: Split,
    pub test: Split,
}

impl TaskData {
    pub fn new(name: impl Into<String>, classes: usize, train: Split, test: Split) -> Result<Self> {
        let name = name.into();
        if let Some(&bad) = train.y.iter().chain(&test.y).find(|&&l| l >= classes) {
            return Err(Error::Data(format!("task {name}: label {bad} >= {classes} classes")));
        }
        if train.x.shape()[1..] != test.x.shape()[1..] {
            return Err(Error::Data(format!(
                "task {name}: train shape {:?} vs test shape {:?}",
                train.x.shape(),
                test.x.shape()
            )));
        }
        Ok(TaskData {
            name,
            classes,
            train,
            test,
        })
    }

    /// Builds a task from raw label values, mapping the distinct values seen
    /// in either split onto `0..C` in ascending order.
    pub fn from_raw_labels(
        name: impl Into<String>,
        train_x: Tensor,
        train_labels: &[u8],
        test_x: Tensor,
        test_labels: &[u8],
    ) -> Result<Self> {
        let mut seen = [false; 256];
        for &l in train_labels.iter().chain(test_labels) {
            seen[l as usize] = true;
        }
        let mut map = [usize::MAX; 256];
        let mut classes = 0;
        for (v, &s) in seen.iter().enumerate() {
            if s {
                map[v] = classes;
                classes += 1;
            }
        }
        let remap = |ls: &[u8]| ls.iter().map(|&l| map[l as usize]).collect();
        Self::new(
            name,
            classes,
            Split::new(train_x, remap(train_labels))?,
            Split::new(test_x, remap(test_labels))?,
        )
    }
}

/// One task's share of a multi-task batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

/// Draws `per_task` training examples uniformly with replacement from every task.
pub fn make_batch<R: Rng + ?Sized>(tasks: &[TaskData], per_task: usize, rng: &mut R) -> Result<Vec<Batch>> {
    if per_task == 0 {
        return Err(Error::Config("batch size per task must be at least 1".into()));
    }
    tasks
        .iter()
        .map(|t| {
            let n = t.train.len();
            if n == 0 {
                return Err(Error::Data(format!("task {} has no training examples", t.name)));
            }
            let rows: Vec<usize> = (0..per_task).map(|_| rng.gen_range(0..n)).collect();
            let s = t.train.select(&rows)?;
            Ok(Batch { x: s.x, y: s.y })
        })
        .collect()
}
