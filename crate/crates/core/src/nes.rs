//! NES update of the assignment distribution: rank-based fitness shaping,
//! the Monte-Carlo search gradient and the plain ascent step on `π`.

use serde::{Deserialize, Serialize};

use crate::distribution::{Assignment, JointAssignmentDistribution};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NesConfig {
    /// λ_π, samples per NES step.
    pub population: usize,
    /// η_π
    pub learning_rate: f64,
    pub floor: f64,
}

impl NesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Config(format!(
                "NES population must be at least 2, got {}",
                self.population
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "NES learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.floor) {
            return Err(Error::Config(format!("floor must lie in [0, 1), got {}", self.floor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub assignment: Assignment,
    pub loss: f64,
    pub log_derivative: Vec<f64>,
}

/// Ranks losses from 1 (largest) to λ (smallest). Equal losses are ranked by
/// position, earlier first.
pub fn rank_descending(losses: &[f64]) -> Result<Vec<usize>> {
    if losses.len() < 2 {
        return Err(Error::Argument(format!(
            "ranking needs at least 2 losses, got {}",
            losses.len()
        )));
    }
    if losses.iter().any(|l| l.is_nan()) {
        return Err(Error::Argument("NaN loss".into()));
    }
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; losses.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    Ok(ranks)
}

/// Equally spaced utilities in `[-1, 1]`; the lowest loss gets `+1`.
pub fn utilities(losses: &[f64]) -> Result<Vec<f64>> {
    let ranks = rank_descending(losses)?;
    let denom = (losses.len() - 1) as f64;
    Ok(ranks
        .into_iter()
        .map(|r| 2.0 * (r - 1) as f64 / denom - 1.0)
        .collect())
}

/// `(1/λ) Σ uᵢ ∇log p(aᵢ|π)` with utilities computed from the sample losses.
pub fn estimate_search_gradient(samples: &[ScoredSample], param_len: usize) -> Result<Vec<f64>> {
    if let Some(bad) = samples.iter().find(|s| s.log_derivative.len() != param_len) {
        return Err(Error::dim(
            "estimate_search_gradient",
            &[param_len],
            &[bad.log_derivative.len()],
        ));
    }
    let losses: Vec<f64> = samples.iter().map(|s| s.loss).collect();
    let utils = utilities(&losses)?;
    let derivatives: Vec<&[f64]> = samples.iter().map(|s| s.log_derivative.as_slice()).collect();
    Ok(weighted_score_mean(&utils, &derivatives, param_len))
}

/// `(1/λ) Σ uᵢ dᵢ` for given weights `u` and score vectors `d` of length `param_len`.
pub fn weighted_score_mean(utilities: &[f64], derivatives: &[&[f64]], param_len: usize) -> Vec<f64> {
    let mut grad = vec![0.0; param_len];
    for (d, u) in derivatives.iter().zip(utilities) {
        for (g, x) in grad.iter_mut().zip(d.iter()) {
            *g += u * x;
        }
    }
    let lambda = derivatives.len() as f64;
    grad.iter_mut().for_each(|g| *g /= lambda);
    grad
}

/// Ascent step `π ← π + η_π·gradient` followed by the probability floor.
pub fn nes_step(dist: &mut JointAssignmentDistribution, gradient: &[f64], config: &NesConfig) -> Result<()> {
    dist.add_scaled(gradient, config.learning_rate)?;
    dist.clamp_and_renormalize(config.floor)
}

/// Scores `assignments` with `loss_fn`, estimates the search gradient and
/// applies [`nes_step`]. Returns the scored samples.
pub fn nes_update<F>(
    dist: &mut JointAssignmentDistribution,
    assignments: Vec<Assignment>,
    config: &NesConfig,
    mut loss_fn: F,
) -> Result<Vec<ScoredSample>>
where
    F: FnMut(&Assignment) -> Result<f64>,
{
    let samples = assignments
        .into_iter()
        .map(|a| {
            let loss = loss_fn(&a)?;
            if !loss.is_finite() {
                return Err(Error::Argument(format!("non-finite loss {loss}")));
            }
            let log_derivative = dist.natural_log_derivative(&a)?;
            Ok(ScoredSample {
                assignment: a,
                loss,
                log_derivative,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let grad = estimate_search_gradient(&samples, dist.param_len())?;
    nes_step(dist, &grad, config)?;
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::SlotDistribution;

    #[test]
    fn rank_fixture() {
        assert_eq!(
            rank_descending(&[0.3, 0.1, 0.5, 0.2, 0.4]).unwrap(),
            vec![3, 5, 1, 4, 2]
        );
        assert_eq!(rank_descending(&[7.0, 7.0]).unwrap(), vec![1, 2]);
        assert_eq!(rank_descending(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![4, 3, 2, 1]);
        assert!(rank_descending(&[1.0, f64::NAN]).is_err());
        assert!(rank_descending(&[1.0]).is_err());
    }

    #[test]
    fn utility_fixture() {
        assert_eq!(
            utilities(&[0.3, 0.1, 0.5, 0.2, 0.4]).unwrap(),
            vec![0.0, 1.0, -1.0, 0.5, -0.5]
        );
        assert_eq!(utilities(&[0.1, 0.9]).unwrap(), vec![1.0, -1.0]);
    }

    #[test]
    fn two_sample_gradient_is_half_difference() {
        let d1 = vec![0.5, -0.25, 0.1];
        let d2 = vec![-0.3, 0.2, 0.4];
        let samples = vec![
            ScoredSample {
                assignment: Assignment(vec![0]),
                loss: 0.2,
                log_derivative: d1.clone(),
            },
            ScoredSample {
                assignment: Assignment(vec![1]),
                loss: 0.7,
                log_derivative: d2.clone(),
            },
        ];
        let g = estimate_search_gradient(&samples, 3).unwrap();
        for i in 0..3 {
            assert!((g[i] - 0.5 * (d1[i] - d2[i])).abs() < 1e-15);
        }
        assert!(estimate_search_gradient(&samples, 2).is_err());
    }

    #[test]
    fn zero_log_derivatives_give_zero_gradient() {
        let samples: Vec<_> = (0..4)
            .map(|i| ScoredSample {
                assignment: Assignment(vec![0]),
                loss: i as f64,
                log_derivative: vec![0.0; 2],
            })
            .collect();
        assert_eq!(estimate_search_gradient(&samples, 2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn step_arithmetic() {
        let config = NesConfig {
            population: 2,
            learning_rate: 1.0,
            floor: 0.001,
        };
        let mut d = JointAssignmentDistribution::uniform(1, 2).unwrap();
        nes_step(&mut d, &[0.1], &config).unwrap();
        let p = d.to_probs()[0].clone();
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.4).abs() < 1e-15);

        let before = d.clone();
        nes_step(&mut d, &[0.0], &config).unwrap();
        assert_eq!(d, before);

        nes_step(&mut d, &[-5.0], &config).unwrap();
        let p = d.to_probs()[0].clone();
        assert!(p.iter().all(|&v| v >= 0.001 - 1e-15));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = NesConfig {
            population: 1,
            learning_rate: 0.01,
            floor: 0.001,
        };
        assert!(c.validate().is_err());
        c.population = 8;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn identical_point_mass_samples_leave_pi_unchanged() {
        let mut d = JointAssignmentDistribution::from_slots(vec![
            SlotDistribution::point_mass(3, 1).unwrap(),
            SlotDistribution::point_mass(3, 2).unwrap(),
        ]);
        let before = d.clone();
        let a = Assignment(vec![1, 2]);
        let config = NesConfig {
            population: 8,
            learning_rate: 0.5,
            floor: 0.0,
        };
        let mut i = 0.0;
        nes_update(&mut d, vec![a; 8], &config, |_| {
            i += 1.0;
            Ok(i)
        })
        .unwrap();
        assert_eq!(d, before);
    }
}
