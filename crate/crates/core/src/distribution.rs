//! Joint categorical search distribution over weight assignments.
//!
//! Each slot (one task-specific shareable layer) carries a categorical
//! distribution over its `K` candidate weights, stored in expectation
//! parameters: the probabilities `μ` of the first `K−1` categories. The last
//! probability is implicit, `μ_K = 1 − Σμ`. In this parameterization the
//! natural gradient of `log p(a|π)` is simply `T(a) − π`, where `T` one-hot
//! encodes the first `K−1` categories of every slot.
//!
//! Category indices are zero-based throughout.

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Probabilities within this distance below the floor are treated as on it.
/// Recomputing the implicit last probability can lose a few ulps.
const FLOOR_SLACK: f64 = 1e-14;

/// Probabilities closer than this count as tied in [`SlotDistribution::argmax`];
/// `1 − 2·(1/3)` is not exactly `1/3`.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SlotDistribution {
    mu: Vec<f64>,
}

impl SlotDistribution {
    pub fn uniform(categories: usize) -> Result<Self> {
        if categories == 0 {
            return Err(Error::Argument("a slot needs at least one category".into()));
        }
        let p = 1.0 / categories as f64;
        Ok(SlotDistribution {
            mu: vec![p; categories - 1],
        })
    }

    /// Builds a slot from all `K` probabilities. They must be non-negative and
    /// sum to one within `1e-9`.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Argument("a slot needs at least one category".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Argument(format!("probabilities out of [0, 1]: {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!("probabilities sum to {total}, not 1")));
        }
        Ok(SlotDistribution {
            mu: probs[..probs.len() - 1].to_vec(),
        })
    }

    /// Builds a slot directly from expectation parameters, without validation.
    /// Used for intermediate states between an update and the clamp.
    pub fn from_expectation(mu: Vec<f64>) -> Self {
        SlotDistribution { mu }
    }

    /// Point mass on `category`.
    pub fn point_mass(categories: usize, category: usize) -> Result<Self> {
        if category >= categories {
            return Err(Error::Argument(format!(
                "category {category} out of range for {categories} categories"
            )));
        }
        let mut probs = vec![0.0; categories];
        probs[category] = 1.0;
        Self::from_probs(&probs)
    }

    pub fn categories(&self) -> usize {
        self.mu.len() + 1
    }

    pub fn expectation(&self) -> &[f64] {
        &self.mu
    }

    pub fn last_prob(&self) -> f64 {
        1.0 - self.mu.iter().sum::<f64>()
    }

    /// All `K` probabilities, the last one being `1 − Σμ`.
    pub fn full_probs(&self) -> Vec<f64> {
        let mut p = self.mu.clone();
        p.push(self.last_prob());
        p
    }

    pub fn prob(&self, category: usize) -> f64 {
        if category < self.mu.len() {
            self.mu[category]
        } else {
            self.last_prob()
        }
    }

    /// Inverse-CDF draw from one uniform variate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        for (i, &p) in self.mu.iter().enumerate() {
            cum += p;
            if u < cum {
                return i;
            }
        }
        self.mu.len()
    }

    /// Most probable category; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let probs = self.full_probs();
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] + TIE_TOLERANCE {
                best = i;
            }
        }
        best
    }

    /// Natural parameters `αᵢ = log(μᵢ / μ_K)`.
    pub fn to_natural(&self) -> Result<Vec<f64>> {
        let last = self.last_prob();
        if !(last > 0.0) || self.mu.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Domain(format!(
                "natural parameters need strictly positive probabilities, got {:?}",
                self.full_probs()
            )));
        }
        Ok(self.mu.iter().map(|&m| (m / last).ln()).collect())
    }

    /// Inverse of [`SlotDistribution::to_natural`]: `μᵢ = e^{αᵢ} / (1 + Σe^{αⱼ})`.
    pub fn from_natural(alpha: &[f64]) -> Self {
        // shift by the max so large α do not overflow; the implicit α_K is 0
        let shift = alpha.iter().copied().fold(0.0, f64::max);
        let denom = (-shift).exp() + alpha.iter().map(|a| (a - shift).exp()).sum::<f64>();
        SlotDistribution {
            mu: alpha.iter().map(|a| (a - shift).exp() / denom).collect(),
        }
    }

    /// Evaluates the gradient of the cumulant `A(α) = log(1 + Σe^{αᵢ})` at
    /// the slot's natural parameters and returns its largest absolute
    /// deviation from `μ`.
    pub fn cumulant_gradient_check(&self) -> Result<f64> {
        let alpha = self.to_natural()?;
        let denom = 1.0 + alpha.iter().map(|a| a.exp()).sum::<f64>();
        Ok(alpha
            .iter()
            .zip(&self.mu)
            .map(|(a, m)| (a.exp() / denom - m).abs())
            .fold(0.0, f64::max))
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.full_probs()
            .into_iter()
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum()
    }

    /// Raises every probability (including the implicit last one) to at least
    /// `floor` and redistributes the excess over the remaining categories in
    /// proportion to their mass, so the result sums to one and no entry ends
    /// below the floor. Slots already satisfying the floor are left untouched,
    /// which makes the operation idempotent.
    pub fn clamp_and_renormalize(&mut self, floor: f64) -> Result<()> {
        let k = self.categories();
        if !(floor >= 0.0) || floor * k as f64 >= 1.0 {
            return Err(Error::Argument(format!(
                "floor {floor} must lie in [0, 1/{k})"
            )));
        }
        let probs = self.full_probs();
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::Argument(format!("non-finite probabilities {probs:?}")));
        }
        if probs.iter().all(|&p| p >= floor - FLOOR_SLACK) {
            return Ok(());
        }
        let mut pinned: Vec<bool> = probs.iter().map(|&p| p < floor).collect();
        let out = loop {
            let n_pinned = pinned.iter().filter(|&&b| b).count();
            let free_mass = 1.0 - n_pinned as f64 * floor;
            let free_total: f64 = probs
                .iter()
                .zip(&pinned)
                .filter(|(_, &pin)| !pin)
                .map(|(p, _)| p)
                .sum();
            if !(free_total > 0.0) {
                return Err(Error::Argument(format!("cannot renormalize {probs:?}")));
            }
            let scale = free_mass / free_total;
            let scaled: Vec<f64> = probs
                .iter()
                .zip(&pinned)
                .map(|(&p, &pin)| if pin { floor } else { p * scale })
                .collect();
            let mut grew = false;
            for (pin, &v) in pinned.iter_mut().zip(&scaled) {
                if !*pin && v < floor {
                    *pin = true;
                    grew = true;
                }
            }
            if !grew {
                break scaled;
            }
        };
        self.mu.copy_from_slice(&out[..k - 1]);
        Ok(())
    }
}

/// Assignment of one candidate index to every slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assignment(pub Vec<usize>);

impl Assignment {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

/// Product of independent categorical slots.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAssignmentDistribution {
    slots: Vec<SlotDistribution>,
}

impl JointAssignmentDistribution {
    /// `n` slots with all probabilities at `1/k`.
    pub fn uniform(n: usize, k: usize) -> Result<Self> {
        Ok(JointAssignmentDistribution {
            slots: (0..n).map(|_| SlotDistribution::uniform(k)).collect::<Result<_>>()?,
        })
    }

    pub fn from_slots(slots: Vec<SlotDistribution>) -> Self {
        JointAssignmentDistribution { slots }
    }

    /// Point mass on `assignment`, where slot `i` has `categories[i]` categories.
    pub fn point_mass(assignment: &Assignment, categories: &[usize]) -> Result<Self> {
        if assignment.len() != categories.len() {
            return Err(Error::dim("point_mass", &[assignment.len()], &[categories.len()]));
        }
        Ok(JointAssignmentDistribution {
            slots: assignment
                .0
                .iter()
                .zip(categories)
                .map(|(&a, &k)| SlotDistribution::point_mass(k, a))
                .collect::<Result<_>>()?,
        })
    }

    pub fn slots(&self) -> &[SlotDistribution] {
        &self.slots
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Length of the concatenated expectation-parameter vector `π`.
    pub fn param_len(&self) -> usize {
        self.slots.iter().map(|s| s.mu.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.slots.iter().flat_map(|s| s.mu.iter().copied()).collect()
    }

    pub fn categories(&self) -> Vec<usize> {
        self.slots.iter().map(SlotDistribution::categories).collect()
    }

    /// `π ← π + step · direction`, with no clamping.
    pub fn add_scaled(&mut self, direction: &[f64], step: f64) -> Result<()> {
        if direction.len() != self.param_len() {
            return Err(Error::dim("add_scaled", &[self.param_len()], &[direction.len()]));
        }
        let mut it = direction.iter();
        for slot in &mut self.slots {
            for m in &mut slot.mu {
                *m += step * it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn check_assignment(&self, a: &Assignment) -> Result<()> {
        if a.len() != self.slots.len() {
            return Err(Error::dim("assignment", &[a.len()], &[self.slots.len()]));
        }
        for (i, (&idx, slot)) in a.0.iter().zip(&self.slots).enumerate() {
            if idx >= slot.categories() {
                return Err(Error::Argument(format!(
                    "slot {i}: category {idx} out of range for {} categories",
                    slot.categories()
                )));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Assignment {
        Assignment(self.slots.iter().map(|s| s.sample(rng)).collect())
    }

    /// `Σᵢ log pᵢ(aᵢ)`; `-∞` if any selected category has zero probability.
    pub fn log_density(&self, a: &Assignment) -> Result<f64> {
        self.check_assignment(a)?;
        let mut total = 0.0;
        for (&idx, slot) in a.0.iter().zip(&self.slots) {
            let p = slot.prob(idx);
            if p <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            total += p.ln();
        }
        Ok(total)
    }

    /// Natural gradient of `log p(a|π)` with respect to `π`: `T(a) − π`.
    pub fn natural_log_derivative(&self, a: &Assignment) -> Result<Vec<f64>> {
        self.check_assignment(a)?;
        let mut out = Vec::with_capacity(self.param_len());
        for (&idx, slot) in a.0.iter().zip(&self.slots) {
            out.extend(
                slot.mu
                    .iter()
                    .enumerate()
                    .map(|(j, &m)| if j == idx { 1.0 - m } else { -m }),
            );
        }
        Ok(out)
    }

    pub fn argmax_assignment(&self) -> Assignment {
        Assignment(self.slots.iter().map(SlotDistribution::argmax).collect())
    }

    pub fn clamp_and_renormalize(&mut self, floor: f64) -> Result<()> {
        self.slots
            .iter_mut()
            .try_for_each(|s| s.clamp_and_renormalize(floor))
    }

    pub fn entropy(&self) -> f64 {
        self.slots.iter().map(SlotDistribution::entropy).sum()
    }

    /// Per-slot full probability vectors.
    pub fn to_probs(&self) -> Vec<Vec<f64>> {
        self.slots.iter().map(SlotDistribution::full_probs).collect()
    }

    pub fn from_probs(probs: &[Vec<f64>]) -> Result<Self> {
        Ok(JointAssignmentDistribution {
            slots: probs
                .iter()
                .map(|p| SlotDistribution::from_probs(p))
                .collect::<Result<_>>()?,
        })
    }
}

impl Serialize for JointAssignmentDistribution {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_probs().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for JointAssignmentDistribution {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let probs = Vec::<Vec<f64>>::deserialize(deserializer)?;
        // Stored vectors may sit a few ulps off the simplex after clamping, so
        // only the first K−1 entries are kept, exactly as they were in memory.
        if probs.iter().any(Vec::is_empty) {
            return Err(serde::de::Error::custom("empty slot"));
        }
        Ok(JointAssignmentDistribution {
            slots: probs
                .into_iter()
                .map(|mut p| {
                    p.pop();
                    SlotDistribution { mu: p }
                })
                .collect(),
        })
    }
}
