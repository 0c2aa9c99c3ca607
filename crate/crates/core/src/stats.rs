//! One-sided Mann-Whitney U test and summary statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Largest per-sample size for which the exact null distribution is used.
pub const EXACT_MAX_SAMPLE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `U` of the first sample: pairs where it is larger, ties counting ½.
    pub u: f64,
    /// One-sided p-value for "first sample stochastically smaller".
    pub p_value: f64,
    pub exact: bool,
}

/// Midranks (1-based, ties averaged) of `values`.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = r;
        }
        i = j;
    }
    ranks
}

fn u_statistic(ranks: &[f64], n_a: usize) -> f64 {
    let rank_sum: f64 = ranks[..n_a].iter().sum();
    rank_sum - (n_a * (n_a + 1)) as f64 / 2.0
}

/// One-sided test of `a` stochastically smaller than `b`. Both samples must
/// be non-empty. Uses the exact permutation distribution of the midrank sum
/// when both samples have at most [`EXACT_MAX_SAMPLE`] elements.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> MannWhitney {
    assert!(!a.is_empty() && !b.is_empty(), "Mann-Whitney needs non-empty samples");
    let combined: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&combined);
    let u = u_statistic(&ranks, a.len());
    let exact = a.len() <= EXACT_MAX_SAMPLE && b.len() <= EXACT_MAX_SAMPLE;
    let p_value = if exact {
        exact_p_value(&ranks, a.len())
    } else {
        normal_p_value(&ranks, a.len(), u)
    };
    MannWhitney { u, p_value, exact }
}

/// `P(U ≤ u_obs)` under random relabelling of the pooled midranks. Midranks
/// are multiples of ½, so doubled ranks are integers and the null
/// distribution of the rank sum is a subset-sum count.
pub fn exact_p_value(ranks: &[f64], n_a: usize) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let observed: usize = doubled[..n_a].iter().sum();
    let max_sum: usize = doubled.iter().sum();
    // ways[j][s]: subsets of size j with doubled rank sum s
    let mut ways = vec![vec![0.0f64; max_sum + 1]; n_a + 1];
    ways[0][0] = 1.0;
    for &r in &doubled {
        for j in (1..=n_a).rev() {
            let (lower, upper) = ways.split_at_mut(j);
            let (prev, cur) = (&lower[j - 1], &mut upper[0]);
            for s in (r..=max_sum).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    let total: f64 = ways[n_a].iter().sum();
    let at_most: f64 = ways[n_a][..=observed].iter().sum();
    at_most / total
}

/// Normal approximation with tie correction and continuity correction.
pub fn normal_p_value(ranks: &[f64], n_a: usize, u: f64) -> f64 {
    let n = ranks.len();
    let n_b = n - n_a;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let (na, nb, nf) = (n_a as f64, n_b as f64, n as f64);
    let mean = na * nb / 2.0;
    let variance = if n > 1 {
        na * nb / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)))
    } else {
        0.0
    };
    if variance <= 0.0 {
        return 1.0;
    }
    let z = (u - mean + 0.5) / variance.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("valid parameters");
    std_normal.cdf(z).min(1.0)
}

/// Both p-value routes for the same data, for cross-checking.
pub fn mann_whitney_both(a: &[f64], b: &[f64]) -> (f64, f64) {
    let combined: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&combined);
    let u = u_statistic(&ranks, a.len());
    (exact_p_value(&ranks, a.len()), normal_p_value(&ranks, a.len(), u))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); `None` for fewer than two values.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}
