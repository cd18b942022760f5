//! Routing surrogate, Brier score, seed-level risk, and empirical CVaR.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::domain::CostSpec;
use crate::error::{Error, Result};
use crate::math;

/// `c_SLM (1−p) + c_LLM p + κ y (1−p)`.
pub fn route_surrogate(p: f64, y: u8, c: &CostSpec) -> f64 {
    c.c_slm * (1.0 - p) + c.c_llm * p + c.kappa * y as f64 * (1.0 - p)
}

/// Derivative of [`route_surrogate`] in `p`.
pub fn route_surrogate_grad(y: u8, c: &CostSpec) -> f64 {
    c.c_llm - c.c_slm - c.kappa * y as f64
}

pub fn brier(p: f64, y: u8) -> f64 {
    let d = p - y as f64;
    d * d
}

pub fn batch_brier(probs: &[f64], labels: &[u8]) -> f64 {
    let sum: f64 = probs.iter().zip(labels).map(|(&p, &y)| brier(p, y)).sum();
    sum / probs.len().max(1) as f64
}

/// `τ* = clamp((c_LLM − c_SLM) / κ, 0, 1)`.
pub fn bayes_threshold(c: &CostSpec) -> f64 {
    ((c.c_llm - c.c_slm) / c.kappa).clamp(0.0, 1.0)
}

/// Per-seed mean surrogate `R̃(z)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedRiskTable {
    pub risks: BTreeMap<u64, f64>,
    /// Seeds that had no steps and were left out.
    pub excluded: usize,
}

impl SeedRiskTable {
    pub fn values(&self) -> Vec<f64> {
        self.risks.values().copied().collect()
    }

    pub fn mean(&self) -> f64 {
        math::mean(&self.values())
    }
}

/// Group `(seed_id, p, y)` triples by seed and average the surrogate.
///
/// Seeds listed in `expected_seeds` but absent from the steps count as excluded.
pub fn seed_risk(steps: &[(u64, f64, u8)], costs: &CostSpec, expected_seeds: &[u64]) -> SeedRiskTable {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for &(seed, p, y) in steps {
        let e = acc.entry(seed).or_insert((0.0, 0));
        e.0 += route_surrogate(p, y, costs);
        e.1 += 1;
    }
    let excluded = expected_seeds.iter().filter(|s| !acc.contains_key(s)).count();
    SeedRiskTable {
        risks: acc.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect(),
        excluded,
    }
}

/// Size of the CVaR tail: `ceil(α n)`, at least one.
pub fn tail_size(n: usize, alpha: f64) -> usize {
    (math::ceil(alpha * n as f64 - 1e-12) as usize).clamp(1, n)
}

/// Indices of the worst `ceil(α n)` values; ties go to the smaller id.
pub fn cvar_tail(values: &[f64], ids: &[u64], alpha: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(ids[a].cmp(&ids[b])));
    order.truncate(tail_size(values.len(), alpha));
    order
}

/// Empirical CVaR: mean of the worst `ceil(α n)` values.
pub fn cvar(values: &[f64], alpha: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("CVaR of an empty list".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("alpha must be in (0,1], got {alpha}")));
    }
    let ids: Vec<u64> = (0..values.len() as u64).collect();
    let tail = cvar_tail(values, &ids, alpha);
    Ok(tail.iter().map(|&i| values[i]).sum::<f64>() / tail.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn big() -> CostSpec {
        CostSpec {
            c_slm: 1.0,
            c_llm: 50.0,
            kappa: 98.0,
        }
    }

    #[test]
    fn surrogate_examples() {
        let c = big();
        assert_eq!(route_surrogate(0.0, 0, &c), 1.0);
        assert_eq!(route_surrogate(1.0, 0, &c), 50.0);
        assert_eq!(route_surrogate(1.0, 1, &c), 50.0);
        assert!((route_surrogate(0.5, 1, &c) - 74.5).abs() < 1e-12);
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(1.0, 1), 0.0);
        assert_eq!(brier(0.5, 0), 0.25);
        assert_eq!(brier(0.5, 1), 0.25);
    }

    #[test]
    fn thresholds() {
        assert_eq!(bayes_threshold(&big()), 0.5);
        let low = CostSpec {
            c_slm: 2.0,
            c_llm: 1.0,
            kappa: 1.0,
        };
        assert_eq!(bayes_threshold(&low), 0.0);
        let high = CostSpec {
            c_slm: 1.0,
            c_llm: 50.0,
            kappa: 10.0,
        };
        assert_eq!(bayes_threshold(&high), 1.0);
    }

    #[test]
    fn seed_risk_examples() {
        let c = big();
        let t = seed_risk(&[(7, 1.0, 0)], &c, &[7]);
        assert_eq!(t.risks[&7], 50.0);
        let dup = seed_risk(&[(7, 0.3, 1), (7, 0.3, 1)], &c, &[]);
        assert_eq!(dup.risks[&7], route_surrogate(0.3, 1, &c));
        let t = seed_risk(&[(1, 0.0, 0), (1, 1.0, 1), (2, 0.5, 1), (3, 0.2, 0), (3, 0.4, 0)], &c, &[1, 2, 3, 4]);
        assert_eq!(t.risks[&1], (1.0 + 50.0) / 2.0);
        assert_eq!(t.risks[&2], 74.5);
        assert!((t.risks[&3] - (0.8 + 10.0 + 0.6 + 20.0) / 2.0).abs() < 1e-12);
        assert_eq!(t.excluded, 1);
    }

    #[test]
    fn cvar_examples() {
        let v: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert_eq!(cvar(&v, 0.2).unwrap(), 9.5);
        assert_eq!(cvar(&v, 1.0).unwrap(), 5.5);
        assert!(cvar(&[], 0.5).is_err());
        assert_eq!(tail_size(10, 0.05), 1);
        assert_eq!(tail_size(50, 0.2), 10);
    }

    #[test]
    fn tail_ties_by_id() {
        let tail = cvar_tail(&[1.0, 3.0, 3.0, 0.0], &[9, 8, 2, 1], 0.25);
        assert_eq!(tail, vec![2]);
    }
}
