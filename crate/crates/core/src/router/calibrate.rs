//! Post-hoc temperature scaling and threshold selection.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::loss::{bayes_threshold, route_surrogate};
use super::net::RouterNet;
use super::train::RoutingData;
use crate::domain::CostSpec;
use crate::error::Result;
use crate::eval::ece;
use crate::math;

/// Maximum ECE increase tolerated before temperature scaling is rejected.
pub const ECE_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    pub ece_before: f64,
    pub ece_after: f64,
    pub warning: Option<String>,
}

/// Mean negative log-likelihood of `sigmoid(z / T)`.
pub fn sigmoid_nll(logits: &[f64], labels: &[u8], temperature: f64) -> f64 {
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let s = z / temperature;
            if y == 1 {
                -math::log_sigmoid(s)
            } else {
                -math::log_sigmoid(-s)
            }
        })
        .sum();
    sum / logits.len().max(1) as f64
}

/// Golden-section search on `log T ∈ [−3, 3]` for the NLL-minimizing temperature.
pub fn fit_temperature_logits(logits: &[f64], labels: &[u8]) -> TemperatureFit {
    let probs = |t: f64| -> Vec<f64> { logits.iter().map(|&z| math::sigmoid(z / t)).collect() };
    let nll_before = sigmoid_nll(logits, labels, 1.0);
    let ece_before = ece(&probs(1.0), labels, 15);
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if logits.is_empty() || positives == 0 || positives == labels.len() {
        return TemperatureFit {
            temperature: 1.0,
            nll_before,
            nll_after: nll_before,
            ece_before,
            ece_after: ece_before,
            warning: Some(String::from("validation labels are single-class; keeping T = 1")),
        };
    }
    let log_t = math::golden_section(|lt| sigmoid_nll(logits, labels, math::exp(lt)), -3.0, 3.0, 100);
    let t = math::exp(log_t);
    let ece_after = ece(&probs(t), labels, 15);
    if ece_after > ece_before + ECE_TOLERANCE {
        return TemperatureFit {
            temperature: 1.0,
            nll_before,
            nll_after: nll_before,
            ece_before,
            ece_after: ece_before,
            warning: Some(alloc::format!(
                "temperature {t:.4} raised ECE from {ece_before:.4} to {ece_after:.4}; keeping T = 1"
            )),
        };
    }
    TemperatureFit {
        temperature: t,
        nll_before,
        nll_after: sigmoid_nll(logits, labels, t),
        ece_before,
        ece_after,
        warning: None,
    }
}

/// Fit and install the temperature on a network.
pub fn fit_temperature(net: &mut RouterNet, validation: &RoutingData) -> Result<TemperatureFit> {
    let logits = net.logits_eval(&validation.inputs)?;
    let fit = fit_temperature_logits(&logits, &validation.labels);
    net.temperature = fit.temperature;
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Bayes,
    ValidationSweep,
}

/// Thresholds `0.01, 0.02, ..., 0.99`.
pub fn threshold_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// Mean surrogate of hard decisions (`p = d`) over labelled steps.
pub fn hard_decision_cost(decisions: impl Iterator<Item = bool>, labels: &[u8], costs: &CostSpec) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (d, &y) in decisions.zip(labels) {
        sum += route_surrogate(d as u8 as f64, y, costs);
        n += 1;
    }
    sum / n.max(1) as f64
}

/// Grid value with the lowest cost; ties go to the first (lowest) grid entry.
pub fn sweep<F: FnMut(f64) -> f64>(grid: &[f64], mut cost: F) -> (f64, f64) {
    let mut best = (grid[0], cost(grid[0]));
    for &tau in &grid[1..] {
        let c = cost(tau);
        if c < best.1 {
            best = (tau, c);
        }
    }
    best
}

/// Choose `τ_route` from calibrated validation probabilities.
///
/// A validation set without failures has nothing to escalate for, so the sweep
/// returns the top of the grid.
pub fn select_threshold(probs: &[f64], labels: &[u8], costs: &CostSpec, mode: ThresholdMode) -> f64 {
    match mode {
        ThresholdMode::Bayes => bayes_threshold(costs),
        ThresholdMode::ValidationSweep => {
            let grid = threshold_grid();
            if !labels.contains(&1) {
                return *grid.last().expect("grid is nonempty");
            }
            sweep(&grid, |tau| hard_decision_cost(probs.iter().map(|&p| p >= tau), labels, costs)).0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn planted(n: usize, scale: f64, seed: u64) -> (Vec<f64>, Vec<u8>) {
        let mut r = rng::stream(seed, &[]);
        let mut logits = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = r.gen_range(-4.0..4.0);
            let y = (r.gen::<f64>() < math::sigmoid(z)) as u8;
            logits.push(z * scale);
            labels.push(y);
        }
        (logits, labels)
    }

    #[test]
    fn calibrated_logits_keep_unit_temperature() {
        let (z, y) = planted(50_000, 1.0, 1);
        let fit = fit_temperature_logits(&z, &y);
        assert!((fit.temperature - 1.0).abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn overconfident_logits_recover_scale() {
        let (z, y) = planted(50_000, 5.0, 2);
        let fit = fit_temperature_logits(&z, &y);
        assert!((fit.temperature - 5.0).abs() < 0.5, "{fit:?}");
        assert!(fit.ece_after <= fit.ece_before + ECE_TOLERANCE);
    }

    #[test]
    fn single_label_keeps_unit_temperature() {
        let fit = fit_temperature_logits(&[0.3, 1.2, -0.4], &[0, 0, 0]);
        assert_eq!(fit.temperature, 1.0);
        assert!(fit.warning.is_some());
    }

    #[test]
    fn sweep_without_failures_returns_top() {
        let c = CostSpec::default();
        let tau = select_threshold(&[0.2, 0.7, 0.995], &[0, 0, 0], &c, ThresholdMode::ValidationSweep);
        assert_eq!(tau, 0.99);
        assert_eq!(select_threshold(&[0.2], &[0], &c, ThresholdMode::Bayes), 0.5);
    }

    #[test]
    fn sweep_on_calibrated_scores_is_near_bayes() {
        let c = CostSpec::default();
        let mut r = rng::stream(3, &[]);
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..200_000 {
            let q: f64 = r.gen();
            probs.push(q);
            labels.push((r.gen::<f64>() < q) as u8);
        }
        let tau = select_threshold(&probs, &labels, &c, ThresholdMode::ValidationSweep);
        assert!((tau - bayes_threshold(&c)).abs() <= 0.05, "{tau}");
    }
}
