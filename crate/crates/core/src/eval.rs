//! Episode metrics, calibration diagnostics, AUROC, and bootstrap intervals.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Executor, PerturbedEpisode};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, purpose};

pub const ECE_BINS: usize = 15;
pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub episodes: usize,
    pub steps: usize,
    pub success_rate: f64,
    /// Share of steps executed by the teacher.
    pub llm_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ece: Option<f64>,
    pub brier: Option<f64>,
    pub auroc: Option<f64>,
}

/// Success rate, step-level escalation rate, and a bootstrap interval on success.
pub fn compute_metrics(episodes: &[PerturbedEpisode], bootstrap_seed: u64) -> Result<RunMetrics> {
    if episodes.is_empty() {
        return Err(Error::EmptyDataset("no episodes to evaluate".into()));
    }
    let successes: Vec<bool> = episodes.iter().map(|e| e.success).collect();
    let steps: usize = episodes.iter().map(|e| e.steps.len()).sum();
    let llm: u64 = episodes.iter().map(|e| e.llm_calls).sum();
    let sr = successes.iter().filter(|&&s| s).count() as f64 / episodes.len() as f64;
    let (low, high) = if episodes.len() >= 2 {
        bootstrap_ci(&successes, BOOTSTRAP_RESAMPLES, BOOTSTRAP_LEVEL, bootstrap_seed)?
    } else {
        (sr, sr)
    };
    Ok(RunMetrics {
        episodes: episodes.len(),
        steps,
        success_rate: sr,
        llm_rate: if steps == 0 { 0.0 } else { llm as f64 / steps as f64 },
        ci_low: low.min(sr),
        ci_high: high.max(sr),
        ece: None,
        brier: None,
        auroc: None,
    })
}

/// Escalation rate recounted from executor tags.
pub fn recount_llm_rate(episodes: &[PerturbedEpisode]) -> f64 {
    let steps: usize = episodes.iter().map(|e| e.steps.len()).sum();
    let llm = episodes
        .iter()
        .flat_map(|e| &e.steps)
        .filter(|s| s.executor == Executor::Llm)
        .count();
    if steps == 0 {
        0.0
    } else {
        llm as f64 / steps as f64
    }
}

/// Equal-width binned expected calibration error, weighted by bin occupancy.
pub fn ece(predictions: &[f64], labels: &[u8], bins: usize) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut acc = vec![0.0; bins];
    for (&p, &y) in predictions.iter().zip(labels) {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += p;
        acc[b] += y as f64;
    }
    let n = predictions.len() as f64;
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            c / n * (conf[b] / c - acc[b] / c).abs()
        })
        .sum()
}

/// Mann–Whitney AUROC with average ranks for ties.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels(format!("AUROC needs both labels, got {pos} positives of {}", labels.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Percentile bootstrap interval on the success rate.
pub fn bootstrap_ci(successes: &[bool], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    let n = successes.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("bootstrap needs at least 2 episodes, got {n}")));
    }
    let mut r = rng::stream(seed, &[purpose::BOOTSTRAP]);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).filter(|_| successes[r.gen_range(0..n)]).count() as f64 / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| -> f64 {
        let pos = p * (means.len() - 1) as f64;
        let lo = math::floor(pos) as usize;
        let hi = (lo + 1).min(means.len() - 1);
        let frac = pos - lo as f64;
        means[lo] * (1.0 - frac) + means[hi] * frac
    };
    let tail = (1.0 - level) / 2.0;
    Ok((q(tail), q(1.0 - tail)))
}

/// ECE, Brier, and AUROC of router probabilities against routing labels.
pub fn calibration_metrics(probs: &[f64], labels: &[u8]) -> (f64, f64, Option<f64>) {
    let brier = crate::router::loss::batch_brier(probs, labels);
    (ece(probs, labels, ECE_BINS), brier, auroc(probs, labels).ok())
}

/// Non-dominated `(llm_rate, success_rate)` points: lower rate and higher success are better.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            !points.iter().enumerate().any(|(j, q)| {
                j != i && q.0 <= points[i].0 && q.1 >= points[i].1 && (q.0 < points[i].0 || q.1 > points[i].1)
            })
        })
        .collect()
}
