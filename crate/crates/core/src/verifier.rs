//! Noisy process verifier: a latent-aware quality oracle corrupted by uniform
//! jitter whose width is calibrated to a target pairwise misrank rate.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ActionId, Candidate};
use crate::env::{ActionQuality, Environment, LatentState};
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityLevels {
    pub optimal: f64,
    pub neutral: f64,
    pub hazard: f64,
}

impl Default for QualityLevels {
    fn default() -> Self {
        Self {
            optimal: 0.8,
            neutral: 0.45,
            hazard: 0.1,
        }
    }
}

impl QualityLevels {
    pub fn of(&self, q: ActionQuality) -> f64 {
        match q {
            ActionQuality::Optimal => self.optimal,
            ActionQuality::Neutral => self.neutral,
            ActionQuality::Hazard => self.hazard,
        }
    }
}

/// Named noise settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Sharp,
    Noisy,
}

impl Regime {
    pub fn eta_v(self) -> f64 {
        match self {
            Regime::Sharp => 0.05,
            Regime::Noisy => 0.35,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifierSpec {
    pub eta_v: f64,
    pub gamma_threshold: f64,
    pub levels: QualityLevels,
    /// Width of the uniform jitter, derived from `eta_v`.
    pub jitter_width: f64,
}

impl VerifierSpec {
    pub fn new(eta_v: f64, gamma_threshold: f64, levels: QualityLevels) -> Result<Self> {
        if !(0.0..0.5).contains(&eta_v) {
            return Err(Error::Config(format!("eta_v must be in [0, 0.5), got {eta_v}")));
        }
        if !(0.0..=1.0).contains(&gamma_threshold) {
            return Err(Error::Config(format!("gamma_threshold must be in [0,1], got {gamma_threshold}")));
        }
        let good: Vec<f64> = [levels.optimal, levels.neutral, levels.hazard]
            .into_iter()
            .filter(|&v| v >= gamma_threshold)
            .collect();
        let bad: Vec<f64> = [levels.optimal, levels.neutral, levels.hazard]
            .into_iter()
            .filter(|&v| v < gamma_threshold)
            .collect();
        if good.is_empty() || bad.is_empty() {
            return Err(Error::Config("gamma_threshold must separate the quality levels".into()));
        }
        let g = good.iter().copied().fold(f64::INFINITY, f64::min);
        let b = bad.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            eta_v,
            gamma_threshold,
            levels,
            jitter_width: calibrate_width(g, b, eta_v),
        })
    }

    pub fn from_regime(regime: Regime) -> Self {
        Self::new(regime.eta_v(), 0.5, QualityLevels::default()).expect("regime constants are valid")
    }

    pub fn is_good(&self, score_base: f64) -> bool {
        score_base >= self.gamma_threshold
    }

    /// Noisy score of a raw base quality.
    pub fn jitter<R: Rng>(&self, base: f64, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        (base + self.jitter_width * (u - 0.5)).clamp(0.0, 1.0)
    }

    /// `V(x, a)`: oracle quality at the latent state plus jitter.
    pub fn score<R: Rng>(&self, env: &Environment, state: &LatentState, a: ActionId, rng: &mut R) -> f64 {
        self.jitter(self.levels.of(env.action_quality(state, a)), rng)
    }

    pub fn best_of_k<R: Rng>(&self, env: &Environment, state: &LatentState, candidates: &[Candidate], rng: &mut R) -> BestOfK {
        let scores: Vec<f64> = candidates.iter().map(|c| self.score(env, state, c.action, rng)).collect();
        let index = argmax_first(&scores);
        BestOfK {
            index,
            action: candidates[index].action,
            score: scores[index],
            scores,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestOfK {
    pub index: usize,
    pub action: ActionId,
    pub score: f64,
    pub scores: Vec<f64>,
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Exact probability that a bad action with base `b` scores at least as high as
/// a good one with base `g`, under independent `U(-w/2, w/2)` jitter and
/// clipping to `[0,1]`. Ties count as misranks.
pub fn misrank_probability(g: f64, b: f64, w: f64) -> f64 {
    if w <= 0.0 {
        return if b >= g { 1.0 } else { 0.0 };
    }
    let half = 0.5 * w;
    // probability that clip(b + U) >= c for a clipped good score c
    let tail = |c: f64| -> f64 {
        if c <= 0.0 {
            1.0
        } else if c > 1.0 {
            0.0
        } else {
            ((b + half - c) / w).clamp(0.0, 1.0)
        }
    };
    let lo = g - half;
    let hi = g + half;
    let mut total = 0.0;
    if lo < 0.0 {
        total += (0.0 - lo).min(w) / w * tail(0.0);
    }
    if hi > 1.0 {
        total += (hi - 1.0).min(w) / w * tail(1.0);
    }
    // interior part: integrand is piecewise linear, so trapezoids on the pieces are exact
    let a = lo.max(0.0);
    let c = hi.min(1.0);
    if c > a {
        let mut knots = alloc::vec![a, c];
        for k in [b - half, b + half] {
            if k > a && k < c {
                knots.push(k);
            }
        }
        knots.sort_by(f64::total_cmp);
        for pair in knots.windows(2) {
            let (x0, x1) = (pair[0], pair[1]);
            total += (x1 - x0) / w * 0.5 * (tail(x0) + tail(x1));
        }
    }
    total.clamp(0.0, 1.0)
}

/// Largest jitter width whose misrank probability stays at or below `eta`.
pub fn calibrate_width(g: f64, b: f64, eta: f64) -> f64 {
    if eta <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, 20.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if misrank_probability(g, b, mid) <= eta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Normalized entropy of `softmax(scores)`; 1 iff all scores are equal.
pub fn pseudo_entropy(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::InvalidInput(format!("pseudo-entropy needs K >= 2 scores, got {}", scores.len())));
    }
    let p = math::softmax(scores);
    Ok((math::entropy(&p) / math::ln(scores.len() as f64)).clamp(0.0, 1.0))
}

/// Lower bound on best-of-K picking a good candidate.
pub fn best_of_k_bound(mu: f64, k: usize, eta_v: f64) -> f64 {
    let k = k as f64;
    1.0 - libm::pow(1.0 - mu, k) - k * (k - 1.0) * eta_v / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn misrank_matches_unclipped_closed_form() {
        // far from the edges the difference of uniforms is triangular
        let (g, b, w) = (0.55, 0.45, 0.2);
        let d: f64 = g - b;
        let expected = (w - d) * (w - d) / (2.0 * w * w);
        assert!((misrank_probability(g, b, w) - expected).abs() < 1e-12);
    }

    #[test]
    fn misrank_matches_monte_carlo_with_clipping() {
        let spec = VerifierSpec::from_regime(Regime::Noisy);
        let w = spec.jitter_width;
        let mut r = rng::stream(5, &[]);
        let n = 200_000;
        let mut hits = 0;
        for _ in 0..n {
            let g = spec.jitter(0.8, &mut r);
            let b = spec.jitter(0.45, &mut r);
            hits += (b >= g) as usize;
        }
        let p = misrank_probability(0.8, 0.45, w);
        assert!((hits as f64 / n as f64 - p).abs() < 0.005);
        assert!(p <= 0.35 + 1e-9);
    }

    #[test]
    fn eta_point_one_misrank_rate() {
        let spec = VerifierSpec::new(0.1, 0.5, QualityLevels::default()).unwrap();
        let mut r = rng::stream(6, &[]);
        let n = 100_000;
        let mut bad = 0;
        for i in 0..n {
            let worse = if i % 2 == 0 { 0.45 } else { 0.1 };
            bad += (spec.jitter(worse, &mut r) >= spec.jitter(0.8, &mut r)) as usize;
        }
        assert!(bad as f64 / n as f64 <= 0.11);
    }

    #[test]
    fn zero_noise_is_exact() {
        let spec = VerifierSpec::new(0.0, 0.5, QualityLevels::default()).unwrap();
        let mut r = rng::stream(1, &[]);
        assert_eq!(spec.jitter_width, 0.0);
        assert!(spec.jitter(0.8, &mut r) >= 0.5);
        assert!(spec.jitter(0.1, &mut r) < 0.5);
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(VerifierSpec::new(0.5, 0.5, QualityLevels::default()).is_err());
        assert!(VerifierSpec::new(0.1, 0.95, QualityLevels::default()).is_err());
    }

    #[test]
    fn argmax_ties() {
        assert_eq!(argmax_first(&[0.3, 0.3, 0.3]), 0);
        assert_eq!(argmax_first(&[0.1, 0.7, 0.7]), 1);
        assert_eq!(argmax_first(&[0.9]), 0);
    }

    #[test]
    fn pseudo_entropy_examples() {
        assert!((pseudo_entropy(&[0.4; 5]).unwrap() - 1.0).abs() < 1e-12);
        assert!(pseudo_entropy(&[1.0, -19.0, -19.0, -19.0, -19.0]).unwrap() < 0.01);
        let s = [0.9, 0.1, 0.1, 0.1, 0.1];
        let z: f64 = s.iter().map(|v| libm::exp(*v)).sum();
        let h: f64 = s.iter().map(|v| {
            let p = libm::exp(*v) / z;
            -p * libm::log(p)
        }).sum::<f64>() / libm::log(5.0);
        assert!((pseudo_entropy(&s).unwrap() - h).abs() < 1e-9);
        assert!(pseudo_entropy(&[0.5]).is_err());
    }
}
