//! The 15-slot risk feature map and its inference-time masks.
//!
//! | slot | meaning |
//! |------|---------|
//! | 0 | policy entropy at `x_t`, divided by `ln |A|` |
//! | 1, 2 | mean and std of candidate log-probs (clipped to `[-20, 0]`) |
//! | 3..=7 | verifier mean, std, spread, best, worst |
//! | 8 | share of candidates equal to the modal candidate |
//! | 9 | entropy of the candidate action histogram, divided by `ln min(K, |A|)` |
//! | 10 | `t / H` |
//! | 11 | `t / H_max` |
//! | 12 | tokens seen / max context tokens |
//! | 13 | goal tokens / max goal length |
//! | 14 | pseudo-entropy of the verifier scores |

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::domain::{Candidate, Context, EnvConfig, RiskFeatures, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::math;
use crate::policy::SoftmaxPolicy;
use crate::verifier::pseudo_entropy;

pub const LOG_PROB_FLOOR: f64 = -20.0;
/// Scale of the absolute step index slot.
pub const MAX_HORIZON: usize = 64;
/// Longest observation the environment can emit: clean part plus appended blocks.
pub const MAX_OBSERVATION_LEN: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureLimits {
    pub horizon: usize,
    pub max_context_tokens: usize,
    pub max_goal_len: usize,
}

impl FeatureLimits {
    pub fn new(config: &EnvConfig) -> Self {
        Self {
            horizon: config.horizon,
            max_context_tokens: config.max_subgoals + config.horizon * MAX_OBSERVATION_LEN,
            max_goal_len: config.max_subgoals,
        }
    }
}

/// `f_t = Φ(x_t, π_θ, V)`.
pub fn extract(
    x: &Context,
    policy: &SoftmaxPolicy,
    candidates: &[Candidate],
    scores: &[f64],
    limits: &FeatureLimits,
) -> Result<RiskFeatures> {
    let k = candidates.len();
    if k < 2 || scores.len() != k {
        return Err(Error::InvalidInput(format!(
            "feature extraction needs K >= 2 aligned candidates and scores, got {k} and {}",
            scores.len()
        )));
    }
    let a_count = policy.action_count();
    let mut f = [0.0; FEATURE_DIM];

    let p = policy.action_distribution(x);
    f[0] = (math::entropy(&p) / math::ln(a_count as f64)).clamp(0.0, 1.0);

    let lps: Vec<f64> = candidates.iter().map(|c| c.log_prob.clamp(LOG_PROB_FLOOR, 0.0)).collect();
    f[1] = math::mean(&lps);
    f[2] = math::std_dev(&lps);

    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let worst = scores.iter().copied().fold(f64::INFINITY, f64::min);
    f[3] = math::mean(scores);
    f[4] = math::std_dev(scores);
    f[5] = best - worst;
    f[6] = best;
    f[7] = worst;

    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for c in candidates {
        *counts.entry(c.action).or_default() += 1;
    }
    let modal = counts.values().copied().max().unwrap_or(0);
    f[8] = modal as f64 / k as f64;
    let hist: Vec<f64> = counts.values().map(|&c| c as f64 / k as f64).collect();
    let support = k.min(a_count);
    f[9] = if support > 1 {
        (math::entropy(&hist) / math::ln(support as f64)).clamp(0.0, 1.0)
    } else {
        0.0
    };

    let t = x.step_index as f64;
    f[10] = (t / limits.horizon as f64).clamp(0.0, 1.0);
    f[11] = t / MAX_HORIZON as f64;
    f[12] = (x.token_count() as f64 / limits.max_context_tokens as f64).clamp(0.0, 1.0);
    f[13] = (x.goal.len() as f64 / limits.max_goal_len as f64).clamp(0.0, 1.0);
    f[14] = pseudo_entropy(scores)?;
    Ok(RiskFeatures(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMask {
    Full,
    NoEntropy,
    PseudoEntropy,
    VerifierOnly,
    EntropyOnly,
    LogProbOnly,
    StepContextOnly,
    NoVerifier,
}

impl FeatureMask {
    pub const ALL: [FeatureMask; 8] = [
        FeatureMask::Full,
        FeatureMask::NoEntropy,
        FeatureMask::PseudoEntropy,
        FeatureMask::VerifierOnly,
        FeatureMask::EntropyOnly,
        FeatureMask::LogProbOnly,
        FeatureMask::StepContextOnly,
        FeatureMask::NoVerifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureMask::Full => "full",
            FeatureMask::NoEntropy => "no_entropy",
            FeatureMask::PseudoEntropy => "pseudo_entropy",
            FeatureMask::VerifierOnly => "verifier_only",
            FeatureMask::EntropyOnly => "entropy_only",
            FeatureMask::LogProbOnly => "log_prob_only",
            FeatureMask::StepContextOnly => "step_context_only",
            FeatureMask::NoVerifier => "no_verifier",
        }
    }
}

fn keep_only(f: &RiskFeatures, keep: &[usize]) -> RiskFeatures {
    let mut out = [0.0; FEATURE_DIM];
    for &i in keep {
        out[i] = f.0[i];
    }
    RiskFeatures(out)
}

fn zero(f: &RiskFeatures, slots: &[usize]) -> RiskFeatures {
    let mut out = *f;
    for &i in slots {
        out.0[i] = 0.0;
    }
    out
}

pub fn apply_mask(f: &RiskFeatures, mask: FeatureMask) -> RiskFeatures {
    match mask {
        FeatureMask::Full => *f,
        FeatureMask::NoEntropy => zero(f, &[0, 1, 2, 9]),
        FeatureMask::PseudoEntropy => {
            let mut out = zero(f, &[0, 1, 2, 9]);
            out.0[0] = f.0[14];
            out
        }
        FeatureMask::VerifierOnly => keep_only(f, &[3, 4, 5, 6, 7, 14]),
        FeatureMask::EntropyOnly => keep_only(f, &[0, 9]),
        FeatureMask::LogProbOnly => keep_only(f, &[1, 2]),
        FeatureMask::StepContextOnly => keep_only(f, &[10, 11, 12, 13]),
        FeatureMask::NoVerifier => zero(f, &[3, 4, 5, 6, 7, 14]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{PerturbationSeed, TaskId};
    use crate::env::Environment;
    use alloc::vec;

    fn setup() -> (Environment, SoftmaxPolicy, Context, FeatureLimits) {
        let env = Environment::generate(EnvConfig::default(), 5, 1).unwrap();
        let pol = SoftmaxPolicy::zeros(&env.config);
        let (_, ctx) = env.reset(TaskId(0), PerturbationSeed(3)).unwrap();
        let limits = FeatureLimits::new(&env.config);
        (env, pol, ctx, limits)
    }

    fn cands(actions: &[usize]) -> Vec<Candidate> {
        actions
            .iter()
            .map(|&a| Candidate {
                action: a,
                log_prob: -libm::log(6.0),
            })
            .collect()
    }

    #[test]
    fn hand_built_step() {
        let (_, pol, ctx, limits) = setup();
        let scores = [0.2, 0.4, 0.6, 0.8, 1.0];
        let f = extract(&ctx, &pol, &cands(&[0, 1, 2, 3, 4]), &scores, &limits).unwrap();
        assert!((f.0[0] - 1.0).abs() < 1e-12);
        assert!((f.0[3] - 0.6).abs() < 1e-12);
        assert!((f.0[5] - 0.8).abs() < 1e-12);
        assert_eq!(f.0[6], 1.0);
        assert_eq!(f.0[7], 0.2);
        assert!((f.0[9] - 1.0).abs() < 1e-12);

        let masked = apply_mask(&f, FeatureMask::PseudoEntropy);
        assert!((masked.0[0] - pseudo_entropy(&scores).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn identical_candidates() {
        let (_, pol, ctx, limits) = setup();
        let f = extract(&ctx, &pol, &cands(&[2; 5]), &[0.5; 5], &limits).unwrap();
        assert_eq!(f.0[8], 1.0);
        assert_eq!(f.0[9], 0.0);
        assert_eq!(f.0[2], 0.0);
    }

    #[test]
    fn masks() {
        let f = RiskFeatures(core::array::from_fn(|i| i as f64 + 1.0));
        assert_eq!(apply_mask(&f, FeatureMask::Full), f);
        let nv = apply_mask(&f, FeatureMask::NoVerifier);
        assert!(nv.0[3..8].iter().all(|&v| v == 0.0));
        for m in FeatureMask::ALL {
            let once = apply_mask(&f, m);
            assert_eq!(apply_mask(&once, m), once, "{m:?}");
        }
    }

    #[test]
    fn permutation_invariance() {
        let (_, pol, ctx, limits) = setup();
        let c = vec![
            Candidate { action: 0, log_prob: -1.0 },
            Candidate { action: 3, log_prob: -2.5 },
            Candidate { action: 0, log_prob: -1.0 },
            Candidate { action: 5, log_prob: -30.0 },
        ];
        let s = [0.1, 0.9, 0.3, 0.5];
        let base = extract(&ctx, &pol, &c, &s, &limits).unwrap();
        let order = [3, 1, 0, 2];
        let c2: Vec<Candidate> = order.iter().map(|&i| c[i]).collect();
        let s2: Vec<f64> = order.iter().map(|&i| s[i]).collect();
        let permuted = extract(&ctx, &pol, &c2, &s2, &limits).unwrap();
        for i in 0..FEATURE_DIM {
            assert!((base.0[i] - permuted.0[i]).abs() < 1e-12);
        }
        assert!(base.0[1] >= LOG_PROB_FLOOR);
    }

    #[test]
    fn rejects_single_candidate() {
        let (_, pol, ctx, limits) = setup();
        assert!(extract(&ctx, &pol, &cands(&[1]), &[0.5], &limits).is_err());
    }
}
