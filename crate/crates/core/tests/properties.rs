use proptest::prelude::*;
use riskroute_core::domain::{CostSpec, EnvConfig, PerturbationSeed, RiskFeatures, TaskId, FEATURE_DIM};
use riskroute_core::env::Environment;
use riskroute_core::eval::{auroc, pareto_front};
use riskroute_core::features::{apply_mask, FeatureMask};
use riskroute_core::math;
use riskroute_core::router::loss::{bayes_threshold, cvar, route_surrogate};
use riskroute_core::verifier::{best_of_k_bound, VerifierSpec, QualityLevels};
use riskroute_core::domain::derive_splits;

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        if s <= 0.0 {
            let mut p = vec![0.0; v.len()];
            p[0] = 1.0;
            p
        } else {
            v.iter().map(|x| x / s).collect()
        }
    })
}

fn pair(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..=max).prop_flat_map(|n| (distribution(n), distribution(n)))
}

proptest! {
    #[test]
    fn tv_is_bounded_by_jsd((p, q) in pair(10)) {
        let tv = math::total_variation(&p, &q);
        let js = math::jsd(&p, &q);
        prop_assert!(tv <= (2.0 * js).sqrt() + 1e-9, "tv {tv} jsd {js}");
        prop_assert!(js >= -1e-12 && js <= core::f64::consts::LN_2 + 1e-12);
        prop_assert!((math::jsd(&q, &p) - js).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = math::softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let lp = math::log_softmax(&logits);
        for (a, b) in p.iter().zip(&lp) {
            prop_assert!((a.ln().max(-700.0) - b.max(-700.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn cvar_sits_between_mean_and_max(values in prop::collection::vec(-5.0f64..5.0, 1..60), alpha in 0.01f64..=1.0) {
        let c = cvar(&values, alpha).unwrap();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(c >= mean - 1e-9 && c <= max + 1e-9);
        // the full tail is the mean
        prop_assert!((cvar(&values, 1.0).unwrap() - mean).abs() < 1e-9);
    }

    #[test]
    fn cvar_grows_as_the_tail_narrows(values in prop::collection::vec(0.0f64..1.0, 2..60), a in 0.01f64..1.0, b in 0.01f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(cvar(&values, lo).unwrap() >= cvar(&values, hi).unwrap() - 1e-12);
    }

    #[test]
    fn masks_are_idempotent(raw in prop::array::uniform15(-3.0f64..3.0)) {
        let f = RiskFeatures(raw);
        for mask in FeatureMask::ALL {
            let once = apply_mask(&f, mask);
            prop_assert_eq!(apply_mask(&once, mask), once);
        }
        prop_assert_eq!(apply_mask(&f, FeatureMask::Full), f);
    }

    #[test]
    fn bayes_threshold_minimizes_the_pointwise_surrogate(
        c_slm in 0.01f64..5.0, delta in -2.0f64..20.0, kappa in 0.1f64..20.0, q in 0.0f64..=1.0,
    ) {
        let c = CostSpec { c_slm, c_llm: (c_slm + delta).max(0.001), kappa };
        let tau = bayes_threshold(&c);
        prop_assert!((0.0..=1.0).contains(&tau));
        let expected = |d: f64| q * route_surrogate(d, 1, &c) + (1.0 - q) * route_surrogate(d, 0, &c);
        let chosen = expected((q >= tau) as u8 as f64);
        prop_assert!(chosen <= expected(0.0).min(expected(1.0)) + 1e-9 * kappa.max(1.0) || (q - tau).abs() < 1e-9);
    }

    #[test]
    fn best_of_k_bound_never_exceeds_the_noiseless_rate(mu in 0.0f64..=1.0, k in 1usize..20, eta in 0.0f64..0.5) {
        // noise only lowers the noiseless value 1 - (1 - mu)^K
        let clean = 1.0 - (1.0 - mu).powi(k as i32);
        prop_assert!((best_of_k_bound(mu, k, 0.0) - clean).abs() < 1e-12);
        prop_assert!(best_of_k_bound(mu, k, eta) <= clean + 1e-12);
        prop_assert!(best_of_k_bound(mu, k + 1, 0.0) >= clean - 1e-12);
    }

    #[test]
    fn verifier_scores_stay_in_unit_interval(eta in 0.0f64..0.4, base in 0.0f64..=1.0, seed in any::<u64>()) {
        let spec = VerifierSpec::new(eta, 0.5, QualityLevels::default()).unwrap();
        let mut r = riskroute_core::rng::stream(seed, &[]);
        for _ in 0..20 {
            let s = spec.jitter(base, &mut r);
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn pareto_front_members_are_undominated(points in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20)) {
        let front = pareto_front(&points);
        prop_assert!(!front.is_empty());
        for &i in &front {
            for (j, q) in points.iter().enumerate() {
                let p = points[i];
                prop_assert!(!(j != i && q.0 <= p.0 && q.1 >= p.1 && (q.0 < p.0 || q.1 > p.1)));
            }
        }
    }

    #[test]
    fn auroc_matches_pairwise_count(data in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..80)) {
        let scores: Vec<f64> = data.iter().map(|d| (d.0 * 20.0).round() / 20.0).collect();
        let labels: Vec<u8> = data.iter().map(|d| d.1 as u8).collect();
        let pos: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &y)| y == 1).map(|(&s, _)| s).collect();
        let neg: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &y)| y == 0).map(|(&s, _)| s).collect();
        match auroc(&scores, &labels) {
            Ok(a) => {
                let mut wins = 0.0;
                for p in &pos {
                    for n in &neg {
                        wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
                    }
                }
                prop_assert!((a - wins / (pos.len() * neg.len()) as f64).abs() < 1e-12);
            }
            Err(_) => prop_assert!(pos.is_empty() || neg.is_empty()),
        }
    }

    #[test]
    fn splits_partition_the_tasks(n in 3usize..200, seed in any::<u64>()) {
        let ids: Vec<TaskId> = (0..n as u32).map(TaskId).collect();
        let s = derive_splits(&ids, [0.7, 0.15, 0.15], seed).unwrap();
        let mut all: Vec<TaskId> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, ids.clone());
        prop_assert_eq!(derive_splits(&ids, [0.7, 0.15, 0.15], seed).unwrap(), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn environment_steps_are_deterministic(seed in any::<u64>(), z in any::<u64>(), actions in prop::collection::vec(0usize..6, 1..20)) {
        let env = Environment::generate(EnvConfig::default(), 4, seed).unwrap();
        let run = || {
            let (mut s, _) = env.reset(TaskId(0), PerturbationSeed(z)).unwrap();
            let mut obs = Vec::new();
            for (t, &a) in actions.iter().enumerate() {
                let out = env.step(&s, a, PerturbationSeed(z), t).unwrap();
                obs.push(out.observation.clone());
                s = out.state;
                if out.terminal {
                    break;
                }
            }
            (s, obs)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn paired_views_share_the_latent_state(seed in any::<u64>(), z1 in any::<u64>(), z2 in any::<u64>(), actions in prop::collection::vec(0usize..6, 1..10)) {
        let env = Environment::generate(EnvConfig::default(), 2, seed).unwrap();
        let (mut a, _) = env.reset(TaskId(0), PerturbationSeed(z1)).unwrap();
        let (mut b, _) = env.reset(TaskId(0), PerturbationSeed(z2)).unwrap();
        for (t, &act) in actions.iter().enumerate() {
            let oa = env.step(&a, act, PerturbationSeed(z1), t).unwrap();
            let ob = env.step(&b, act, PerturbationSeed(z2), t).unwrap();
            prop_assert_eq!(&oa.state, &ob.state);
            a = oa.state;
            b = ob.state;
            if oa.terminal {
                break;
            }
        }
    }
}

#[test]
fn disjoint_one_hots_hit_the_extremes() {
    let p = [1.0, 0.0];
    let q = [0.0, 1.0];
    assert!((math::total_variation(&p, &q) - 1.0).abs() < 1e-12);
    assert!((math::jsd(&p, &q) - core::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(FEATURE_DIM, 15);
}
