//! Property and oracle checks behind `verify-theory` and the acceptance suite.
//!
//! Each check builds its own planted data, so it needs no pipeline artifacts
//! except where noted, and returns a [`Check`] instead of panicking.

use rand::Rng;
use riskroute_core::distill::{dpo_loss_from_margin, recovery_objective, transfer_checks, ConsistencyPair, PairSource, PreferencePair};
use riskroute_core::domain::{CVaRSpec, CostSpec, EnvConfig, PerturbationSeed, FEATURE_DIM};
use riskroute_core::env::Environment;
use riskroute_core::eval::recount_llm_rate;
use riskroute_core::math;
use riskroute_core::policy::{bc_dataset, bc_loss_and_grad, collect_teacher_trajectories, train_bc, FrozenReference, PolicyStage, SoftmaxPolicy, TeacherPolicy};
use riskroute_core::rng::{self, Stream};
use riskroute_core::router::loss::route_surrogate;
use riskroute_core::router::train::lagrangian;
use riskroute_core::router::{bayes_threshold, fit_temperature, train_router, RouterNet, RoutingData, TrainSpec};
use riskroute_core::runtime::{collect_routing_dataset, routing_examples, Agent, RoutingPolicy};
use riskroute_core::verifier::{best_of_k_bound, QualityLevels, VerifierSpec};
use riskroute_core::distill::consistency_pairs;
use serde::Serialize;

use crate::config::Config;
use crate::error::CliResult;
use crate::pipeline;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!("[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Clipped planted risk `q*(f)`.
pub fn planted_q(f: f64) -> f64 {
    f.clamp(0.05, 0.95)
}

/// `n` planted 1-D examples spread round-robin over `seeds` perturbation seeds.
pub fn planted_data(n: usize, seeds: u64, rng: &mut Stream) -> RoutingData {
    let mut d = RoutingData {
        dim: 1,
        inputs: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        seed_ids: Vec::with_capacity(n),
    };
    for i in 0..n {
        let f: f64 = rng.gen();
        d.inputs.push(f);
        d.labels.push((rng.gen::<f64>() < planted_q(f)) as u8);
        d.seed_ids.push(i as u64 % seeds);
    }
    d
}

/// Sizes of the planted calibration experiment.
#[derive(Debug, Clone, Copy)]
pub struct PlantedSize {
    pub examples: usize,
    pub seeds: u64,
    pub validation: usize,
}

impl PlantedSize {
    pub const FULL: PlantedSize = PlantedSize {
        examples: 100_000,
        seeds: 50,
        validation: 20_000,
    };
}

/// Router trained and temperature-scaled on the planted model.
pub fn planted_router(size: PlantedSize, seed: u64) -> CliResult<RouterNet> {
    let mut r = rng::stream(seed, &[0xCA1]);
    let train = planted_data(size.examples, size.seeds, &mut r);
    let valid = planted_data(size.validation, size.seeds, &mut r);
    let spec = TrainSpec {
        seed,
        ..TrainSpec::default()
    };
    let (mut net, _) = train_router(&train, &spec)?;
    fit_temperature(&mut net, &valid)?;
    Ok(net)
}

/// Evenly spaced evaluation points on `[0, 1]`.
fn grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

pub fn mean_abs_calibration_error(net: &RouterNet) -> CliResult<f64> {
    let fs = grid(10_000);
    let probs = net.probs_eval(&fs)?;
    Ok(fs.iter().zip(&probs).map(|(&f, &p)| (p - planted_q(f)).abs()).sum::<f64>() / fs.len() as f64)
}

pub fn calibration_recovery(net: &RouterNet) -> CliResult<Check> {
    let err = mean_abs_calibration_error(net)?;
    Ok(Check::new(
        "calibration recovery",
        err <= 0.05,
        format!("E|r - q*| = {err:.4} (limit 0.05), T = {:.3}", net.temperature),
    ))
}

/// Expected surrogate of the rule `1[q* ≥ τ]` with `f ~ U[0, 1]`.
fn expected_threshold_cost(tau: f64, costs: &CostSpec, fs: &[f64]) -> f64 {
    fs.iter()
        .map(|&f| {
            let q = planted_q(f);
            let d = (q >= tau) as u8 as f64;
            // expectation over y ~ Bernoulli(q)
            q * route_surrogate(d, 1, costs) + (1.0 - q) * route_surrogate(d, 0, costs)
        })
        .sum::<f64>()
        / fs.len() as f64
}

/// Cost specs covering both clamp regimes and the interior.
pub fn threshold_cost_specs(seed: u64) -> Vec<CostSpec> {
    let mut r = rng::stream(seed, &[0x7A0]);
    let mut out = Vec::new();
    // interior: c_llm − c_slm ∈ (0, κ)
    for _ in 0..3 {
        let c_slm: f64 = r.gen_range(0.1..2.0);
        let c_llm = c_slm + r.gen_range(1.0..60.0);
        let kappa = (c_llm - c_slm) / r.gen_range(0.08..0.92);
        out.push(CostSpec { c_slm, c_llm, kappa });
    }
    // upper clamp: teacher dearer than any failure penalty
    let c_slm: f64 = r.gen_range(0.1..2.0);
    let kappa: f64 = r.gen_range(1.0..10.0);
    out.push(CostSpec {
        c_slm,
        c_llm: c_slm + kappa * r.gen_range(1.2..3.0),
        kappa,
    });
    // lower clamp: teacher no dearer than the local model
    let c_llm: f64 = r.gen_range(0.1..2.0);
    out.push(CostSpec {
        c_slm: c_llm + r.gen_range(0.0..1.0),
        c_llm,
        kappa: r.gen_range(1.0..10.0),
    });
    out
}

pub fn threshold_optimality(seed: u64) -> Check {
    let fs = grid(20_000);
    let taus: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let mut worst = String::new();
    let mut ok = true;
    for costs in threshold_cost_specs(seed) {
        let tau_star = bayes_threshold(&costs);
        let values: Vec<f64> = taus.iter().map(|&t| expected_threshold_cost(t, &costs, &fs)).collect();
        let best = values.iter().copied().fold(f64::INFINITY, f64::min);
        let near = taus
            .iter()
            .zip(&values)
            .filter(|(&t, _)| (t - tau_star).abs() <= 0.01 + 1e-12)
            .map(|(_, &v)| v)
            .fold(f64::INFINITY, f64::min);
        let gap = near - best;
        if gap > 1e-12 * best.abs().max(1.0) {
            ok = false;
            worst = format!("τ* = {tau_star:.3} misses grid minimum by {gap:.3e} for {costs:?}");
        }
    }
    Check::new(
        "threshold optimality",
        ok,
        if ok {
            "grid minimum within 0.01 of τ* for 5 cost specs".into()
        } else {
            worst
        },
    )
}

/// Excess expected cost of `1[r ≥ τ*]` over `1[q* ≥ τ*]` against `κ · E|r − q*|`.
pub fn regret_gap(net: &RouterNet, costs: &CostSpec) -> CliResult<(f64, f64)> {
    let fs = grid(10_000);
    let probs = net.probs_eval(&fs)?;
    let tau = bayes_threshold(costs);
    let mut excess = 0.0;
    let mut err = 0.0;
    for (&f, &p) in fs.iter().zip(&probs) {
        let q = planted_q(f);
        let cost = |d: f64| d * costs.c_llm + (1.0 - d) * (costs.c_slm + costs.kappa * q);
        excess += cost((p >= tau) as u8 as f64) - cost((q >= tau) as u8 as f64);
        err += (p - q).abs();
    }
    let n = fs.len() as f64;
    Ok((excess / n, costs.kappa * err / n))
}

pub fn regret_bound(trained: &RouterNet, random_nets: usize, seed: u64) -> CliResult<Check> {
    let costs = CostSpec::default();
    let mut r = rng::stream(seed, &[0x4E6]);
    let mut nets: Vec<RouterNet> = (0..random_nets)
        .map(|_| {
            let mut net = RouterNet::new(1, [16, 8], 0.0, &mut r);
            net.temperature = r.gen_range(0.3..3.0);
            net
        })
        .collect();
    nets.push(trained.clone());
    let mut worst_slack = f64::INFINITY;
    for net in &nets {
        let (excess, bound) = regret_gap(net, &costs)?;
        worst_slack = worst_slack.min(bound + 1e-9 - excess);
    }
    Ok(Check::new(
        "regret bound",
        worst_slack >= 0.0,
        format!("{} routers, min slack κ·E|r-q*| - excess = {worst_slack:.3e}", nets.len()),
    ))
}

fn random_distribution(n: usize, r: &mut Stream) -> Vec<f64> {
    // mix of smooth and sparse shapes to reach the extremes
    let sharp = r.gen_bool(0.3);
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = r.gen();
            if sharp {
                u.powi(8)
            } else {
                u
            }
        })
        .collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        let mut p = vec![0.0; n];
        p[0] = 1.0;
        return p;
    }
    raw.iter().map(|v| v / s).collect()
}

pub fn tv_jsd_lemma(pairs: usize, seed: u64) -> Check {
    let mut r = rng::stream(seed, &[0x75D]);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..pairs {
        let n = r.gen_range(2..=10);
        let p = random_distribution(n, &mut r);
        let q = random_distribution(n, &mut r);
        worst = worst.max(math::total_variation(&p, &q) - math::sqrt(2.0 * math::jsd(&p, &q)));
    }
    let tv = math::total_variation(&[1.0, 0.0], &[0.0, 1.0]);
    let js = math::jsd(&[1.0, 0.0], &[0.0, 1.0]);
    let spot = (tv - 1.0).abs() < 1e-12 && (js - core::f64::consts::LN_2).abs() < 1e-12 && math::sqrt(2.0 * js) >= 1.0;
    Check::new(
        "TV/JSD lemma",
        worst <= 1e-9 && spot,
        format!(
            "max TV - sqrt(2 JSD) = {worst:.3e} over {pairs} pairs; disjoint pair TV = {tv}, sqrt(2 JSD) = {:.4}",
            math::sqrt(2.0 * js)
        ),
    )
}

/// Monte Carlo probability that best-of-K picks a good candidate.
pub fn best_of_k_rate(mu: f64, k: usize, eta: f64, trials: usize, r: &mut Stream) -> CliResult<f64> {
    let levels = QualityLevels::default();
    let spec = VerifierSpec::new(eta, 0.5, levels)?;
    let mut hits = 0usize;
    let mut scores = vec![0.0; k];
    let mut good = vec![false; k];
    for _ in 0..trials {
        for i in 0..k {
            good[i] = r.gen::<f64>() < mu;
            // the closest bad level is the hardest to separate
            let base = if good[i] { levels.optimal } else { levels.neutral };
            scores[i] = spec.jitter(base, r);
        }
        let best = riskroute_core::verifier::argmax_first(&scores);
        hits += good[best] as usize;
    }
    Ok(hits as f64 / trials as f64)
}

pub fn best_of_k_suite(trials: usize, seed: u64) -> CliResult<Check> {
    let mut r = rng::stream(seed, &[0xB0F]);
    let mut worst = f64::INFINITY;
    let mut cells = 0;
    for &mu in &[0.1, 0.3, 0.5] {
        for &k in &[1usize, 3, 5, 10] {
            for &eta in &[0.0, 0.05, 0.1] {
                let p = best_of_k_rate(mu, k, eta, trials, &mut r)?;
                let sigma = math::sqrt(p * (1.0 - p) / trials as f64);
                worst = worst.min(p - (best_of_k_bound(mu, k, eta) - 3.0 * sigma));
                cells += 1;
            }
        }
    }
    Ok(Check::new(
        "best-of-K bound",
        worst >= 0.0,
        format!("{cells} cells × {trials} trials, min P - (bound - 3σ) = {worst:.4}"),
    ))
}

/// Minimizer of the population DPO loss when the observed preference is flipped
/// with probability `eta`; `sign` is the true preference.
pub fn noisy_dpo_margin(eta: f64, sign: f64) -> f64 {
    let grad = |u: f64| {
        let (_, a) = dpo_loss_from_margin(sign * u, 1.0);
        let (_, b) = dpo_loss_from_margin(-sign * u, 1.0);
        (1.0 - eta) * sign * a - eta * sign * b
    };
    let mut u = 0.0;
    for _ in 0..200 {
        // Newton step with the logistic curvature σ(u)σ(-u)
        let s = math::sigmoid(u);
        let h = (s * (1.0 - s)).max(1e-12);
        let step = grad(u) / h;
        u -= step;
        if step.abs() < 1e-14 {
            break;
        }
    }
    u
}

pub fn noisy_dpo_suite() -> Check {
    let mut worst = 0.0f64;
    let mut signs_ok = true;
    for &eta in &[0.05, 0.1, 0.2, 0.3, 0.4] {
        for &sign in &[1.0, -1.0] {
            let u = noisy_dpo_margin(eta, sign);
            signs_ok &= u.signum() == sign;
            worst = worst.max((u - sign * math::ln((1.0 - eta) / eta)).abs());
        }
    }
    Check::new(
        "noisy DPO sign consistency",
        signs_ok && worst <= 1e-2,
        format!("signs match: {signs_ok}; max |u* - log((1-η)/η)| = {worst:.2e}"),
    )
}

/// Relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖, 1e-12)` on chosen coordinates.
fn relative_error<F: FnMut(&[f64]) -> f64>(x: &[f64], grad: &[f64], coords: &[usize], mut f: F) -> f64 {
    let h = 1e-6;
    let mut x = x.to_vec();
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        num += (grad[i] - fd) * (grad[i] - fd);
        da += grad[i] * grad[i];
        db += fd * fd;
    }
    math::sqrt(num) / math::sqrt(da.max(db)).max(1e-12)
}

/// Small environment, pool, and policy for gradient checks.
struct GradFixture {
    policy: SoftmaxPolicy,
    reference: FrozenReference,
    prefs: Vec<PreferencePair>,
    cons: Vec<ConsistencyPair>,
    demos: Vec<riskroute_core::policy::Demonstration>,
}

fn grad_fixture(seed: u64) -> CliResult<GradFixture> {
    let env = Environment::generate(EnvConfig::default(), 6, seed)?;
    let tasks = env.task_ids();
    let pool = collect_teacher_trajectories(&env, &tasks, 3, &TeacherPolicy::default(), seed)?;
    let policy = SoftmaxPolicy::zeros(&env.config);
    let demos = bc_dataset(&policy.map, &pool);
    let cons = consistency_pairs(&env, &pool)?;
    let mut r = rng::stream(seed, &[0x9AD]);
    let prefs = pool
        .perturbed
        .iter()
        .flat_map(|e| e.steps.iter().map(move |s| (e, s)))
        .take(60)
        .map(|(e, s)| {
            let a_plus = r.gen_range(0..6);
            PreferencePair {
                context: s.context.clone(),
                a_plus,
                a_minus: (a_plus + r.gen_range(1..6)) % 6,
                source: PairSource::VerifierRanked,
                task: e.task,
                seed: e.seed,
                generator_hash: [0; 32],
            }
        })
        .collect();
    let mut reference_policy = policy.clone();
    for p in &mut reference_policy.params {
        *p = r.gen_range(-0.5..0.5);
    }
    Ok(GradFixture {
        reference: FrozenReference::new(&reference_policy),
        policy,
        prefs,
        cons,
        demos,
    })
}

/// Worst relative error over `points` random parameter vectors for BC, DPO,
/// consistency, and the router network.
pub fn gradient_errors(points: usize, seed: u64) -> CliResult<[(&'static str, f64); 4]> {
    let fx = grad_fixture(seed)?;
    let mut r = rng::stream(seed, &[0x6AD]);
    let all: Vec<usize> = (0..fx.policy.params.len()).collect();
    let mut worst = [("bc", 0.0f64), ("dpo", 0.0), ("consistency", 0.0), ("router", 0.0)];
    let with = |theta: &[f64]| {
        let mut p = fx.policy.clone();
        p.params.copy_from_slice(theta);
        p
    };
    for _ in 0..points {
        let theta: Vec<f64> = (0..fx.policy.params.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let p = with(&theta);
        let (_, g) = bc_loss_and_grad(&p, &fx.demos, true);
        worst[0].1 = worst[0].1.max(relative_error(&theta, &g, &all, |t| bc_loss_and_grad(&with(t), &fx.demos, false).0));
        let (_, g) = recovery_objective(&p, &fx.reference, &fx.prefs, &[], 0.5, 0.0);
        worst[1].1 = worst[1]
            .1
            .max(relative_error(&theta, &g, &all, |t| recovery_objective(&with(t), &fx.reference, &fx.prefs, &[], 0.5, 0.0).0));
        let (_, g) = recovery_objective(&p, &fx.reference, &[], &fx.cons, 0.5, 1.0);
        worst[2].1 = worst[2]
            .1
            .max(relative_error(&theta, &g, &all, |t| recovery_objective(&with(t), &fx.reference, &[], &fx.cons, 0.5, 1.0).0));
        worst[3].1 = worst[3].1.max(router_gradient_error(&mut r)?);
    }
    Ok(worst)
}

fn router_gradient_error(r: &mut Stream) -> CliResult<f64> {
    let rows = 24;
    let mut net = RouterNet::new(FEATURE_DIM, [32, 16], 0.2, r);
    for p in &mut net.params {
        *p += r.gen_range(-0.3..0.3);
    }
    let xs: Vec<f64> = (0..rows * FEATURE_DIM).map(|_| r.gen_range(-1.0..1.0)).collect();
    let labels: Vec<u8> = (0..rows).map(|_| r.gen_bool(0.4) as u8).collect();
    let seed_ids: Vec<u64> = (0..rows as u64).map(|i| i % 6).collect();
    let costs = CostSpec::default();
    let spec = CVaRSpec {
        alpha: 0.3,
        ..CVaRSpec::default()
    };
    let mask_seed: u64 = r.gen();
    let objective = |net: &RouterNet| {
        let cache = net.forward_train(&xs, &mut rng::stream(mask_seed, &[]));
        let probs: Vec<f64> = cache.logits.iter().map(|&z| math::sigmoid(z)).collect();
        let (value, _, dp) = lagrangian(&probs, &labels, &seed_ids, &costs, &spec, 1.7);
        (value, cache, probs, dp)
    };
    let (_, cache, probs, dp) = objective(&net);
    let dlogits: Vec<f64> = dp.iter().zip(&probs).map(|(g, p)| g * p * (1.0 - p)).collect();
    let grad = net.backward(&cache, &dlogits);
    let coords: Vec<usize> = (0..96).map(|_| r.gen_range(0..net.param_count())).collect();
    let theta = net.params.clone();
    let mut probe = net.clone();
    Ok(relative_error(&theta, &grad, &coords, |t| {
        probe.params.copy_from_slice(t);
        objective(&probe).0
    }))
}

pub fn gradient_suite(points: usize, seed: u64) -> CliResult<Check> {
    let errs = gradient_errors(points, seed)?;
    let ok = errs.iter().all(|(_, e)| *e <= 1e-5);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Ok(Check::new("gradient checks", ok, format!("{points} points, worst relative error: {detail}")))
}

/// Reference immutability, stage guards, budget safety, and label recount.
pub fn pipeline_invariants(episodes: usize, seed: u64) -> CliResult<Check> {
    let mut problems = Vec::new();
    let env = Environment::generate(EnvConfig::default(), 12, seed)?;
    let tasks = env.task_ids();
    let teacher = TeacherPolicy::default();
    let pool = collect_teacher_trajectories(&env, &tasks, 2, &teacher, seed)?;
    let (bc, _) = train_bc(&env.config, &pool, &riskroute_core::policy::BcConfig { learning_rate: 2.0, epochs: 20 })?;
    let verifier = VerifierSpec::from_regime(riskroute_core::verifier::Regime::Noisy);
    let dcfg = riskroute_core::distill::DistillConfig {
        epochs: 10,
        ..Default::default()
    };

    // stage guards
    let initial = SoftmaxPolicy::zeros(&env.config);
    if riskroute_core::distill::build_preferences(&initial, &env, &pool, &verifier, &teacher, &dcfg, 5, seed).is_ok() {
        problems.push("pairs accepted an untrained policy".to_string());
    }
    let bc_agent = Agent {
        env: &env,
        slm: &bc,
        teacher: &teacher,
        verifier: &verifier,
        k: 5,
        root: seed,
    };
    if collect_routing_dataset(&bc_agent, &tasks, 1, 0).is_ok() {
        problems.push("routing collection accepted a non-distilled policy".into());
    }

    // frozen reference
    let (prefs, cons, _) = riskroute_core::distill::build_preferences(&bc, &env, &pool, &verifier, &teacher, &dcfg, 5, seed)?;
    let reference = FrozenReference::new(&bc);
    let before = reference.recorded_hash();
    let (distilled, _) = riskroute_core::distill::train_recovery(&bc, &reference, &prefs, &cons, &dcfg)?;
    if reference.verify().is_err() || reference.policy().hash() != before || bc.hash() != before {
        problems.push("reference parameters changed during distillation".into());
    }
    if distilled.stage != PolicyStage::Distilled {
        problems.push("distilled policy lacks its stage tag".into());
    }
    if riskroute_core::distill::train_recovery(&distilled, &FrozenReference::new(&distilled), &prefs, &cons, &dcfg).is_ok() {
        problems.push("distillation accepted a non-BC starting point".into());
    }

    // budget gate and recounts over randomized episodes
    let agent = Agent { slm: &distilled, ..bc_agent };
    let mut r = rng::stream(seed, &[0xB06]);
    let mut over = 0;
    let mut recount = 0;
    for i in 0..episodes {
        let task = tasks[r.gen_range(0..tasks.len())];
        let z = PerturbationSeed(r.gen());
        let budget = if r.gen_bool(0.2) { None } else { Some(r.gen_range(0..6)) };
        let routing = match i % 3 {
            0 => RoutingPolicy::LlmOnly,
            1 => RoutingPolicy::Entropy { threshold: r.gen() },
            _ => RoutingPolicy::Heuristic { threshold: r.gen() },
        };
        let e = agent.run_episode(task, z, &routing, budget)?;
        if budget.is_some_and(|b| e.llm_calls > b) {
            over += 1;
        }
        if e.llm_calls != e.llm_steps() || e.validate().is_err() {
            recount += 1;
        }
        let rate = recount_llm_rate(std::slice::from_ref(&e));
        let expected = if e.steps.is_empty() { 0.0 } else { e.llm_calls as f64 / e.steps.len() as f64 };
        if (rate - expected).abs() > 1e-12 {
            recount += 1;
        }
    }
    if over > 0 {
        problems.push(format!("{over} episodes exceeded their budget"));
    }
    if recount > 0 {
        problems.push(format!("{recount} episodes failed the LLM-call recount"));
    }

    // routing labels: every step carries 1 − success of its own episode
    let (examples, rollouts) = collect_routing_dataset(&agent, &tasks, 3, 9)?;
    let expected: Vec<u8> = rollouts
        .iter()
        .flat_map(|e| std::iter::repeat_n((!e.success) as u8, e.steps.len()))
        .collect();
    if examples.iter().map(|e| e.label).collect::<Vec<_>>() != expected {
        problems.push("routing labels do not recount".into());
    }
    if routing_examples(&rollouts)? != examples {
        problems.push("routing examples are not a function of the rollouts".into());
    }

    Ok(Check::new(
        "pipeline invariants",
        problems.is_empty(),
        if problems.is_empty() {
            format!("guards fire, reference frozen, {episodes} budgeted episodes within cap, labels recount")
        } else {
            problems.join("; ")
        },
    ))
}

/// Consistency transfer bound on held-out replays, and the effect of the
/// consistency weight on cross-seed divergence.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyEffect {
    pub checks: usize,
    pub worst_slack: f64,
    pub jsd_without: f64,
    pub jsd_with: f64,
}

pub fn consistency_effect(cfg: &Config) -> CliResult<ConsistencyEffect> {
    let (env, split) = pipeline::gen_tasks(cfg)?;
    let pool = pipeline::collect(cfg, &env, &split)?;
    let (bc, _) = pipeline::behavior_clone(cfg, &env, &pool)?;
    let (prefs, cons, _) = pipeline::build_pairs(cfg, &env, &pool, &bc)?;
    let mut off = cfg.distill;
    off.lambda_cons = 0.0;
    let (without, _) = pipeline::distill(&off, &bc, &prefs, &cons)?;
    let (with, _) = pipeline::distill(&cfg.distill, &bc, &prefs, &cons)?;

    // held-out replays with fresh seeds
    let test_pool = collect_teacher_trajectories(&env, &split.test, cfg.pipeline.pool_seeds_per_task, &cfg.policy.teacher, cfg.pipeline.seed ^ 0x7E57)?;
    let test_cons = consistency_pairs(&env, &test_pool)?;
    let checks = transfer_checks(&with, env.config.horizon, &test_cons);
    let worst_slack = checks
        .iter()
        .map(|c| c.bound + 1e-6 - c.risk_gap)
        .fold(f64::INFINITY, f64::min);
    let mean_jsd = |p: &SoftmaxPolicy| riskroute_core::distill::consistency_loss(p, &test_cons);
    Ok(ConsistencyEffect {
        checks: checks.len(),
        worst_slack,
        jsd_without: mean_jsd(&without),
        jsd_with: mean_jsd(&with),
    })
}

pub fn consistency_suite(cfg: &Config) -> CliResult<Check> {
    let e = consistency_effect(cfg)?;
    Ok(Check::new(
        "consistency transfer",
        e.worst_slack >= 0.0 && e.jsd_with < e.jsd_without,
        format!(
            "{} replay pairs, min slack {:.3e}; mean JSD {:.5} (λ_cons = {}) vs {:.5} (λ_cons = 0)",
            e.checks, e.worst_slack, e.jsd_with, cfg.distill.lambda_cons, e.jsd_without
        ),
    ))
}

/// Clustered planted routing data: each seed has a latent risk level shared by
/// all of its steps, one episode-level label, and noisy step features.
pub fn clustered_data(seeds: u64, steps: usize, rng: &mut Stream) -> RoutingData {
    let mut d = RoutingData {
        dim: 2,
        inputs: Vec::new(),
        labels: Vec::new(),
        seed_ids: Vec::new(),
    };
    for s in 0..seeds {
        let rho: f64 = rng.gen();
        let y = (rng.gen::<f64>() < rho) as u8;
        for t in 0..steps {
            d.inputs.push((rho + rng.gen_range(-0.25..0.25)).clamp(0.0, 1.0));
            d.inputs.push(t as f64 / steps as f64);
            d.labels.push(y);
            d.seed_ids.push(s);
        }
    }
    d
}

/// Escalation rate of routers trained under each `(α, ε)`, evaluated at the
/// Bayes threshold on one fixed set; one row per training seed.
pub fn cvar_knob(grid: &[(f64, f64)], training_seeds: &[u64], epochs: usize) -> CliResult<Vec<Vec<f64>>> {
    let mut r = rng::stream(0xC4A, &[]);
    let train = clustered_data(400, 20, &mut r);
    let eval = clustered_data(400, 20, &mut r);
    let mut out = Vec::new();
    for &seed in training_seeds {
        let mut row = Vec::new();
        for &(alpha, epsilon) in grid {
            let spec = TrainSpec {
                seed,
                epochs,
                batch_steps: 1024,
                cvar: CVaRSpec {
                    alpha,
                    epsilon,
                    ..CVaRSpec::default()
                },
                ..TrainSpec::default()
            };
            let (net, _) = train_router(&train, &spec)?;
            let tau = bayes_threshold(&spec.costs);
            let probs = net.probs_eval(&eval.inputs)?;
            row.push(probs.iter().filter(|&&p| p >= tau).count() as f64 / probs.len() as f64);
        }
        out.push(row);
    }
    Ok(out)
}

pub const CVAR_KNOB_GRID: [(f64, f64); 3] = [(0.05, 0.02), (0.20, 0.10), (0.20, 0.15)];

pub fn cvar_knob_suite(training_seeds: &[u64], epochs: usize) -> CliResult<Check> {
    let rows = cvar_knob(&CVAR_KNOB_GRID, training_seeds, epochs)?;
    let ok = rows.iter().all(|r| r.windows(2).all(|w| w[0] >= w[1]));
    let detail = rows
        .iter()
        .zip(training_seeds)
        .map(|(r, s)| format!("seed {s}: {:.3}/{:.3}/{:.3}", r[0], r[1], r[2]))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(Check::new("CVaR knob direction", ok, format!("escalation rates {detail}")))
}

/// Fast subset used by `verify-theory` without `--full`.
pub fn quick_suite(seed: u64) -> CliResult<Vec<Check>> {
    let net = planted_router(
        PlantedSize {
            examples: 20_000,
            seeds: 50,
            validation: 5_000,
        },
        seed,
    )?;
    Ok(vec![
        calibration_recovery(&net)?,
        threshold_optimality(seed),
        regret_bound(&net, 20, seed)?,
        tv_jsd_lemma(10_000, seed),
        best_of_k_suite(10_000, seed)?,
        noisy_dpo_suite(),
        gradient_suite(3, seed)?,
        pipeline_invariants(200, seed)?,
    ])
}

/// Every property at its full size, plus the pipeline-backed checks.
pub fn full_suite(cfg: &Config, seed: u64) -> CliResult<Vec<Check>> {
    let net = planted_router(PlantedSize::FULL, seed)?;
    Ok(vec![
        calibration_recovery(&net)?,
        threshold_optimality(seed),
        regret_bound(&net, 20, seed)?,
        tv_jsd_lemma(10_000, seed),
        best_of_k_suite(100_000, seed)?,
        noisy_dpo_suite(),
        consistency_suite(cfg)?,
        gradient_suite(20, seed)?,
        pipeline_invariants(1_000, seed)?,
        cvar_knob_suite(&[1, 2, 3], 20)?,
    ])
}
