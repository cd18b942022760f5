//! Linear-softmax student policy, scripted teacher, teacher-trajectory pool, and
//! behavioral cloning.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{ActionId, Candidate, Context, EnvConfig, Executor, PerturbationSeed, PerturbedEpisode, StepRecord, TaskId, Token};
use crate::env::{token, Environment, LatentState, Vocab};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, purpose};

/// Hand-coded context features of the student.
///
/// Layout: indicators of the tokens in the latest observation, the most recent
/// visible progress token, the most recent direction hint from earlier
/// observations, the last action (with a "none" slot), and the step fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub vocab_size: usize,
    pub state_count: usize,
    pub max_subgoals: usize,
    pub action_count: usize,
    pub horizon: usize,
}

const HINTS: [Token; 4] = [token::HINT_LEFT, token::HINT_RIGHT, token::HINT_HERE, token::HINT_SUBMIT];

impl FeatureMap {
    pub fn new(config: &EnvConfig) -> Self {
        Self {
            vocab_size: config.goal_vocab_size,
            state_count: config.state_count,
            max_subgoals: config.max_subgoals,
            action_count: config.action_count,
            horizon: config.horizon,
        }
    }

    fn vocab(&self) -> Vocab {
        Vocab {
            state_count: self.state_count,
            max_subgoals: self.max_subgoals,
        }
    }

    fn progress_offset(&self) -> usize {
        self.vocab_size
    }

    fn hint_offset(&self) -> usize {
        self.progress_offset() + self.max_subgoals + 1
    }

    fn action_offset(&self) -> usize {
        self.hint_offset() + HINTS.len()
    }

    fn step_offset(&self) -> usize {
        self.action_offset() + self.action_count + 1
    }

    pub fn dim(&self) -> usize {
        self.step_offset() + 1
    }

    /// Sparse `(index, value)` features of a context, sorted by index.
    pub fn features(&self, x: &Context) -> Vec<(u32, f64)> {
        let vocab = self.vocab();
        let mut out: Vec<(u32, f64)> = Vec::with_capacity(12);
        let mut seen = vec![false; self.vocab_size];
        for &t in x.latest_observation() {
            let t = t as usize;
            if t < self.vocab_size && !seen[t] {
                seen[t] = true;
                out.push((t as u32, 1.0));
            }
        }
        if let Some(k) = x
            .observations
            .iter()
            .rev()
            .find_map(|o| o.iter().find_map(|&t| vocab.progress_of(t)))
        {
            out.push(((self.progress_offset() + k) as u32, 1.0));
        }
        // memory slots only fire when the current observation carries no hint,
        // so they never compete with a visible one
        if !x.latest_observation().iter().any(|t| HINTS.contains(t)) {
            let earlier = &x.observations[..x.observations.len().saturating_sub(1)];
            if let Some(h) = earlier
                .iter()
                .rev()
                .find_map(|o| o.iter().find_map(|t| HINTS.iter().position(|h| h == t)))
            {
                out.push(((self.hint_offset() + h) as u32, 1.0));
            }
            let last = x.last_action().map_or(self.action_count, |a| a.min(self.action_count));
            out.push(((self.action_offset() + last) as u32, 1.0));
        }
        out.push((self.step_offset() as u32, x.step_index as f64 / self.horizon as f64));
        out.sort_by_key(|&(i, _)| i);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyStage {
    Initial,
    BehaviorCloned,
    Distilled,
}

/// `π_θ(a|x) = softmax((θᵀφ(x) + b) / T)`.
///
/// Parameters are stored flat: row `i < dim` holds the weights of feature `i`
/// across actions, the final row is the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub map: FeatureMap,
    pub params: Vec<f64>,
    pub temperature: f64,
    pub stage: PolicyStage,
}

impl SoftmaxPolicy {
    pub fn zeros(config: &EnvConfig) -> Self {
        let map = FeatureMap::new(config);
        Self {
            params: vec![0.0; (map.dim() + 1) * map.action_count],
            map,
            temperature: 1.0,
            stage: PolicyStage::Initial,
        }
    }

    pub fn action_count(&self) -> usize {
        self.map.action_count
    }

    pub fn logits_from_features(&self, phi: &[(u32, f64)]) -> Vec<f64> {
        logits(&self.params, phi, self.map.action_count, self.map.dim())
            .into_iter()
            .map(|l| l / self.temperature)
            .collect()
    }

    pub fn log_probs(&self, x: &Context) -> Vec<f64> {
        math::log_softmax(&self.logits_from_features(&self.map.features(x)))
    }

    pub fn action_distribution(&self, x: &Context) -> Vec<f64> {
        math::softmax(&self.logits_from_features(&self.map.features(x)))
    }

    /// `K` i.i.d. draws with their log-probabilities.
    pub fn sample_candidates<R: Rng>(&self, x: &Context, k: usize, rng: &mut R) -> Vec<Candidate> {
        let log_p = self.log_probs(x);
        let p: Vec<f64> = log_p.iter().map(|&l| math::exp(l)).collect();
        (0..k)
            .map(|_| {
                let a = sample_index(&p, rng);
                Candidate {
                    action: a,
                    log_prob: log_p[a],
                }
            })
            .collect()
    }

    pub fn hash(&self) -> [u8; 32] {
        hash_params(&self.params)
    }
}

pub(crate) fn logits(params: &[f64], phi: &[(u32, f64)], a_count: usize, dim: usize) -> Vec<f64> {
    let mut out = params[dim * a_count..(dim + 1) * a_count].to_vec();
    for &(i, v) in phi {
        let row = &params[i as usize * a_count..(i as usize + 1) * a_count];
        for (o, w) in out.iter_mut().zip(row) {
            *o += v * w;
        }
    }
    out
}

/// Inverse-CDF draw; falls back to the last index on rounding.
pub fn sample_index<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

pub fn hash_params(params: &[f64]) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in params {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Bit-exact, read-only snapshot of a policy used as the DPO reference.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenReference {
    policy: SoftmaxPolicy,
    hash: [u8; 32],
}

impl FrozenReference {
    pub fn new(policy: &SoftmaxPolicy) -> Self {
        Self {
            hash: policy.hash(),
            policy: policy.clone(),
        }
    }

    pub fn policy(&self) -> &SoftmaxPolicy {
        &self.policy
    }

    pub fn recorded_hash(&self) -> [u8; 32] {
        self.hash
    }

    /// Recomputes the parameter hash and compares it with the recorded one.
    pub fn verify(&self) -> Result<()> {
        if self.policy.hash() == self.hash {
            Ok(())
        } else {
            Err(Error::Provenance("frozen reference parameters changed".into()))
        }
    }
}

/// Scripted planner with latent access and a small random error rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherPolicy {
    pub error_rate: f64,
}

impl Default for TeacherPolicy {
    fn default() -> Self {
        Self { error_rate: 0.02 }
    }
}

impl TeacherPolicy {
    pub fn act<R: Rng>(&self, env: &Environment, state: &LatentState, rng: &mut R) -> ActionId {
        let best = env.optimal_action(state);
        let a_count = env.config.action_count;
        let u: f64 = rng.gen();
        if u < self.error_rate && a_count > 1 {
            let j = rng.gen_range(0..a_count - 1);
            if j >= best {
                j + 1
            } else {
                j
            }
        } else {
            best
        }
    }
}

/// Perturbation seeds used for a task; `salt` separates pool, routing and
/// evaluation seed sets.
pub fn perturbation_seeds(root: u64, task: TaskId, count: usize, salt: u64) -> Vec<PerturbationSeed> {
    (0..count)
        .map(|j| PerturbationSeed(rng::derive(root, &[purpose::SEEDS, salt, task.0 as u64, j as u64])))
        .collect()
}

/// Teacher episodes: one clean demonstration per task plus perturbed replays of
/// the same action sequence, so step `t` of every replay shares the latent state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPool {
    pub expert: Vec<PerturbedEpisode>,
    pub perturbed: Vec<PerturbedEpisode>,
}

impl TrajectoryPool {
    pub fn episodes(&self) -> impl Iterator<Item = &PerturbedEpisode> {
        self.expert.iter().chain(&self.perturbed)
    }
}

fn teacher_step(context: Context, action: ActionId) -> StepRecord {
    StepRecord {
        context,
        candidates: Vec::new(),
        verifier_scores: Vec::new(),
        chosen_action: action,
        executor: Executor::Llm,
        features: None,
        router_prob: None,
        decision: true,
        budget_remaining: None,
    }
}

/// Replay a fixed action sequence under seed `z`.
pub fn replay(env: &Environment, task: TaskId, actions: &[ActionId], seed: PerturbationSeed) -> Result<PerturbedEpisode> {
    let (mut state, mut ctx) = env.reset(task, seed)?;
    let mut steps = Vec::with_capacity(actions.len());
    let mut success = false;
    for (t, &a) in actions.iter().enumerate() {
        let out = env.step(&state, a, seed, t)?;
        steps.push(teacher_step(ctx.clone(), a));
        state = out.state;
        if out.terminal {
            success = out.success;
            break;
        }
        ctx.push(a, out.observation);
    }
    Ok(PerturbedEpisode {
        task,
        seed,
        llm_calls: steps.len() as u64,
        steps,
        success,
        budget_limit: None,
    })
}

/// Latent states `s_0..s_{n-1}` visited by an action sequence, with the
/// invalid-action feedback flag carried into each observation.
pub fn latent_trajectory(env: &Environment, task: TaskId, actions: &[ActionId]) -> Result<Vec<(LatentState, bool)>> {
    let (mut state, _) = env.reset(task, PerturbationSeed(0))?;
    let mut invalid = false;
    let mut out = Vec::with_capacity(actions.len());
    for &a in actions {
        out.push((state, invalid));
        let (next, inv) = env.transition(&state, a);
        state = next;
        invalid = inv;
    }
    Ok(out)
}

pub fn collect_teacher_trajectories(
    env: &Environment,
    tasks: &[TaskId],
    seeds_per_task: usize,
    teacher: &TeacherPolicy,
    root: u64,
) -> Result<TrajectoryPool> {
    let clean = env.clean();
    let mut expert = Vec::with_capacity(tasks.len());
    let mut perturbed = Vec::with_capacity(tasks.len() * seeds_per_task);
    for &task in tasks {
        let mut r = rng::stream(root, &[purpose::TEACHER, task.0 as u64]);
        let (mut state, _) = clean.reset(task, PerturbationSeed(0))?;
        let mut actions = Vec::new();
        for t in 0..clean.config.horizon {
            let a = teacher.act(&clean, &state, &mut r);
            actions.push(a);
            let out = clean.step(&state, a, PerturbationSeed(0), t)?;
            state = out.state;
            if out.terminal {
                break;
            }
        }
        expert.push(replay(&clean, task, &actions, PerturbationSeed(0))?);
        for z in perturbation_seeds(root, task, seeds_per_task, 0) {
            perturbed.push(replay(env, task, &actions, z)?);
        }
    }
    Ok(TrajectoryPool { expert, perturbed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.0,
            epochs: 150,
        }
    }
}

/// Featurized `(x, a*)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub phi: Vec<(u32, f64)>,
    pub action: ActionId,
}

/// The BC dataset: every step of every successful episode.
pub fn bc_dataset(map: &FeatureMap, pool: &TrajectoryPool) -> Vec<Demonstration> {
    pool.episodes()
        .filter(|e| e.success)
        .flat_map(|e| e.steps.iter())
        .map(|s| Demonstration {
            phi: map.features(&s.context),
            action: s.chosen_action,
        })
        .collect()
}

/// Mean negative log-likelihood and its gradient with respect to the flat parameters.
pub fn bc_loss_and_grad(policy: &SoftmaxPolicy, data: &[Demonstration], want_grad: bool) -> (f64, Vec<f64>) {
    let a_count = policy.map.action_count;
    let dim = policy.map.dim();
    let mut grad = if want_grad { vec![0.0; policy.params.len()] } else { Vec::new() };
    let mut loss = 0.0;
    let scale = 1.0 / data.len().max(1) as f64;
    for d in data {
        let lp = math::log_softmax(&policy.logits_from_features(&d.phi));
        loss -= lp[d.action];
        if want_grad {
            let g: Vec<f64> = lp
                .iter()
                .enumerate()
                .map(|(a, &l)| (math::exp(l) - (a == d.action) as u8 as f64) * scale / policy.temperature)
                .collect();
            accumulate(&mut grad, &d.phi, &g, a_count, dim);
        }
    }
    (loss * scale, grad)
}

/// Adds `φ ⊗ g` (plus the bias row) into a flat gradient.
pub(crate) fn accumulate(grad: &mut [f64], phi: &[(u32, f64)], g: &[f64], a_count: usize, dim: usize) {
    for &(i, v) in phi {
        let row = &mut grad[i as usize * a_count..(i as usize + 1) * a_count];
        for (r, gi) in row.iter_mut().zip(g) {
            *r += v * gi;
        }
    }
    let bias = &mut grad[dim * a_count..(dim + 1) * a_count];
    for (r, gi) in bias.iter_mut().zip(g) {
        *r += gi;
    }
}

/// Full-batch gradient descent with step-halving so the loss never increases.
///
/// Returns the parameters and the loss after each epoch (index 0 is the start).
pub fn descend<F>(params: &mut Vec<f64>, mut objective: F, lr0: f64, epochs: usize) -> Vec<f64>
where
    F: FnMut(&[f64], bool) -> (f64, Vec<f64>),
{
    let (mut loss, mut grad) = objective(params, true);
    let mut lr = lr0;
    let mut history = vec![loss];
    for _ in 0..epochs {
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - lr * g).collect();
            let (trial_loss, _) = objective(&trial, false);
            if trial_loss <= loss {
                *params = trial;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if accepted {
            let (l, g) = objective(params, true);
            loss = l;
            grad = g;
            lr = (lr * 1.5).min(lr0);
        }
        history.push(loss);
    }
    history
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcReport {
    pub examples: usize,
    pub losses: Vec<f64>,
}

pub fn train_bc(config: &EnvConfig, pool: &TrajectoryPool, hyper: &BcConfig) -> Result<(SoftmaxPolicy, BcReport)> {
    let mut policy = SoftmaxPolicy::zeros(config);
    let data = bc_dataset(&policy.map, pool);
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no successful episodes among {} in the pool",
            pool.expert.len() + pool.perturbed.len()
        )));
    }
    let mut params = policy.params.clone();
    let template = policy.clone();
    let losses = descend(
        &mut params,
        |theta, want_grad| {
            let mut p = template.clone();
            p.params.copy_from_slice(theta);
            bc_loss_and_grad(&p, &data, want_grad)
        },
        hyper.learning_rate,
        hyper.epochs,
    );
    policy.params = params;
    policy.stage = PolicyStage::BehaviorCloned;
    Ok((
        policy,
        BcReport {
            examples: data.len(),
            losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Family;

    fn small_env() -> Environment {
        Environment::generate(EnvConfig::default(), 20, 3).unwrap()
    }

    #[test]
    fn zero_policy_is_uniform() {
        let env = small_env();
        let pol = SoftmaxPolicy::zeros(&env.config);
        let (_, ctx) = env.reset(TaskId(0), PerturbationSeed(1)).unwrap();
        let p = pol.action_distribution(&ctx);
        for v in p {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_temperature_flattens() {
        let env = small_env();
        let mut pol = SoftmaxPolicy::zeros(&env.config);
        let mut r = rng::stream(1, &[]);
        for p in &mut pol.params {
            *p = r.gen_range(-3.0..3.0);
        }
        pol.temperature = 1e4;
        let (_, ctx) = env.reset(TaskId(0), PerturbationSeed(1)).unwrap();
        for v in pol.action_distribution(&ctx) {
            assert!((v - 1.0 / 6.0).abs() < 1e-3);
        }
    }

    #[test]
    fn distribution_matches_naive_oracle() {
        let env = small_env();
        let mut pol = SoftmaxPolicy::zeros(&env.config);
        let mut r = rng::stream(2, &[]);
        for p in &mut pol.params {
            *p = r.gen_range(-5.0..5.0);
        }
        let (_, ctx) = env.reset(TaskId(4), PerturbationSeed(9)).unwrap();
        // dense oracle
        let dim = pol.map.dim();
        let mut dense = vec![0.0; dim];
        for (i, v) in pol.map.features(&ctx) {
            dense[i as usize] = v;
        }
        let mut logits = vec![0.0; 6];
        for a in 0..6 {
            logits[a] = pol.params[dim * 6 + a];
            for i in 0..dim {
                logits[a] += dense[i] * pol.params[i * 6 + a];
            }
        }
        let z: f64 = logits.iter().map(|l| libm::exp(*l)).sum();
        let p = pol.action_distribution(&ctx);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for a in 0..6 {
            assert!((p[a] - libm::exp(logits[a]) / z).abs() < 1e-9);
        }
    }

    #[test]
    fn candidate_examples() {
        let env = small_env();
        let mut pol = SoftmaxPolicy::zeros(&env.config);
        let (_, ctx) = env.reset(TaskId(0), PerturbationSeed(1)).unwrap();
        let mut r = rng::stream(3, &[]);
        assert_eq!(pol.sample_candidates(&ctx, 1, &mut r).len(), 1);
        let dim = pol.map.dim();
        pol.params[dim * 6 + 2] = 60.0;
        let c = pol.sample_candidates(&ctx, 5, &mut r);
        assert!(c.iter().all(|c| c.action == 2));
    }

    #[test]
    fn uniform_candidate_frequencies() {
        let env = small_env();
        let pol = SoftmaxPolicy::zeros(&env.config);
        let (_, ctx) = env.reset(TaskId(0), PerturbationSeed(1)).unwrap();
        let mut r = rng::stream(4, &[]);
        let trials = 100_000;
        let mut counts = [0usize; 6];
        for _ in 0..trials {
            for c in pol.sample_candidates(&ctx, 5, &mut r) {
                counts[c.action] += 1;
                assert!((c.log_prob + libm::log(6.0)).abs() < 1e-12);
            }
        }
        let n = (trials * 5) as f64;
        let p = 1.0 / 6.0;
        let sigma = libm::sqrt(n * p * (1.0 - p));
        for c in counts {
            assert!((c as f64 - n * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn teacher_pool_examples() {
        let mut config = EnvConfig::default();
        for f in Family::ALL {
            config.intensities.insert(f, 0.0);
        }
        let env = Environment::generate(config, 15, 1).unwrap();
        let teacher = TeacherPolicy { error_rate: 0.0 };
        let pool = collect_teacher_trajectories(&env, &env.task_ids(), 5, &teacher, 11).unwrap();
        assert_eq!(pool.perturbed.len(), 5 * 15);
        assert!(pool.episodes().all(|e| e.success));
        assert_eq!(pool, collect_teacher_trajectories(&env, &env.task_ids(), 5, &teacher, 11).unwrap());
    }

    #[test]
    fn bc_loss_at_zero_is_log_a() {
        let env = small_env();
        let pool = collect_teacher_trajectories(&env, &env.task_ids(), 2, &TeacherPolicy::default(), 5).unwrap();
        let pol = SoftmaxPolicy::zeros(&env.config);
        let data = bc_dataset(&pol.map, &pool);
        let (l, _) = bc_loss_and_grad(&pol, &data, false);
        assert!((l - libm::log(6.0)).abs() < 1e-12);
    }

    #[test]
    fn bc_memorizes_single_pair() {
        let env = small_env();
        let mut pool = collect_teacher_trajectories(&env, &[TaskId(0)], 0, &TeacherPolicy { error_rate: 0.0 }, 5).unwrap();
        let mut ep = pool.expert[0].clone();
        ep.steps.truncate(1);
        ep.steps[0].chosen_action = 4;
        ep.llm_calls = 1;
        pool.expert = vec![ep.clone(), ep.clone(), ep];
        let (pol, report) = train_bc(&env.config, &pool, &BcConfig { learning_rate: 5.0, epochs: 300 }).unwrap();
        assert!(report.losses.windows(2).all(|w| w[1] <= w[0]));
        let p = pol.action_distribution(&pool.expert[0].steps[0].context);
        assert!(p[4] >= 0.99, "{p:?}");
    }

    #[test]
    fn bc_rejects_all_failures() {
        let env = small_env();
        let mut pool = collect_teacher_trajectories(&env, &[TaskId(0)], 1, &TeacherPolicy::default(), 5).unwrap();
        for e in pool.expert.iter_mut().chain(pool.perturbed.iter_mut()) {
            e.success = false;
        }
        assert!(matches!(train_bc(&env.config, &pool, &BcConfig::default()), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn frozen_reference_detects_changes() {
        let env = small_env();
        let pol = SoftmaxPolicy::zeros(&env.config);
        let r = FrozenReference::new(&pol);
        assert!(r.verify().is_ok());
        let mut copy = r.clone();
        copy.policy.params[0] = 1.0;
        assert!(copy.verify().is_err());
    }
}
