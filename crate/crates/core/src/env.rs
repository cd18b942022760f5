//! Hazard-chain tasks: a line of `state_count` positions, an ordered list of
//! sub-goal positions to activate with INTERACT, and a SUBMIT at the last one.
//!
//! Premature SUBMIT and INTERACT on a later sub-goal are unrecoverable hazards.
//! Observations are `[POS, HINT, PROG]` (plus INVALID after a rejected action)
//! and pass through seed-driven corruption channels before the agent sees them.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ActionId, Context, EnvConfig, Family, PerturbationSeed, TaskId, Token};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

pub mod token {
    use crate::domain::Token;
    pub const MASK: Token = 0;
    pub const ERROR: Token = 1;
    pub const INJECT: Token = 2;
    pub const DISTRACT: Token = 3;
    pub const INVALID: Token = 4;
    pub const HINT_LEFT: Token = 5;
    pub const HINT_RIGHT: Token = 6;
    pub const HINT_HERE: Token = 7;
    pub const HINT_SUBMIT: Token = 8;
    pub const PROG_BASE: Token = 9;
}

pub mod action {
    use crate::domain::ActionId;
    pub const LEFT: ActionId = 0;
    pub const RIGHT: ActionId = 1;
    pub const INTERACT: ActionId = 2;
    pub const SUBMIT: ActionId = 3;
    // ids 4.. are WAIT no-ops
}

/// Hazard bits.
pub const HAZARD_PREMATURE_SUBMIT: u8 = 1;
pub const HAZARD_OUT_OF_ORDER: u8 = 2;

/// Token id layout for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub state_count: usize,
    pub max_subgoals: usize,
}

impl Vocab {
    pub fn new(config: &EnvConfig) -> Self {
        Self {
            state_count: config.state_count,
            max_subgoals: config.max_subgoals,
        }
    }

    pub fn prog(&self, k: usize) -> Token {
        token::PROG_BASE + k as Token
    }

    pub fn pos(&self, i: usize) -> Token {
        token::PROG_BASE + (self.max_subgoals + 1 + i) as Token
    }

    pub fn goal(&self, i: usize) -> Token {
        self.pos(self.state_count) + i as Token
    }

    /// Decodes a POS token back to a position.
    pub fn position_of(&self, t: Token) -> Option<usize> {
        let base = self.pos(0);
        (t >= base && t < base + self.state_count as Token).then(|| (t - base) as usize)
    }

    pub fn progress_of(&self, t: Token) -> Option<usize> {
        (t >= token::PROG_BASE && t <= self.prog(self.max_subgoals)).then(|| (t - token::PROG_BASE) as usize)
    }

    pub fn size(&self) -> usize {
        self.goal(self.state_count) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub start: usize,
    /// Distinct positions, activated in order; the last one is the terminal.
    pub subgoals: Vec<usize>,
}

impl Task {
    pub fn terminal(&self) -> usize {
        *self.subgoals.last().expect("task has at least one subgoal")
    }

    /// Length of the shortest successful action sequence.
    pub fn optimal_length(&self) -> usize {
        let mut at = self.start;
        let mut len = 0;
        for &g in &self.subgoals {
            len += at.abs_diff(g) + 1;
            at = g;
        }
        len + 1
    }
}

/// Hidden state `s_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentState {
    pub task: TaskId,
    pub position: usize,
    /// Bit `i` set once sub-goal `i` is activated.
    pub carried: u8,
    pub hazard: u8,
    pub done: bool,
}

impl LatentState {
    pub fn progress(&self) -> usize {
        self.carried.count_ones() as usize
    }
}

/// One corruption operator with its strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationOp {
    pub family: Family,
    pub intensity: f64,
}

/// Longest observation the masking channel draws for.
pub const MAX_MASKED_LEN: usize = 8;

/// Uniform draws consumed by the corruption channels at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDraws {
    pub flaky: f64,
    pub mask: [f64; MAX_MASKED_LEN],
    pub inject: f64,
    pub distract: f64,
    pub distract_hint_right: bool,
    pub distract_position: u32,
}

impl StepDraws {
    pub fn generate(z: PerturbationSeed, t: usize, state_count: usize) -> Self {
        let mut flaky = family_stream(z, t, Family::ToolFlaky);
        let mut masking = family_stream(z, t, Family::PartialObs);
        let mut inject = family_stream(z, t, Family::Injection);
        let mut distract = family_stream(z, t, Family::Distractor);
        let mut mask = [0.0; MAX_MASKED_LEN];
        for m in &mut mask {
            *m = masking.gen();
        }
        Self {
            flaky: flaky.gen(),
            mask,
            inject: inject.gen(),
            distract: distract.gen(),
            distract_hint_right: distract.gen(),
            distract_position: distract.gen_range(0..state_count.max(1) as u32),
        }
    }
}

fn family_stream(z: PerturbationSeed, t: usize, family: Family) -> rng::Stream {
    rng::stream(z.0, &[purpose::PERTURB, t as u64, family.tag()])
}

/// Per-step corruption plan of a perturbation seed, steps `0..=horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    pub seed: PerturbationSeed,
    pub steps: Vec<StepDraws>,
}

impl CorruptionPlan {
    pub fn generate(config: &EnvConfig, seed: PerturbationSeed) -> Self {
        Self {
            seed,
            steps: (0..=config.horizon)
                .map(|t| StepDraws::generate(seed, t, config.state_count))
                .collect(),
        }
    }
}

fn apply_with_draws(clean: &[Token], op: PerturbationOp, d: &StepDraws, vocab: &Vocab) -> Vec<Token> {
    let p = op.intensity;
    let mut out = clean.to_vec();
    match op.family {
        Family::ToolFlaky => {
            if d.flaky < p {
                out = vec![token::ERROR; clean.len().max(1)];
            }
        }
        Family::PartialObs => {
            for (tok, &u) in out.iter_mut().zip(d.mask.iter()) {
                if u < p {
                    *tok = token::MASK;
                }
            }
        }
        Family::Injection => {
            if d.inject < p {
                out.extend_from_slice(&[token::INJECT, token::HINT_SUBMIT]);
            }
        }
        Family::Distractor => {
            if d.distract < p {
                let hint = if d.distract_hint_right { token::HINT_RIGHT } else { token::HINT_LEFT };
                out.extend_from_slice(&[token::DISTRACT, hint, vocab.pos(d.distract_position as usize)]);
            }
        }
    }
    out
}

/// The task set plus configuration; cheap to clone and share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub config: EnvConfig,
    pub tasks: Vec<Task>,
}

/// Result of one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: LatentState,
    pub observation: Vec<Token>,
    pub terminal: bool,
    pub success: bool,
}

/// Slack kept between a task's optimal length and the horizon.
pub const HORIZON_SLACK: usize = 5;

/// Generate `n` solvable tasks with ids `0..n`.
pub fn gen_tasks(config: &EnvConfig, n: usize, seed: u64) -> Result<Vec<Task>> {
    config.validate()?;
    let max_len = config.horizon.saturating_sub(HORIZON_SLACK).max(3);
    let min_goals = 2.min(config.max_subgoals);
    let cheapest = Task {
        id: TaskId(0),
        start: 0,
        subgoals: (0..min_goals).collect(),
    };
    if cheapest.optimal_length() > max_len || config.state_count < min_goals {
        return Err(Error::Config("horizon too short for any task".into()));
    }
    let mut tasks = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, &[purpose::TASKS, i as u64]);
        let task = loop {
            let m = r.gen_range(min_goals..=config.max_subgoals.min(config.state_count));
            let mut positions: Vec<usize> = (0..config.state_count).collect();
            let mut subgoals = Vec::with_capacity(m);
            for _ in 0..m {
                let j = r.gen_range(0..positions.len());
                subgoals.push(positions.swap_remove(j));
            }
            let task = Task {
                id: TaskId(i as u32),
                start: r.gen_range(0..config.state_count),
                subgoals,
            };
            if task.optimal_length() <= max_len {
                break task;
            }
        };
        tasks.push(task);
    }
    Ok(tasks)
}

impl Environment {
    pub fn new(config: EnvConfig, tasks: Vec<Task>) -> Result<Self> {
        config.validate()?;
        for (i, t) in tasks.iter().enumerate() {
            if t.id.0 as usize != i {
                return Err(Error::InvalidInput("task ids must be 0..n in order".into()));
            }
            if t.subgoals.is_empty() || t.subgoals.len() > config.max_subgoals {
                return Err(Error::InvalidInput(alloc::format!("task {i} has {} subgoals", t.subgoals.len())));
            }
            if t.start >= config.state_count || t.subgoals.iter().any(|&g| g >= config.state_count) {
                return Err(Error::InvalidInput(alloc::format!("task {i} has positions out of range")));
            }
        }
        Ok(Self { config, tasks })
    }

    pub fn generate(config: EnvConfig, n: usize, seed: u64) -> Result<Self> {
        let tasks = gen_tasks(&config, n, seed)?;
        Self::new(config, tasks)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(&self.config)
    }

    pub fn task(&self, id: TaskId) -> Result<&Task> {
        self.tasks.get(id.0 as usize).ok_or(Error::UnknownTask(id.0))
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        self.tasks.iter().map(|t| t.id).collect()
    }

    /// Same tasks with every corruption channel off.
    pub fn clean(&self) -> Self {
        Self {
            config: self.config.clean(),
            tasks: self.tasks.clone(),
        }
    }

    pub fn goal_tokens(&self, task: &Task) -> Vec<Token> {
        let v = self.vocab();
        task.subgoals.iter().map(|&g| v.goal(g)).collect()
    }

    /// Uncorrupted observation of a latent state.
    pub fn clean_observation(&self, state: &LatentState, invalid_feedback: bool) -> Vec<Token> {
        let v = self.vocab();
        let task = &self.tasks[state.task.0 as usize];
        let k = state.progress();
        // once every subgoal is done the hint leads back to the terminal
        let (target, arrived) = match task.subgoals.get(k) {
            None => (task.terminal(), token::HINT_SUBMIT),
            Some(&g) => (g, token::HINT_HERE),
        };
        let hint = match state.position.cmp(&target) {
            core::cmp::Ordering::Less => token::HINT_RIGHT,
            core::cmp::Ordering::Greater => token::HINT_LEFT,
            core::cmp::Ordering::Equal => arrived,
        };
        let mut obs = vec![v.pos(state.position), hint, v.prog(k)];
        if invalid_feedback {
            obs.push(token::INVALID);
        }
        obs
    }

    /// Corrupt an observation with every active family, in enum order.
    pub fn corrupt(&self, clean: &[Token], z: PerturbationSeed, t: usize) -> Vec<Token> {
        let draws = StepDraws::generate(z, t, self.config.state_count);
        self.corrupt_with(clean, &draws)
    }

    pub fn corrupt_with(&self, clean: &[Token], draws: &StepDraws) -> Vec<Token> {
        let v = self.vocab();
        Family::ALL.iter().fold(clean.to_vec(), |obs, &family| {
            let intensity = self.config.intensity(family);
            if intensity > 0.0 {
                apply_with_draws(&obs, PerturbationOp { family, intensity }, draws, &v)
            } else {
                obs
            }
        })
    }

    pub fn reset(&self, task_id: TaskId, seed: PerturbationSeed) -> Result<(LatentState, Context)> {
        let task = self.task(task_id)?;
        let state = LatentState {
            task: task_id,
            position: task.start,
            carried: 0,
            hazard: 0,
            done: false,
        };
        let obs = self.corrupt(&self.clean_observation(&state, false), seed, 0);
        Ok((state, Context::new(self.goal_tokens(task), obs)))
    }

    /// Deterministic latent transition; returns the next state and whether the
    /// action was rejected as invalid.
    pub fn transition(&self, state: &LatentState, a: ActionId) -> (LatentState, bool) {
        let mut next = *state;
        if state.done {
            return (next, false);
        }
        let task = &self.tasks[state.task.0 as usize];
        let k = state.progress();
        let complete = k == task.subgoals.len();
        if a >= self.config.action_count {
            return (next, true);
        }
        match a {
            action::LEFT => next.position = state.position.saturating_sub(1),
            action::RIGHT => next.position = (state.position + 1).min(self.config.state_count - 1),
            action::INTERACT => {
                if !complete && task.subgoals[k] == state.position {
                    next.carried |= 1 << k;
                } else if let Some(j) = task.subgoals.iter().position(|&g| g == state.position) {
                    if j > k {
                        next.hazard |= HAZARD_OUT_OF_ORDER;
                        next.done = true;
                    } else {
                        return (next, true);
                    }
                } else {
                    return (next, true);
                }
            }
            action::SUBMIT => {
                next.done = true;
                if !(complete && state.position == task.terminal()) {
                    next.hazard |= HAZARD_PREMATURE_SUBMIT;
                }
            }
            _ => {}
        }
        (next, false)
    }

    pub fn is_success(&self, state: &LatentState) -> bool {
        let task = &self.tasks[state.task.0 as usize];
        state.done && state.hazard == 0 && state.progress() == task.subgoals.len() && state.position == task.terminal()
    }

    /// One environment step from step index `t` (`t < horizon`). The returned
    /// observation is `o_{t+1}` under seed `z`.
    pub fn step(&self, state: &LatentState, a: ActionId, seed: PerturbationSeed, t: usize) -> Result<StepOutcome> {
        if t >= self.config.horizon {
            return Err(Error::InvalidInput(alloc::format!("step {t} at or beyond horizon {}", self.config.horizon)));
        }
        self.task(state.task)?;
        let (next, invalid) = self.transition(state, a);
        let success = self.is_success(&next);
        let terminal = next.done || t + 1 >= self.config.horizon;
        let observation = self.corrupt(&self.clean_observation(&next, invalid), seed, t + 1);
        Ok(StepOutcome {
            state: next,
            observation,
            terminal,
            success,
        })
    }

    /// Two corrupted views of the same latent state at step `t`.
    pub fn paired_views(
        &self,
        state: &LatentState,
        invalid_feedback: bool,
        z: PerturbationSeed,
        z_prime: PerturbationSeed,
        t: usize,
    ) -> (Vec<Token>, Vec<Token>) {
        let clean = self.clean_observation(state, invalid_feedback);
        (self.corrupt(&clean, z, t), self.corrupt(&clean, z_prime, t))
    }

    /// Action classes used by the teacher and the verifier's quality oracle.
    pub fn action_quality(&self, state: &LatentState, a: ActionId) -> ActionQuality {
        if a == self.optimal_action(state) {
            return ActionQuality::Optimal;
        }
        let (next, _) = self.transition(state, a);
        if next.hazard != 0 && state.hazard == 0 {
            ActionQuality::Hazard
        } else {
            ActionQuality::Neutral
        }
    }

    /// Shortest-path action with full latent access.
    pub fn optimal_action(&self, state: &LatentState) -> ActionId {
        let task = &self.tasks[state.task.0 as usize];
        let k = state.progress();
        match task.subgoals.get(k) {
            None => {
                if state.position == task.terminal() {
                    action::SUBMIT
                } else if state.position < task.terminal() {
                    action::RIGHT
                } else {
                    action::LEFT
                }
            }
            Some(&g) if state.position < g => action::RIGHT,
            Some(&g) if state.position > g => action::LEFT,
            Some(_) => action::INTERACT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionQuality {
    Hazard,
    Neutral,
    Optimal,
}

/// Apply a single corruption operator at `(z, t)`.
pub fn apply_perturbation(
    clean: &[Token],
    op: PerturbationOp,
    z: PerturbationSeed,
    t: usize,
    config: &EnvConfig,
) -> Vec<Token> {
    let draws = StepDraws::generate(z, t, config.state_count);
    apply_with_draws(clean, op, &draws, &Vocab::new(config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;

    fn env_with(intensity: f64) -> Environment {
        let mut config = EnvConfig::default();
        for f in Family::ALL {
            config.intensities.insert(f, intensity);
        }
        Environment::generate(config, 50, 7).unwrap()
    }

    fn run_optimal(env: &Environment, id: TaskId) -> (bool, usize) {
        let (mut s, _) = env.reset(id, PerturbationSeed(0)).unwrap();
        for t in 0..env.config.horizon {
            let out = env.step(&s, env.optimal_action(&s), PerturbationSeed(0), t).unwrap();
            s = out.state;
            if out.terminal {
                return (out.success, t + 1);
            }
        }
        (false, env.config.horizon)
    }

    #[test]
    fn vocab_fits_default() {
        let v = Vocab::new(&EnvConfig::default());
        assert!(v.size() <= 64);
        assert_eq!(v.position_of(v.pos(11)), Some(11));
        assert_eq!(v.position_of(v.goal(0)), None);
        assert_eq!(v.progress_of(v.prog(3)), Some(3));
    }

    #[test]
    fn every_task_is_solvable_by_the_planner() {
        let env = env_with(0.0);
        for task in &env.tasks {
            let (ok, len) = run_optimal(&env, task.id);
            assert!(ok, "task {:?}", task);
            assert_eq!(len, task.optimal_length());
            assert!(len < env.config.horizon);
        }
    }

    #[test]
    fn zero_intensity_is_identity() {
        let env = env_with(0.0);
        let (s, ctx) = env.reset(TaskId(3), PerturbationSeed(99)).unwrap();
        assert_eq!(ctx.observations[0], env.clean_observation(&s, false));
    }

    #[test]
    fn reset_and_step_are_deterministic() {
        let env = env_with(0.5);
        let a = env.reset(TaskId(1), PerturbationSeed(5)).unwrap();
        assert_eq!(a, env.reset(TaskId(1), PerturbationSeed(5)).unwrap());
        let o1 = env.step(&a.0, action::RIGHT, PerturbationSeed(5), 0).unwrap();
        let o2 = env.step(&a.0, action::RIGHT, PerturbationSeed(5), 0).unwrap();
        assert_eq!(o1, o2);
        assert!(env.reset(TaskId(500), PerturbationSeed(5)).is_err());
    }

    #[test]
    fn full_masking_masks_first_observation() {
        let mut config = EnvConfig::default();
        config.intensities = BTreeMap::from([(Family::PartialObs, 1.0)]);
        let env = Environment::generate(config, 5, 1).unwrap();
        let mut masked = 0usize;
        let mut total = 0usize;
        for z in 0..100 {
            let (_, ctx) = env.reset(TaskId(0), PerturbationSeed(z)).unwrap();
            assert!(ctx.observations[0].contains(&token::MASK));
            masked += ctx.observations[0].iter().filter(|&&t| t == token::MASK).count();
            total += ctx.observations[0].len();
        }
        assert!(masked as f64 / total as f64 >= 0.9);
    }

    #[test]
    fn operator_examples() {
        let config = EnvConfig::default();
        let clean = [13, 6, 9];
        for family in Family::ALL {
            let op = PerturbationOp { family, intensity: 0.0 };
            assert_eq!(apply_perturbation(&clean, op, PerturbationSeed(4), 2, &config), clean);
        }
        let flaky = PerturbationOp {
            family: Family::ToolFlaky,
            intensity: 1.0,
        };
        for z in 0..50 {
            for t in 0..5 {
                let out = apply_perturbation(&clean, flaky, PerturbationSeed(z), t, &config);
                assert!(out.iter().all(|&x| x == token::ERROR));
            }
        }
    }

    #[test]
    fn mask_rate_matches_intensity() {
        let config = EnvConfig::default();
        let op = PerturbationOp {
            family: Family::PartialObs,
            intensity: 0.5,
        };
        let clean = [13u16];
        let mut masked = 0;
        for z in 0..10_000u64 {
            let out = apply_perturbation(&clean, op, PerturbationSeed(z), (z % 20) as usize, &config);
            masked += (out[0] == token::MASK) as usize;
        }
        let rate = masked as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&rate), "{rate}");
    }

    #[test]
    fn plan_is_reproducible() {
        let config = EnvConfig::default();
        assert_eq!(
            CorruptionPlan::generate(&config, PerturbationSeed(77)),
            CorruptionPlan::generate(&config, PerturbationSeed(77))
        );
        assert_ne!(
            CorruptionPlan::generate(&config, PerturbationSeed(77)),
            CorruptionPlan::generate(&config, PerturbationSeed(78))
        );
    }

    #[test]
    fn paired_views_properties() {
        let env = env_with(0.0);
        let (s, _) = env.reset(TaskId(2), PerturbationSeed(0)).unwrap();
        let (a, b) = env.paired_views(&s, false, PerturbationSeed(1), PerturbationSeed(2), 3);
        assert_eq!(a, b);

        let env = env_with(0.4);
        let (a, b) = env.paired_views(&s, false, PerturbationSeed(1), PerturbationSeed(1), 3);
        assert_eq!(a, b);

        // with only masking on, the known plan tells which slots were masked
        let mut config = EnvConfig::default();
        config.intensities = BTreeMap::from([(Family::PartialObs, 0.5)]);
        let env = Environment::new(config, env.tasks.clone()).unwrap();
        let clean = env.clean_observation(&s, false);
        for z in 0..200u64 {
            let (za, zb) = (PerturbationSeed(z), PerturbationSeed(z + 1000));
            let (va, vb) = env.paired_views(&s, false, za, zb, 4);
            for (view, seed) in [(va, za), (vb, zb)] {
                let plan = CorruptionPlan::generate(&env.config, seed);
                for (i, &tok) in view.iter().enumerate() {
                    if plan.steps[4].mask[i] < 0.5 {
                        assert_eq!(tok, token::MASK);
                    } else {
                        assert_eq!(tok, clean[i]);
                    }
                }
            }
        }
    }

    /// Exhaustive search on a 5-position instance: once a hazard fires, no
    /// continuation reaches success.
    #[test]
    fn hazard_is_unrecoverable() {
        let config = EnvConfig {
            state_count: 5,
            horizon: 8,
            ..EnvConfig::default()
        };
        let tasks = vec![Task {
            id: TaskId(0),
            start: 0,
            subgoals: vec![1, 3],
        }];
        let env = Environment::new(config, tasks).unwrap();
        fn search(env: &Environment, s: LatentState, depth: usize, hazard_seen: bool, found: &mut (usize, usize)) {
            if env.is_success(&s) {
                if hazard_seen {
                    found.1 += 1;
                } else {
                    found.0 += 1;
                }
            }
            if depth == 0 || s.done {
                return;
            }
            for a in 0..env.config.action_count {
                let (n, _) = env.transition(&s, a);
                search(env, n, depth - 1, hazard_seen || n.hazard != 0, found);
            }
        }
        let (s, _) = env.reset(TaskId(0), PerturbationSeed(0)).unwrap();
        let mut found = (0, 0);
        search(&env, s, 7, false, &mut found);
        assert!(found.0 > 0);
        assert_eq!(found.1, 0);

        // also from every hazard state reachable in one step
        let (premature, _) = env.transition(&s, action::SUBMIT);
        assert_eq!(premature.hazard, HAZARD_PREMATURE_SUBMIT);
        for a in 0..8 {
            assert!(!env.is_success(&env.transition(&premature, a).0));
        }
    }

    #[test]
    fn invalid_actions_are_absorbed() {
        let env = env_with(0.0);
        let (s, _) = env.reset(TaskId(0), PerturbationSeed(0)).unwrap();
        let out = env.step(&s, 17, PerturbationSeed(0), 0).unwrap();
        assert_eq!(out.state, s);
        assert!(!out.terminal);
        assert_eq!(out.observation.last(), Some(&token::INVALID));
    }
}
