//! Shared data model: configuration, contexts, episode records, datasets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Symbolic observation / goal token.
pub type Token = u16;

/// Index into the action set `0..action_count`.
pub type ActionId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

/// Observation corruption families, listed in the order they are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ToolFlaky,
    PartialObs,
    Injection,
    Distractor,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::ToolFlaky,
        Family::PartialObs,
        Family::Injection,
        Family::Distractor,
    ];

    pub fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub state_count: usize,
    pub action_count: usize,
    pub horizon: usize,
    /// Size of the token vocabulary shared by goals and observations.
    pub goal_vocab_size: usize,
    pub max_subgoals: usize,
    pub reward_success: f64,
    /// Housed for completeness; no objective discounts.
    pub discount: f64,
    pub families: Vec<Family>,
    pub intensities: BTreeMap<Family, f64>,
    pub rng_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let mut intensities = BTreeMap::new();
        intensities.insert(Family::ToolFlaky, 0.10);
        intensities.insert(Family::PartialObs, 0.15);
        intensities.insert(Family::Injection, 0.15);
        intensities.insert(Family::Distractor, 0.15);
        Self {
            state_count: 12,
            action_count: 6,
            horizon: 20,
            goal_vocab_size: 64,
            max_subgoals: 3,
            reward_success: 1.0,
            discount: 0.99,
            families: Family::ALL.to_vec(),
            intensities,
            rng_seed: 42,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_count < 2 {
            return Err(Error::Config(format!("state_count must be >= 2, got {}", self.state_count)));
        }
        if self.action_count < 4 {
            return Err(Error::Config(format!("action_count must be >= 4, got {}", self.action_count)));
        }
        if self.horizon < 2 {
            return Err(Error::Config(format!("horizon must be >= 2, got {}", self.horizon)));
        }
        if self.max_subgoals == 0 || self.max_subgoals > 7 {
            return Err(Error::Config(format!("max_subgoals must be in 1..=7, got {}", self.max_subgoals)));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config(format!("discount must be in (0,1], got {}", self.discount)));
        }
        for (family, &v) in &self.intensities {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("intensity for {family:?} must be in [0,1], got {v}")));
            }
        }
        let needed = crate::env::Vocab::new(self).size();
        if needed > self.goal_vocab_size {
            return Err(Error::Config(format!(
                "token layout needs {needed} ids but goal_vocab_size is {}",
                self.goal_vocab_size
            )));
        }
        Ok(())
    }

    /// Intensity of a family after applying the enablement rule: tool flakiness and
    /// partial observability are always available, injection and distractors only
    /// when listed in `families`.
    pub fn intensity(&self, family: Family) -> f64 {
        let enabled = matches!(family, Family::ToolFlaky | Family::PartialObs) || self.families.contains(&family);
        if !enabled {
            return 0.0;
        }
        self.intensities.get(&family).copied().unwrap_or(0.0)
    }

    /// Same environment with every corruption channel switched off.
    pub fn clean(&self) -> Self {
        let mut out = self.clone();
        for v in out.intensities.values_mut() {
            *v = 0.0;
        }
        out
    }
}

/// Observable history `(goal, o_0..o_t, a_0..a_{t-1})`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub goal: Vec<Token>,
    pub observations: Vec<Vec<Token>>,
    pub actions: Vec<ActionId>,
    pub step_index: usize,
}

impl Context {
    pub fn new(goal: Vec<Token>, first_observation: Vec<Token>) -> Self {
        Self {
            goal,
            observations: alloc::vec![first_observation],
            actions: Vec::new(),
            step_index: 0,
        }
    }

    pub fn push(&mut self, action: ActionId, observation: Vec<Token>) {
        self.actions.push(action);
        self.observations.push(observation);
        self.step_index += 1;
    }

    pub fn latest_observation(&self) -> &[Token] {
        self.observations.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn last_action(&self) -> Option<ActionId> {
        self.actions.last().copied()
    }

    /// Goal plus observation tokens seen so far.
    pub fn token_count(&self) -> usize {
        self.goal.len() + self.observations.iter().map(Vec::len).sum::<usize>()
    }

    /// Copy of this context with the latest observation replaced.
    pub fn with_latest_observation(&self, observation: Vec<Token>) -> Self {
        let mut out = self.clone();
        if let Some(last) = out.observations.last_mut() {
            *last = observation;
        }
        out
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.observations.len() != self.step_index + 1 || self.actions.len() != self.step_index {
            return Err(Error::InvalidInput(format!(
                "context at step {} has {} observations and {} actions",
                self.step_index,
                self.observations.len(),
                self.actions.len()
            )));
        }
        if self.step_index >= horizon {
            return Err(Error::InvalidInput(format!("step {} beyond horizon {horizon}", self.step_index)));
        }
        Ok(())
    }
}

/// Latent perturbation seed `z`; the corruption plan is a pure function of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PerturbationSeed(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Executor {
    Slm,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub action: ActionId,
    pub log_prob: f64,
}

pub const FEATURE_DIM: usize = 15;

/// Risk feature vector consumed by the router. Slot layout is documented in
/// [`crate::features`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RiskFeatures(pub [f64; FEATURE_DIM]);

impl RiskFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// One step of a rollout, routed or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub context: Context,
    pub candidates: Vec<Candidate>,
    pub verifier_scores: Vec<f64>,
    pub chosen_action: ActionId,
    pub executor: Executor,
    pub features: Option<RiskFeatures>,
    pub router_prob: Option<f64>,
    /// Hard escalation decision before the budget gate.
    pub decision: bool,
    /// LLM calls still available before this step; `None` means unlimited.
    pub budget_remaining: Option<u64>,
}

impl StepRecord {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() != self.verifier_scores.len() {
            return Err(Error::InvalidInput(format!(
                "{} candidates but {} scores",
                self.candidates.len(),
                self.verifier_scores.len()
            )));
        }
        if self.verifier_scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidInput("verifier score outside [0,1]".into()));
        }
        if let Some(p) = self.router_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!("router probability {p} outside [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedEpisode {
    pub task: TaskId,
    pub seed: PerturbationSeed,
    pub steps: Vec<StepRecord>,
    pub success: bool,
    pub llm_calls: u64,
    /// `None` means no cap.
    pub budget_limit: Option<u64>,
}

impl PerturbedEpisode {
    pub fn llm_steps(&self) -> u64 {
        self.steps.iter().filter(|s| s.executor == Executor::Llm).count() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.llm_calls != self.llm_steps() {
            return Err(Error::InvalidInput(format!(
                "llm_calls {} but {} LLM steps",
                self.llm_calls,
                self.llm_steps()
            )));
        }
        if let Some(limit) = self.budget_limit {
            if self.llm_calls > limit {
                return Err(Error::InvalidInput(format!("llm_calls {} exceed budget {limit}", self.llm_calls)));
            }
        }
        self.steps.iter().try_for_each(StepRecord::validate)
    }
}

/// `(f_t, y_t)` with the rollout it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingExample {
    pub features: RiskFeatures,
    pub label: u8,
    /// Identifies the SLM rollout (one per task and perturbation seed).
    pub seed_id: u64,
    pub step_index: usize,
    pub task: TaskId,
}

/// Costs of the one-step routing surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSpec {
    pub c_slm: f64,
    pub c_llm: f64,
    /// Penalty for not escalating on a failing rollout.
    pub kappa: f64,
}

impl CostSpec {
    /// Costs with `kappa = 2 (c_llm − c_slm)`, which puts the Bayes threshold at 0.5.
    pub fn with_interior_threshold(c_slm: f64, c_llm: f64) -> Self {
        Self {
            c_slm,
            c_llm,
            kappa: 2.0 * (c_llm - c_slm),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_slm > 0.0 && self.c_llm > 0.0 && self.kappa > 0.0) {
            return Err(Error::Config(format!("costs must be strictly positive: {self:?}")));
        }
        Ok(())
    }
}

impl Default for CostSpec {
    /// Ratio 50 between teacher and local cost. A fully escalated seed costs
    /// 0.075, below the default CVaR budget of 0.1, while a seed that never
    /// escalates on a failing rollout costs up to 0.1485, so the budget binds
    /// without being infeasible.
    fn default() -> Self {
        Self::with_interior_threshold(0.0015, 0.075)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CVaRSpec {
    /// Tail mass; smaller is a deeper tail.
    pub alpha: f64,
    pub epsilon: f64,
    pub lambda_brier: f64,
    pub lambda_init: f64,
}

impl Default for CVaRSpec {
    fn default() -> Self {
        Self {
            alpha: 0.20,
            epsilon: 0.10,
            lambda_brier: 1.0,
            lambda_init: 1.0,
        }
    }
}

impl CVaRSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0,1], got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.lambda_brier < 0.0 || self.lambda_init < 0.0 {
            return Err(Error::Config("lambda weights must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<TaskId>,
    pub valid: Vec<TaskId>,
    pub test: Vec<TaskId>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

/// Deterministic task-level train/valid/test partition.
///
/// Ids are sorted and deduplicated before shuffling, so the result depends only on
/// the id set, the fractions, and the seed.
pub fn derive_splits(task_ids: &[TaskId], fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if fractions.iter().any(|f| *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("split fractions {fractions:?} must be nonnegative and sum to 1")));
    }
    let mut ids: Vec<TaskId> = task_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let n = ids.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 tasks to split, got {n}")));
    }
    ids.shuffle(&mut rng::stream(seed, &[rng::purpose::SPLIT]));

    let mut sizes = [
        crate::math::round(fractions[0] * n as f64) as usize,
        crate::math::round(fractions[1] * n as f64) as usize,
        0,
    ];
    sizes[0] = sizes[0].min(n);
    sizes[1] = sizes[1].min(n - sizes[0]);
    sizes[2] = n - sizes[0] - sizes[1];
    // every split must be nonempty; take from the largest
    for i in 0..3 {
        if sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], core::cmp::Reverse(j))).unwrap_or(0);
            sizes[donor] -= 1;
            sizes[i] = 1;
        }
    }
    let test = ids.split_off(sizes[0] + sizes[1]);
    let valid = ids.split_off(sizes[0]);
    Ok(DatasetSplit {
        train: ids,
        valid,
        test,
        fractions,
        seed,
    })
}
