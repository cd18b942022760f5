//! Budget-gated inference loop and the routing baselines.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::domain::{Executor, PerturbationSeed, PerturbedEpisode, RiskFeatures, RoutingExample, StepRecord, TaskId};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::features::{extract, FeatureLimits, FeatureMask};
use crate::policy::{perturbation_seeds, PolicyStage, SoftmaxPolicy, TeacherPolicy};
use crate::rng::{self, purpose};
use crate::router::RouterModel;
use crate::verifier::{argmax_first, VerifierSpec};

/// Deployable routing rules. The hindsight oracle is deliberately absent: it
/// runs through [`run_oracle_episode`], which demands a [`HindsightTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RoutingPolicy {
    SlmOnly,
    LlmOnly,
    /// Escalate when normalized policy entropy `f[0] ≥ threshold`.
    Entropy { threshold: f64 },
    /// Escalate when the best verifier score is below `threshold`.
    Heuristic { threshold: f64 },
    /// Escalate when the calibrated router probability reaches its threshold.
    Risk { model: RouterModel, mask: FeatureMask },
}

impl RoutingPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            RoutingPolicy::SlmOnly => "slm_only",
            RoutingPolicy::LlmOnly => "llm_only",
            RoutingPolicy::Entropy { .. } => "entropy",
            RoutingPolicy::Heuristic { .. } => "heuristic",
            RoutingPolicy::Risk { .. } => "risk_router",
        }
    }
}

pub fn entropy_decision(f: &RiskFeatures, threshold: f64) -> bool {
    f.0[0] >= threshold
}

pub fn heuristic_decision(scores: &[f64], threshold: f64) -> bool {
    scores.iter().copied().fold(f64::NEG_INFINITY, f64::max) < threshold
}

/// SLM-only episode outcomes keyed by `(task, seed)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HindsightTable {
    outcomes: BTreeMap<(u32, u64), bool>,
}

impl HindsightTable {
    /// Built only from SLM-only rollouts; any teacher step is rejected.
    pub fn from_slm_rollouts(episodes: &[PerturbedEpisode]) -> Result<Self> {
        let mut outcomes = BTreeMap::new();
        for e in episodes {
            if e.llm_calls != 0 || e.steps.iter().any(|s| s.executor != Executor::Slm) {
                return Err(Error::Provenance(format!(
                    "hindsight table needs SLM-only rollouts; task {} seed {} escalated",
                    e.task.0, e.seed.0
                )));
            }
            outcomes.insert((e.task.0, e.seed.0), e.success);
        }
        Ok(Self { outcomes })
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }
}

/// Escalate at every step of episodes whose SLM-only rollout failed.
pub fn oracle_decision(task: TaskId, seed: PerturbationSeed, table: &HindsightTable) -> Result<bool> {
    table
        .outcomes
        .get(&(task.0, seed.0))
        .map(|&success| !success)
        .ok_or(Error::MissingHindsight { task: task.0, seed: seed.0 })
}

/// Everything a rollout needs besides the routing rule.
#[derive(Debug, Clone, Copy)]
pub struct Agent<'a> {
    pub env: &'a Environment,
    pub slm: &'a SoftmaxPolicy,
    pub teacher: &'a TeacherPolicy,
    pub verifier: &'a VerifierSpec,
    pub k: usize,
    /// Root of the per-step random streams.
    pub root: u64,
}

enum Decider<'a> {
    Online(&'a RoutingPolicy),
    Oracle(bool),
}

impl Agent<'_> {
    fn limits(&self) -> FeatureLimits {
        FeatureLimits::new(&self.env.config)
    }

    fn run(&self, task: TaskId, seed: PerturbationSeed, decider: Decider<'_>, budget: Option<u64>) -> Result<PerturbedEpisode> {
        let env = self.env;
        let limits = self.limits();
        let (mut state, mut ctx) = env.reset(task, seed)?;
        let mut remaining = budget;
        let mut steps = Vec::new();
        let mut llm_calls = 0u64;
        let mut success = false;
        for t in 0..env.config.horizon {
            let tags = [task.0 as u64, seed.0, t as u64];
            let mut cand_rng = rng::stream(self.root, &[purpose::CANDIDATES, tags[0], tags[1], tags[2]]);
            let mut ver_rng = rng::stream(self.root, &[purpose::VERIFIER, tags[0], tags[1], tags[2]]);
            let candidates = self.slm.sample_candidates(&ctx, self.k, &mut cand_rng);
            let scores: Vec<f64> = candidates
                .iter()
                .map(|c| self.verifier.score(env, &state, c.action, &mut ver_rng))
                .collect();
            let best = argmax_first(&scores);
            let features = if self.k >= 2 {
                Some(extract(&ctx, self.slm, &candidates, &scores, &limits)?)
            } else {
                None
            };
            let (router_prob, decision) = match &decider {
                Decider::Oracle(d) => (None, *d),
                Decider::Online(RoutingPolicy::SlmOnly) => (None, false),
                Decider::Online(RoutingPolicy::LlmOnly) => (None, true),
                Decider::Online(RoutingPolicy::Entropy { threshold }) => {
                    let f = features.ok_or_else(|| Error::InvalidInput("entropy routing needs K >= 2".into()))?;
                    (None, entropy_decision(&f, *threshold))
                }
                Decider::Online(RoutingPolicy::Heuristic { threshold }) => (None, heuristic_decision(&scores, *threshold)),
                Decider::Online(RoutingPolicy::Risk { model, mask }) => {
                    let f = features.ok_or_else(|| Error::InvalidInput("risk routing needs K >= 2".into()))?;
                    let p = model.probability(&f, *mask)?;
                    (Some(p), model.decide(p))
                }
            };
            let budget_before = remaining;
            let escalate = decision && remaining.is_none_or(|r| r > 0);
            let (action, executor) = if escalate {
                let mut teacher_rng = rng::stream(self.root, &[purpose::TEACHER, tags[0], tags[1], tags[2]]);
                if let Some(r) = remaining.as_mut() {
                    *r -= 1;
                }
                llm_calls += 1;
                (self.teacher.act(env, &state, &mut teacher_rng), Executor::Llm)
            } else {
                (candidates[best].action, Executor::Slm)
            };
            let out = env.step(&state, action, seed, t)?;
            steps.push(StepRecord {
                context: ctx.clone(),
                candidates,
                verifier_scores: scores,
                chosen_action: action,
                executor,
                features,
                router_prob,
                decision,
                budget_remaining: budget_before,
            });
            state = out.state;
            if out.terminal {
                success = out.success;
                break;
            }
            ctx.push(action, out.observation);
        }
        Ok(PerturbedEpisode {
            task,
            seed,
            steps,
            success,
            llm_calls,
            budget_limit: budget,
        })
    }

    /// One episode under a deployable routing rule; `budget = None` is unlimited.
    pub fn run_episode(&self, task: TaskId, seed: PerturbationSeed, routing: &RoutingPolicy, budget: Option<u64>) -> Result<PerturbedEpisode> {
        self.run(task, seed, Decider::Online(routing), budget)
    }

    /// Offline diagnostic: the hindsight oracle.
    pub fn run_oracle_episode(
        &self,
        task: TaskId,
        seed: PerturbationSeed,
        hindsight: &HindsightTable,
        budget: Option<u64>,
    ) -> Result<PerturbedEpisode> {
        let d = oracle_decision(task, seed, hindsight)?;
        self.run(task, seed, Decider::Oracle(d), budget)
    }
}

/// Steps of SLM-only rollouts, each labelled with the episode failure.
pub fn routing_examples(episodes: &[PerturbedEpisode]) -> Result<Vec<RoutingExample>> {
    let mut out = Vec::new();
    for e in episodes {
        if e.llm_calls != 0 {
            return Err(Error::Provenance("routing labels need SLM-only rollouts".into()));
        }
        let label = (!e.success) as u8;
        for s in &e.steps {
            let features = s
                .features
                .ok_or_else(|| Error::InvalidInput("routing step without features".into()))?;
            out.push(RoutingExample {
                features,
                label,
                seed_id: e.seed.0,
                step_index: s.context.step_index,
                task: e.task,
            });
        }
    }
    Ok(out)
}

pub fn require_distilled(policy: &SoftmaxPolicy) -> Result<()> {
    if policy.stage != PolicyStage::Distilled {
        return Err(Error::Provenance(format!(
            "routing data must come from the distilled policy, got stage {:?}",
            policy.stage
        )));
    }
    Ok(())
}

/// SLM-only rollouts of the distilled policy over `tasks × seeds`, and their
/// step-level failure labels.
pub fn collect_routing_dataset(
    agent: &Agent<'_>,
    tasks: &[TaskId],
    seeds_per_task: usize,
    salt: u64,
) -> Result<(Vec<RoutingExample>, Vec<PerturbedEpisode>)> {
    require_distilled(agent.slm)?;
    let mut episodes = Vec::with_capacity(tasks.len() * seeds_per_task);
    for &task in tasks {
        for z in perturbation_seeds(agent.root, task, seeds_per_task, salt) {
            episodes.push(agent.run_episode(task, z, &RoutingPolicy::SlmOnly, None)?);
        }
    }
    Ok((routing_examples(&episodes)?, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::EnvConfig;
    use crate::router::RouterNet;

    struct Fixture {
        env: Environment,
        slm: SoftmaxPolicy,
        teacher: TeacherPolicy,
        verifier: VerifierSpec,
    }

    fn fixture() -> Fixture {
        let env = Environment::generate(EnvConfig::default(), 10, 4).unwrap();
        let mut slm = SoftmaxPolicy::zeros(&env.config);
        slm.stage = PolicyStage::Distilled;
        Fixture {
            env,
            slm,
            teacher: TeacherPolicy::default(),
            verifier: VerifierSpec::from_regime(crate::verifier::Regime::Noisy),
        }
    }

    fn agent(f: &Fixture) -> Agent<'_> {
        Agent {
            env: &f.env,
            slm: &f.slm,
            teacher: &f.teacher,
            verifier: &f.verifier,
            k: 5,
            root: 1,
        }
    }

    fn always_router() -> RoutingPolicy {
        RoutingPolicy::Risk {
            model: RouterModel {
                net: RouterNet::zeros(15, [8, 4], 0.0),
                threshold: 0.0,
            },
            mask: FeatureMask::Full,
        }
    }

    #[test]
    fn slm_and_llm_only() {
        let f = fixture();
        let a = agent(&f);
        for task in f.env.task_ids() {
            let e = a.run_episode(task, PerturbationSeed(3), &RoutingPolicy::SlmOnly, None).unwrap();
            assert_eq!(e.llm_calls, 0);
            let e = a.run_episode(task, PerturbationSeed(3), &RoutingPolicy::LlmOnly, None).unwrap();
            assert!(e.steps.iter().all(|s| s.executor == Executor::Llm));
            e.validate().unwrap();
        }
    }

    #[test]
    fn budget_gate_projects_decisions() {
        let f = fixture();
        let e = agent(&f)
            .run_episode(TaskId(0), PerturbationSeed(1), &always_router(), Some(3))
            .unwrap();
        // every task needs at least four steps, so the cap binds
        assert!(e.steps.len() > 3);
        assert_eq!(e.llm_calls, 3);
        for (i, s) in e.steps.iter().enumerate() {
            assert!(s.decision);
            let expect = if i < 3 { Executor::Llm } else { Executor::Slm };
            assert_eq!(s.executor, expect);
        }
        e.validate().unwrap();
    }

    #[test]
    fn decision_rules() {
        let mut f = RiskFeatures([0.0; 15]);
        f.0[0] = 1.0;
        assert!(entropy_decision(&f, 0.5));
        f.0[0] = 0.0;
        assert!(!entropy_decision(&f, 0.1));
        assert!(!entropy_decision(&f, f64::INFINITY));
        assert!(!heuristic_decision(&[1.0; 5], 0.5));
        assert!(heuristic_decision(&[0.0; 5], 0.01));
    }

    #[test]
    fn oracle_follows_hindsight() {
        let f = fixture();
        let a = agent(&f);
        let eps: Vec<PerturbedEpisode> = f
            .env
            .task_ids()
            .into_iter()
            .map(|t| a.run_episode(t, PerturbationSeed(7), &RoutingPolicy::SlmOnly, None).unwrap())
            .collect();
        let table = HindsightTable::from_slm_rollouts(&eps).unwrap();
        for e in &eps {
            let o = a.run_oracle_episode(e.task, e.seed, &table, None).unwrap();
            if e.success {
                assert_eq!(o, *e);
            } else {
                assert!(o.steps.iter().all(|s| s.executor == Executor::Llm));
            }
        }
        assert!(oracle_decision(TaskId(0), PerturbationSeed(8), &table).is_err());
        let llm = a.run_episode(TaskId(0), PerturbationSeed(7), &RoutingPolicy::LlmOnly, None).unwrap();
        assert!(HindsightTable::from_slm_rollouts(&[llm]).is_err());
    }

    #[test]
    fn routing_dataset_requires_distilled_policy() {
        let mut f = fixture();
        f.slm.stage = PolicyStage::BehaviorCloned;
        assert!(collect_routing_dataset(&agent(&f), &[TaskId(0)], 2, 0).is_err());
        f.slm.stage = PolicyStage::Distilled;
        let (examples, episodes) = collect_routing_dataset(&agent(&f), &f.env.task_ids(), 2, 0).unwrap();
        let expected: usize = episodes.iter().filter(|e| !e.success).map(|e| e.steps.len()).sum();
        assert_eq!(examples.iter().filter(|x| x.label == 1).count(), expected);
    }
}
