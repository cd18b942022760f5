//! Recovery distillation: preference pairs from BC rollouts, DPO against a frozen
//! reference, and a JSD consistency penalty across perturbation seeds.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::domain::{ActionId, Context, PerturbationSeed, TaskId};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::math;
use crate::policy::{self, descend, latent_trajectory, FrozenReference, PolicyStage, SoftmaxPolicy, TeacherPolicy, TrajectoryPool};
use crate::rng::{self, purpose};
use crate::verifier::VerifierSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    VerifierRanked,
    TeacherRecovered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context: Context,
    pub a_plus: ActionId,
    pub a_minus: ActionId,
    pub source: PairSource,
    pub task: TaskId,
    pub seed: PerturbationSeed,
    /// Parameter hash of the policy whose candidates produced the pair.
    pub generator_hash: [u8; 32],
}

/// Two perturbed contexts over the same latent trajectory prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPair {
    pub first: Context,
    pub second: Context,
    pub task: TaskId,
    /// Action of the latent planner at this state; used by transfer checks.
    pub optimal_action: ActionId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub beta: f64,
    pub lambda_cons: f64,
    /// The teacher is queried when every candidate scores below this.
    pub teacher_recovery_threshold: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lambda_cons: 0.20,
            teacher_recovery_threshold: 0.5,
            epochs: 100,
            learning_rate: 4.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.lambda_cons < 0.0 {
            return Err(Error::Config(format!("lambda_cons must be >= 0, got {}", self.lambda_cons)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStats {
    pub contexts: usize,
    pub verifier_ranked: usize,
    pub teacher_recovered: usize,
    /// Contexts whose positive and negative coincided.
    pub skipped: usize,
    pub consistency_pairs: usize,
}

/// Build `D_pref` from BC candidates on the perturbed pool and `D_cons` from
/// replays that share latent states.
pub fn build_preferences(
    bc_policy: &SoftmaxPolicy,
    env: &Environment,
    pool: &TrajectoryPool,
    verifier: &VerifierSpec,
    teacher: &TeacherPolicy,
    config: &DistillConfig,
    k: usize,
    root: u64,
) -> Result<(Vec<PreferencePair>, Vec<ConsistencyPair>, PairStats)> {
    if bc_policy.stage != PolicyStage::BehaviorCloned {
        return Err(Error::Provenance(format!(
            "preference pairs must come from the behavior-cloned policy, got stage {:?}",
            bc_policy.stage
        )));
    }
    if k < 2 {
        return Err(Error::InvalidInput(format!("need K >= 2 candidates, got {k}")));
    }
    let generator_hash = bc_policy.hash();
    let mut stats = PairStats::default();
    let mut prefs = Vec::new();
    for ep in &pool.perturbed {
        let actions: Vec<ActionId> = ep.steps.iter().map(|s| s.chosen_action).collect();
        let latents = latent_trajectory(env, ep.task, &actions)?;
        for (t, (step, (state, _))) in ep.steps.iter().zip(&latents).enumerate() {
            stats.contexts += 1;
            let mut r = rng::stream(root, &[purpose::PAIRS, ep.task.0 as u64, ep.seed.0, t as u64]);
            let candidates = bc_policy.sample_candidates(&step.context, k, &mut r);
            let scores: Vec<f64> = candidates.iter().map(|c| verifier.score(env, state, c.action, &mut r)).collect();
            let best = crate::verifier::argmax_first(&scores);
            let (a_plus, a_minus, source) = if scores[best] >= config.teacher_recovery_threshold {
                let mut worst = 0;
                for (i, &s) in scores.iter().enumerate() {
                    if s < scores[worst] {
                        worst = i;
                    }
                }
                (candidates[best].action, candidates[worst].action, PairSource::VerifierRanked)
            } else {
                (teacher.act(env, state, &mut r), candidates[best].action, PairSource::TeacherRecovered)
            };
            if a_plus == a_minus {
                stats.skipped += 1;
                continue;
            }
            match source {
                PairSource::VerifierRanked => stats.verifier_ranked += 1,
                PairSource::TeacherRecovered => stats.teacher_recovered += 1,
            }
            prefs.push(PreferencePair {
                context: step.context.clone(),
                a_plus,
                a_minus,
                source,
                task: ep.task,
                seed: ep.seed,
                generator_hash,
            });
        }
    }
    let cons = consistency_pairs(env, pool)?;
    stats.consistency_pairs = cons.len();
    Ok((prefs, cons, stats))
}

/// Pairs consecutive replays of each task step by step.
pub fn consistency_pairs(env: &Environment, pool: &TrajectoryPool) -> Result<Vec<ConsistencyPair>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < pool.perturbed.len() {
        let task = pool.perturbed[i].task;
        let mut j = i;
        while j < pool.perturbed.len() && pool.perturbed[j].task == task {
            j += 1;
        }
        let group = &pool.perturbed[i..j];
        if let Some(first) = group.first() {
            let actions: Vec<ActionId> = first.steps.iter().map(|s| s.chosen_action).collect();
            let latents = latent_trajectory(env, task, &actions)?;
            for w in group.windows(2) {
                for (t, (a, b)) in w[0].steps.iter().zip(&w[1].steps).enumerate() {
                    out.push(ConsistencyPair {
                        first: a.context.clone(),
                        second: b.context.clone(),
                        task,
                        optimal_action: env.optimal_action(&latents[t].0),
                    });
                }
            }
        }
        i = j;
    }
    Ok(out)
}

/// `-log σ(β u)` and `dL/du`.
pub fn dpo_loss_from_margin(u: f64, beta: f64) -> (f64, f64) {
    (-math::log_sigmoid(beta * u), -beta * math::sigmoid(-beta * u))
}

/// Log-ratio margin `u = [log π(a+) − log π_ref(a+)] − [log π(a−) − log π_ref(a−)]`.
pub fn dpo_margin(policy: &SoftmaxPolicy, reference: &FrozenReference, pair: &PreferencePair) -> f64 {
    let lp = policy.log_probs(&pair.context);
    let lr = reference.policy().log_probs(&pair.context);
    (lp[pair.a_plus] - lr[pair.a_plus]) - (lp[pair.a_minus] - lr[pair.a_minus])
}

pub fn dpo_loss(policy: &SoftmaxPolicy, reference: &FrozenReference, pair: &PreferencePair, beta: f64) -> f64 {
    dpo_loss_from_margin(dpo_margin(policy, reference, pair), beta).0
}

/// Mean JSD between the policy's action distributions on paired views.
pub fn consistency_loss(policy: &SoftmaxPolicy, pairs: &[ConsistencyPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|p| math::jsd(&policy.action_distribution(&p.first), &policy.action_distribution(&p.second)))
        .sum();
    total / pairs.len() as f64
}

/// Gradient of `JSD(softmax(l), softmax(m))` with respect to `l`.
fn jsd_logit_grad(p: &[f64], q: &[f64]) -> Vec<f64> {
    let g: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi > 0.0 { 0.5 * math::ln(2.0 * pi / (pi + qi)) } else { 0.0 })
        .collect();
    let dot: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
    p.iter().zip(&g).map(|(&pi, &gi)| pi * (gi - dot)).collect()
}

struct FeaturizedPair {
    phi: Vec<(u32, f64)>,
    a_plus: ActionId,
    a_minus: ActionId,
    ref_gap: f64,
}

struct FeaturizedView {
    first: Vec<(u32, f64)>,
    second: Vec<(u32, f64)>,
}

/// Combined objective `mean DPO + λ_cons · mean JSD`, its parts, and gradient.
struct Objective<'a> {
    template: &'a SoftmaxPolicy,
    pairs: Vec<FeaturizedPair>,
    views: Vec<FeaturizedView>,
    beta: f64,
    lambda_cons: f64,
}

impl Objective<'_> {
    fn eval(&self, theta: &[f64], want_grad: bool) -> (f64, f64, f64, Vec<f64>) {
        let map = &self.template.map;
        let (a_count, dim) = (map.action_count, map.dim());
        let inv_t = 1.0 / self.template.temperature;
        let mut grad = if want_grad { vec![0.0; theta.len()] } else { Vec::new() };
        let logits = |phi: &[(u32, f64)]| -> Vec<f64> {
            policy::logits(theta, phi, a_count, dim).into_iter().map(|l| l * inv_t).collect()
        };

        let mut dpo = 0.0;
        if !self.pairs.is_empty() {
            let scale = 1.0 / self.pairs.len() as f64;
            for p in &self.pairs {
                let lp = math::log_softmax(&logits(&p.phi));
                let u = lp[p.a_plus] - lp[p.a_minus] - p.ref_gap;
                let (loss, dl_du) = dpo_loss_from_margin(u, self.beta);
                dpo += loss * scale;
                if want_grad {
                    let mut g = vec![0.0; a_count];
                    g[p.a_plus] += dl_du * scale * inv_t;
                    g[p.a_minus] -= dl_du * scale * inv_t;
                    policy::accumulate(&mut grad, &p.phi, &g, a_count, dim);
                }
            }
        }

        let mut cons = 0.0;
        if !self.views.is_empty() && (self.lambda_cons > 0.0 || !want_grad) {
            let scale = 1.0 / self.views.len() as f64;
            for v in &self.views {
                let p = math::softmax(&logits(&v.first));
                let q = math::softmax(&logits(&v.second));
                cons += math::jsd(&p, &q) * scale;
                if want_grad && self.lambda_cons > 0.0 {
                    let w = self.lambda_cons * scale * inv_t;
                    let gp: Vec<f64> = jsd_logit_grad(&p, &q).into_iter().map(|x| x * w).collect();
                    let gq: Vec<f64> = jsd_logit_grad(&q, &p).into_iter().map(|x| x * w).collect();
                    policy::accumulate(&mut grad, &v.first, &gp, a_count, dim);
                    policy::accumulate(&mut grad, &v.second, &gq, a_count, dim);
                }
            }
        }
        (dpo + self.lambda_cons * cons, dpo, cons, grad)
    }
}

fn objective<'a>(
    template: &'a SoftmaxPolicy,
    reference: &FrozenReference,
    prefs: &[PreferencePair],
    cons: &[ConsistencyPair],
    beta: f64,
    lambda_cons: f64,
) -> Objective<'a> {
    let map = &template.map;
    let pairs = prefs
        .iter()
        .map(|p| {
            let lr = reference.policy().log_probs(&p.context);
            FeaturizedPair {
                phi: map.features(&p.context),
                a_plus: p.a_plus,
                a_minus: p.a_minus,
                ref_gap: lr[p.a_plus] - lr[p.a_minus],
            }
        })
        .collect();
    let views = cons
        .iter()
        .map(|c| FeaturizedView {
            first: map.features(&c.first),
            second: map.features(&c.second),
        })
        .collect();
    Objective {
        template,
        pairs,
        views,
        beta,
        lambda_cons,
    }
}

/// Combined objective and its gradient at a parameter vector, for external checks.
pub fn recovery_objective(
    policy: &SoftmaxPolicy,
    reference: &FrozenReference,
    prefs: &[PreferencePair],
    cons: &[ConsistencyPair],
    beta: f64,
    lambda_cons: f64,
) -> (f64, Vec<f64>) {
    let obj = objective(policy, reference, prefs, cons, beta, lambda_cons);
    let (total, _, _, grad) = obj.eval(&policy.params, true);
    (total, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub pairs: usize,
    pub consistency_pairs: usize,
    pub objective: Vec<f64>,
    pub initial_dpo: f64,
    pub final_dpo: f64,
    pub initial_consistency: f64,
    pub final_consistency: f64,
}

/// Minimize the combined objective starting from the BC parameters.
pub fn train_recovery(
    bc_policy: &SoftmaxPolicy,
    reference: &FrozenReference,
    prefs: &[PreferencePair],
    cons: &[ConsistencyPair],
    config: &DistillConfig,
) -> Result<(SoftmaxPolicy, DistillReport)> {
    config.validate()?;
    reference.verify()?;
    if bc_policy.stage != PolicyStage::BehaviorCloned || reference.recorded_hash() != bc_policy.hash() {
        return Err(Error::Provenance("distillation must start from the frozen behavior-cloned policy".into()));
    }
    if let Some(p) = prefs.iter().find(|p| p.generator_hash != reference.recorded_hash()) {
        return Err(Error::Provenance(format!(
            "preference pair for task {} was not generated by the reference policy",
            p.task.0
        )));
    }
    let obj = objective(bc_policy, reference, prefs, cons, config.beta, config.lambda_cons);
    let (_, initial_dpo, initial_cons, _) = obj.eval(&bc_policy.params, false);
    let mut params = bc_policy.params.clone();
    let history = descend(
        &mut params,
        |theta, want_grad| {
            let (total, _, _, grad) = obj.eval(theta, want_grad);
            (total, grad)
        },
        config.learning_rate,
        config.epochs,
    );
    let (_, final_dpo, final_cons, _) = obj.eval(&params, false);
    reference.verify()?;
    let mut out = bc_policy.clone();
    out.params = params;
    out.stage = PolicyStage::Distilled;
    Ok((
        out,
        DistillReport {
            pairs: prefs.len(),
            consistency_pairs: cons.len(),
            objective: history,
            initial_dpo,
            final_dpo,
            initial_consistency: initial_cons,
            final_consistency: final_cons,
        },
    ))
}

/// Outcome of the cross-seed transfer check for one pair of replays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferCheck {
    pub task: TaskId,
    pub risk_gap: f64,
    pub mean_jsd: f64,
    pub bound: f64,
}

/// Per-step surrogate `1 − π(a*|x)` summed over a trajectory, for each pair of
/// replays, against `H · sqrt(2 · mean JSD)` of that pair.
pub fn transfer_checks(policy: &SoftmaxPolicy, horizon: usize, pairs: &[ConsistencyPair]) -> Vec<TransferCheck> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < pairs.len() {
        // a run of steps t = 0, 1, ... belongs to one replay pair
        let mut j = i + 1;
        while j < pairs.len() && pairs[j].task == pairs[i].task && pairs[j].first.step_index > pairs[j - 1].first.step_index {
            j += 1;
        }
        let mut gap = 0.0;
        let mut jsd_sum = 0.0;
        for p in &pairs[i..j] {
            let a = policy.action_distribution(&p.first);
            let b = policy.action_distribution(&p.second);
            gap += (1.0 - a[p.optimal_action]) - (1.0 - b[p.optimal_action]);
            jsd_sum += math::jsd(&a, &b);
        }
        let mean_jsd = jsd_sum / (j - i) as f64;
        out.push(TransferCheck {
            task: pairs[i].task,
            risk_gap: gap.abs(),
            mean_jsd,
            bound: horizon as f64 * math::sqrt(2.0 * mean_jsd),
        });
        i = j;
    }
    out
}
