//! Stage functions shared by the CLI, the ablations, and the end-to-end tests.
//!
//! Every stage is a pure function of the config and its inputs. Rollout stages
//! fan out over `(task, seed)` on a rayon pool and collect in input order, so
//! the worker count never changes a result.

use log::{info, warn};
use rayon::prelude::*;
use riskroute_core::distill::{build_preferences, train_recovery, ConsistencyPair, DistillConfig, DistillReport, PairStats, PreferencePair};
use riskroute_core::domain::{derive_splits, DatasetSplit, PerturbationSeed, PerturbedEpisode, RoutingExample, TaskId};
use riskroute_core::env::Environment;
use riskroute_core::eval::{calibration_metrics, compute_metrics, RunMetrics};
use riskroute_core::features::FeatureMask;
use riskroute_core::policy::{collect_teacher_trajectories, perturbation_seeds, train_bc, BcReport, FrozenReference, SoftmaxPolicy, TrajectoryPool};
use riskroute_core::router::{
    fit_temperature, hard_decision_cost, select_threshold, sweep, threshold_grid, train_router, RouterModel, RoutingData, TemperatureFit,
    TrainReport, TrainSpec,
};
use riskroute_core::runtime::{require_distilled, routing_examples, Agent, HindsightTable, RoutingPolicy};
use riskroute_core::verifier::VerifierSpec;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{CliError, CliResult};

/// Seed-derivation salts, one per rollout population.
pub const POOL_SALT: u64 = 0;
pub const ROUTING_SALT: u64 = 1;
pub const EVAL_SALT: u64 = 2;

/// The six evaluated variants, in report order.
pub const VARIANTS: [&str; 6] = ["slm_only", "llm_only", "entropy", "heuristic", "risk_router", "oracle"];

/// Rayon pool with `n` threads; `None` uses every available core.
pub fn worker_pool(n: Option<usize>) -> CliResult<rayon::ThreadPool> {
    let n = n.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(CliError::Config("--workers must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {n} workers: {e}")))
}

pub fn gen_tasks(cfg: &Config) -> CliResult<(Environment, DatasetSplit)> {
    let p = &cfg.pipeline;
    let env = Environment::generate(cfg.env.clone(), p.tasks, p.task_seed)?;
    let split = derive_splits(&env.task_ids(), p.split, p.split_seed)?;
    Ok((env, split))
}

pub fn collect(cfg: &Config, env: &Environment, split: &DatasetSplit) -> CliResult<TrajectoryPool> {
    Ok(collect_teacher_trajectories(
        env,
        &split.train,
        cfg.pipeline.pool_seeds_per_task,
        &cfg.policy.teacher,
        cfg.pipeline.seed,
    )?)
}

pub fn behavior_clone(cfg: &Config, env: &Environment, pool: &TrajectoryPool) -> CliResult<(SoftmaxPolicy, BcReport)> {
    Ok(train_bc(&env.config, pool, &cfg.policy.bc)?)
}

pub fn build_pairs(
    cfg: &Config,
    env: &Environment,
    pool: &TrajectoryPool,
    bc: &SoftmaxPolicy,
) -> CliResult<(Vec<PreferencePair>, Vec<ConsistencyPair>, PairStats)> {
    Ok(build_preferences(
        bc,
        env,
        pool,
        &cfg.verifier.spec()?,
        &cfg.policy.teacher,
        &cfg.distill,
        cfg.pipeline.k,
        cfg.pipeline.seed,
    )?)
}

pub fn distill(
    distill: &DistillConfig,
    bc: &SoftmaxPolicy,
    prefs: &[PreferencePair],
    cons: &[ConsistencyPair],
) -> CliResult<(SoftmaxPolicy, DistillReport)> {
    let reference = FrozenReference::new(bc);
    Ok(train_recovery(bc, &reference, prefs, cons, distill)?)
}

fn agent<'a>(cfg: &'a Config, env: &'a Environment, slm: &'a SoftmaxPolicy, verifier: &'a VerifierSpec) -> Agent<'a> {
    Agent {
        env,
        slm,
        teacher: &cfg.policy.teacher,
        verifier,
        k: cfg.pipeline.k,
        root: cfg.pipeline.seed,
    }
}

fn jobs(root: u64, tasks: &[TaskId], seeds_per_task: usize, salt: u64) -> Vec<(TaskId, PerturbationSeed)> {
    tasks
        .iter()
        .flat_map(|&t| perturbation_seeds(root, t, seeds_per_task, salt).into_iter().map(move |z| (t, z)))
        .collect()
}

/// Roll out one routing rule over `tasks × seeds` in parallel.
pub fn rollout(
    cfg: &Config,
    env: &Environment,
    slm: &SoftmaxPolicy,
    routing: &RoutingPolicy,
    tasks: &[TaskId],
    seeds_per_task: usize,
    salt: u64,
    workers: &rayon::ThreadPool,
) -> CliResult<Vec<PerturbedEpisode>> {
    let verifier = cfg.verifier.spec()?;
    let agent = agent(cfg, env, slm, &verifier);
    let work = jobs(cfg.pipeline.seed, tasks, seeds_per_task, salt);
    let budget = cfg.runtime.budget;
    let out: Result<Vec<_>, _> = workers.install(|| {
        work.par_iter()
            .map(|&(t, z)| agent.run_episode(t, z, routing, budget))
            .collect()
    });
    Ok(out?)
}

/// Hindsight-oracle rollouts; the table must cover every `(task, seed)` job.
pub fn rollout_oracle(
    cfg: &Config,
    env: &Environment,
    slm: &SoftmaxPolicy,
    hindsight: &HindsightTable,
    tasks: &[TaskId],
    seeds_per_task: usize,
    salt: u64,
    workers: &rayon::ThreadPool,
) -> CliResult<Vec<PerturbedEpisode>> {
    let verifier = cfg.verifier.spec()?;
    let agent = agent(cfg, env, slm, &verifier);
    let work = jobs(cfg.pipeline.seed, tasks, seeds_per_task, salt);
    let budget = cfg.runtime.budget;
    let out: Result<Vec<_>, _> = workers.install(|| {
        work.par_iter()
            .map(|&(t, z)| agent.run_oracle_episode(t, z, hindsight, budget))
            .collect()
    });
    Ok(out?)
}

/// SLM-only rollouts of the distilled policy on training and validation tasks.
pub fn collect_routing(
    cfg: &Config,
    env: &Environment,
    split: &DatasetSplit,
    slm: &SoftmaxPolicy,
    workers: &rayon::ThreadPool,
) -> CliResult<RoutingSet> {
    require_distilled(slm)?;
    let n = cfg.pipeline.routing_seeds_per_task;
    let train = rollout(cfg, env, slm, &RoutingPolicy::SlmOnly, &split.train, n, ROUTING_SALT, workers)?;
    let valid = rollout(cfg, env, slm, &RoutingPolicy::SlmOnly, &split.valid, n, ROUTING_SALT, workers)?;
    Ok(RoutingSet {
        train: routing_examples(&train)?,
        valid: routing_examples(&valid)?,
        train_episodes: train,
        valid_episodes: valid,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingSet {
    pub train: Vec<RoutingExample>,
    pub valid: Vec<RoutingExample>,
    pub train_episodes: Vec<PerturbedEpisode>,
    pub valid_episodes: Vec<PerturbedEpisode>,
}

/// Trained router plus the validation-swept thresholds of the baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterStage {
    pub model: RouterModel,
    pub mask: FeatureMask,
    pub report: TrainReport,
    pub temperature: TemperatureFit,
    pub entropy_threshold: f64,
    pub heuristic_threshold: f64,
    /// ECE, Brier, AUROC of calibrated probabilities on the validation split.
    pub validation_ece: f64,
    pub validation_brier: f64,
    pub validation_auroc: Option<f64>,
}

pub fn train_router_stage(
    cfg: &Config,
    spec: &TrainSpec,
    mask: FeatureMask,
    train: &[RoutingExample],
    valid: &[RoutingExample],
) -> CliResult<RouterStage> {
    let train_data = RoutingData::from_examples(train, mask);
    let valid_data = RoutingData::from_examples(valid, mask);
    info!(
        "router: {} train steps ({} positive), {} validation steps",
        train_data.len(),
        train_data.positives(),
        valid_data.len()
    );
    let (mut net, report) = train_router(&train_data, spec)?;
    let temperature = fit_temperature(&mut net, &valid_data)?;
    if let Some(w) = &temperature.warning {
        warn!("{w}");
    }
    let probs = net.probs_eval(&valid_data.inputs)?;
    let threshold = select_threshold(&probs, &valid_data.labels, &spec.costs, cfg.router.threshold_mode);
    let (ece, brier, auroc) = calibration_metrics(&probs, &valid_data.labels);

    let labels = &valid_data.labels;
    let grid = threshold_grid();
    let entropy_threshold = sweep(&grid, |tau| {
        hard_decision_cost(valid.iter().map(|e| e.features.0[0] >= tau), labels, &spec.costs)
    })
    .0;
    // best verifier score sits in slot 6
    let heuristic_threshold = sweep(&grid, |tau| {
        hard_decision_cost(valid.iter().map(|e| e.features.0[6] < tau), labels, &spec.costs)
    })
    .0;
    Ok(RouterStage {
        model: RouterModel { net, threshold },
        mask,
        report,
        temperature,
        entropy_threshold,
        heuristic_threshold,
        validation_ece: ece,
        validation_brier: brier,
        validation_auroc: auroc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<VariantRow>,
    pub episodes: Vec<(String, Vec<PerturbedEpisode>)>,
}

impl Evaluation {
    pub fn metrics(&self, variant: &str) -> Option<&RunMetrics> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| &r.metrics)
    }
}

pub fn routing_policy(variant: &str, stage: &RouterStage) -> CliResult<RoutingPolicy> {
    Ok(match variant {
        "slm_only" => RoutingPolicy::SlmOnly,
        "llm_only" => RoutingPolicy::LlmOnly,
        "entropy" => RoutingPolicy::Entropy {
            threshold: stage.entropy_threshold,
        },
        "heuristic" => RoutingPolicy::Heuristic {
            threshold: stage.heuristic_threshold,
        },
        "risk_router" => RoutingPolicy::Risk {
            model: stage.model.clone(),
            mask: stage.mask,
        },
        other => return Err(CliError::Config(format!("unknown variant `{other}`; expected one of {VARIANTS:?}"))),
    })
}

/// Evaluate the requested variants on the test tasks with fresh seeds. The
/// oracle needs SLM-only outcomes on the same seeds, so those always run first.
pub fn evaluate(
    cfg: &Config,
    env: &Environment,
    split: &DatasetSplit,
    slm: &SoftmaxPolicy,
    stage: &RouterStage,
    variants: &[&str],
    workers: &rayon::ThreadPool,
) -> CliResult<Evaluation> {
    let n = cfg.pipeline.eval_seeds_per_task;
    let tasks = &split.test;
    let slm_only = rollout(cfg, env, slm, &RoutingPolicy::SlmOnly, tasks, n, EVAL_SALT, workers)?;
    let mut eval = Evaluation {
        rows: Vec::new(),
        episodes: Vec::new(),
    };
    for &v in variants {
        let episodes = match v {
            "slm_only" => slm_only.clone(),
            "oracle" => {
                let table = HindsightTable::from_slm_rollouts(&slm_only)?;
                rollout_oracle(cfg, env, slm, &table, tasks, n, EVAL_SALT, workers)?
            }
            other => rollout(cfg, env, slm, &routing_policy(other, stage)?, tasks, n, EVAL_SALT, workers)?,
        };
        let mut metrics = compute_metrics(&episodes, cfg.eval.bootstrap_seed)?;
        if v == "risk_router" {
            metrics.ece = Some(stage.validation_ece);
            metrics.brier = Some(stage.validation_brier);
            metrics.auroc = stage.validation_auroc;
        }
        eval.rows.push(VariantRow {
            variant: v.to_string(),
            metrics,
        });
        eval.episodes.push((v.to_string(), episodes));
    }
    Ok(eval)
}

/// Every in-memory artifact of one full run.
#[derive(Debug, Clone)]
pub struct Run {
    pub env: Environment,
    pub split: DatasetSplit,
    pub pool: TrajectoryPool,
    pub bc: SoftmaxPolicy,
    pub bc_report: BcReport,
    pub prefs: Vec<PreferencePair>,
    pub cons: Vec<ConsistencyPair>,
    pub pair_stats: PairStats,
    pub distilled: SoftmaxPolicy,
    pub distill_report: DistillReport,
    pub routing: RoutingSet,
    pub router: RouterStage,
    pub evaluation: Evaluation,
}

/// All stages in order, without touching the filesystem.
pub fn run_all(cfg: &Config, workers: &rayon::ThreadPool) -> CliResult<Run> {
    let (env, split) = gen_tasks(cfg)?;
    let pool = collect(cfg, &env, &split)?;
    let (bc, bc_report) = behavior_clone(cfg, &env, &pool)?;
    let (prefs, cons, pair_stats) = build_pairs(cfg, &env, &pool, &bc)?;
    let (distilled, distill_report) = distill(&cfg.distill, &bc, &prefs, &cons)?;
    let routing = collect_routing(cfg, &env, &split, &distilled, workers)?;
    let router = train_router_stage(cfg, &cfg.router.train_spec(), cfg.features.mask, &routing.train, &routing.valid)?;
    let evaluation = evaluate(cfg, &env, &split, &distilled, &router, &VARIANTS, workers)?;
    Ok(Run {
        env,
        split,
        pool,
        bc,
        bc_report,
        prefs,
        cons,
        pair_stats,
        distilled,
        distill_report,
        routing,
        router,
        evaluation,
    })
}
