use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use riskroute_core::domain::{PerturbedEpisode, TaskId};
use riskroute_core::runtime::{routing_examples, HindsightTable, RoutingPolicy};

use riskroute::ablate::{self, Base};
use riskroute::config::Config;
use riskroute::pipeline::{self, EVAL_SALT, VARIANTS};
use riskroute::records;
use riskroute::report;
use riskroute::store::{self, stage, Store};
use riskroute::theory;
use riskroute::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "riskroute", version, about = "Risk-calibrated routing between a small policy and a teacher")]
struct Cli {
    /// TOML config file; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set router.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "run")]
    dir: PathBuf,
    /// Threads for rollout stages; defaults to every available core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the task set and the train/valid/test split.
    GenTasks,
    /// Collect teacher demonstrations and perturbed replays on training tasks.
    Collect,
    /// Behavior-clone the small policy.
    TrainBc,
    /// Build preference and consistency pairs from the cloned policy.
    BuildPairs,
    /// Preference plus consistency fine-tuning against the frozen clone.
    Distill,
    /// Roll out the distilled policy alone and label every step.
    CollectRouting,
    /// Train, temperature-scale, and threshold the risk router.
    TrainRouter,
    /// Roll out one variant and write its episodes.
    Rollout {
        #[arg(long, default_value = "risk_router")]
        variant: String,
        /// Per-episode cap on teacher calls.
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long, value_enum, default_value_t = TaskSet::Test)]
        tasks: TaskSet,
        /// Perturbation seeds per task; defaults to the evaluation count.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value = "episodes.rljson")]
        out: PathBuf,
    },
    /// Turn SLM-only episodes into labelled routing examples.
    ExtractFeatures {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate all six variants on the test tasks.
    Evaluate,
    /// Sweep the consistency weight, the CVaR knob, or the feature mask.
    Ablate {
        #[arg(long, value_enum, default_value_t = Grid::All)]
        grid: Grid,
    },
    /// Every stage in order, then evaluation.
    Run,
    /// Property and oracle checks; exits 4 if any fails.
    VerifyTheory {
        /// Full problem sizes plus the pipeline-backed checks.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskSet {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Grid {
    LambdaCons,
    Cvar,
    Mask,
    All,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = Config::load(cli.config.as_deref(), &cli.sets)?;
    let store = Store::new(&cli.dir, &cfg.hash())?;
    let workers = || pipeline::worker_pool(cli.workers);
    match cli.command {
        Command::GenTasks => gen_tasks(&cfg, &store),
        Command::Collect => collect(&cfg, &store),
        Command::TrainBc => train_bc(&cfg, &store),
        Command::BuildPairs => build_pairs(&cfg, &store),
        Command::Distill => distill(&cfg, &store),
        Command::CollectRouting => collect_routing(&cfg, &store, &workers()?),
        Command::TrainRouter => train_router(&cfg, &store),
        Command::Rollout {
            variant,
            budget,
            tasks,
            seeds,
            out,
        } => rollout(&cfg, &store, &workers()?, &variant, budget, tasks, seeds, &out),
        Command::ExtractFeatures { episodes, out } => extract_features(&store, &episodes, &out),
        Command::Evaluate => evaluate(&cfg, &store, &workers()?),
        Command::Ablate { grid } => run_ablation(&cfg, &store, &workers()?, grid),
        Command::Run => {
            let start = Instant::now();
            gen_tasks(&cfg, &store)?;
            collect(&cfg, &store)?;
            train_bc(&cfg, &store)?;
            build_pairs(&cfg, &store)?;
            distill(&cfg, &store)?;
            let pool = workers()?;
            collect_routing(&cfg, &store, &pool)?;
            train_router(&cfg, &store)?;
            evaluate(&cfg, &store, &pool)?;
            info!("pipeline finished in {:.1} s", start.elapsed().as_secs_f64());
            Ok(())
        }
        Command::VerifyTheory { full, seed } => verify_theory(&cfg, full, seed),
    }
}

fn gen_tasks(cfg: &Config, store: &Store) -> CliResult<()> {
    let (env, split) = pipeline::gen_tasks(cfg)?;
    info!(
        "{} tasks: {} train, {} valid, {} test",
        env.tasks.len(),
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    store.save_tasks(&env, &split)
}

fn collect(cfg: &Config, store: &Store) -> CliResult<()> {
    let (env, split) = store.load_tasks()?;
    let pool = pipeline::collect(cfg, &env, &split)?;
    info!("{} expert and {} perturbed episodes", pool.expert.len(), pool.perturbed.len());
    store.save_pool(&pool)
}

fn train_bc(cfg: &Config, store: &Store) -> CliResult<()> {
    let (env, _) = store.load_tasks()?;
    let pool = store.load_pool()?;
    let (bc, report) = pipeline::behavior_clone(cfg, &env, &pool)?;
    info!("behavior cloning loss {:?} -> {:?}", report.losses.first(), report.losses.last());
    store.save_policy(store::BC, stage::TRAIN_BC, &bc)
}

fn build_pairs(cfg: &Config, store: &Store) -> CliResult<()> {
    let (env, _) = store.load_tasks()?;
    let pool = store.load_pool()?;
    let bc = store.load_bc()?;
    let (prefs, cons, stats) = pipeline::build_pairs(cfg, &env, &pool, &bc)?;
    info!("pairs: {stats:?}");
    store.save_pairs(&prefs, &cons, &stats)
}

fn distill(cfg: &Config, store: &Store) -> CliResult<()> {
    let bc = store.load_bc()?;
    let (prefs, cons) = store.load_pairs()?;
    let (slm, report) = pipeline::distill(&cfg.distill, &bc, &prefs, &cons)?;
    info!(
        "distill: {} preference pairs, {} consistency pairs; dpo {:.4} -> {:.4}, consistency {:.5} -> {:.5}",
        report.pairs, report.consistency_pairs, report.initial_dpo, report.final_dpo, report.initial_consistency, report.final_consistency
    );
    store.save_policy(store::SLM, stage::DISTILL, &slm)?;
    store.save_distill_report(&report)
}

fn collect_routing(cfg: &Config, store: &Store, workers: &rayon::ThreadPool) -> CliResult<()> {
    let (env, split) = store.load_tasks()?;
    let slm = store.load_slm()?;
    let routing = pipeline::collect_routing(cfg, &env, &split, &slm, workers)?;
    info!("routing: {} train and {} validation steps", routing.train.len(), routing.valid.len());
    store.save_routing(&routing)
}

fn train_router(cfg: &Config, store: &Store) -> CliResult<()> {
    let (_, split) = store.load_tasks()?;
    let routing = store.load_routing(&split)?;
    let stage = pipeline::train_router_stage(cfg, &cfg.router.train_spec(), cfg.features.mask, &routing.train, &routing.valid)?;
    info!(
        "router: T = {:.3}, threshold = {:.2}, validation ECE = {:.4}",
        stage.model.net.temperature, stage.model.threshold, stage.validation_ece
    );
    store.save_router(&stage)
}

#[allow(clippy::too_many_arguments)]
fn rollout(
    cfg: &Config,
    store: &Store,
    workers: &rayon::ThreadPool,
    variant: &str,
    budget: Option<u64>,
    tasks: TaskSet,
    seeds: Option<usize>,
    out: &Path,
) -> CliResult<()> {
    let mut cfg = cfg.clone();
    if budget.is_some() {
        cfg.runtime.budget = budget;
    }
    let (env, split) = store.load_tasks()?;
    let slm = store.load_slm()?;
    let ids: &[TaskId] = match tasks {
        TaskSet::Train => &split.train,
        TaskSet::Valid => &split.valid,
        TaskSet::Test => &split.test,
    };
    let n = seeds.unwrap_or(cfg.pipeline.eval_seeds_per_task);
    let episodes = match variant {
        "slm_only" => pipeline::rollout(&cfg, &env, &slm, &RoutingPolicy::SlmOnly, ids, n, EVAL_SALT, workers)?,
        "llm_only" => pipeline::rollout(&cfg, &env, &slm, &RoutingPolicy::LlmOnly, ids, n, EVAL_SALT, workers)?,
        "oracle" => {
            let slm_only = pipeline::rollout(&cfg, &env, &slm, &RoutingPolicy::SlmOnly, ids, n, EVAL_SALT, workers)?;
            let table = HindsightTable::from_slm_rollouts(&slm_only)?;
            pipeline::rollout_oracle(&cfg, &env, &slm, &table, ids, n, EVAL_SALT, workers)?
        }
        other => {
            let stage = store.load_router()?;
            pipeline::rollout(&cfg, &env, &slm, &pipeline::routing_policy(other, &stage)?, ids, n, EVAL_SALT, workers)?
        }
    };
    let header = store
        .header(stage::ROLLOUT)
        .with_meta(serde_json::json!({ "variant": variant, "budget": cfg.runtime.budget }));
    info!("{} episodes of {variant}", episodes.len());
    records::write(out, &header, &episodes)
}

fn extract_features(store: &Store, episodes: &Path, out: &Path) -> CliResult<()> {
    if !episodes.is_file() {
        return Err(CliError::MissingStage {
            stage: stage::ROLLOUT,
            path: episodes.to_path_buf(),
        });
    }
    let (header, eps): (_, Vec<PerturbedEpisode>) = records::read(episodes)?;
    if header.stage != stage::ROLLOUT {
        return Err(CliError::WrongStage {
            path: episodes.to_path_buf(),
            expected: stage::ROLLOUT,
            found: header.stage,
        });
    }
    if header.config_hash != store.config_hash {
        warn!("{} was produced under a different config", episodes.display());
    }
    let examples = routing_examples(&eps)?;
    info!("{} routing examples from {} episodes", examples.len(), eps.len());
    records::write(out, &store.header(stage::EXTRACT_FEATURES), &examples)
}

fn evaluate(cfg: &Config, store: &Store, workers: &rayon::ThreadPool) -> CliResult<()> {
    let (env, split) = store.load_tasks()?;
    let slm = store.load_slm()?;
    let stage = store.load_router()?;
    let eval = pipeline::evaluate(cfg, &env, &split, &slm, &stage, &VARIANTS, workers)?;
    for r in &eval.rows {
        let m = &r.metrics;
        info!(
            "{:<12} SR {:.3} [{:.3}, {:.3}]  llm_rate {:.3}",
            r.variant, m.success_rate, m.ci_low, m.ci_high, m.llm_rate
        );
    }
    report::write_metrics(&store.path(store::METRICS), &eval.rows)?;
    report::write_pareto(&store.path(store::PARETO), &eval.rows)?;
    report::write_summary(
        &store.path(store::SUMMARY),
        &report::summary(&store.config_hash, cfg.eval.bootstrap_seed, &eval.rows),
    )
}

fn run_ablation(cfg: &Config, store: &Store, workers: &rayon::ThreadPool, grid: Grid) -> CliResult<()> {
    let (env, split) = store.load_tasks()?;
    let bc = store.load_bc()?;
    let (prefs, cons) = store.load_pairs()?;
    let distilled = store.load_slm()?;
    let routing = store.load_routing(&split)?;
    // the router checkpoint is not used, but its absence means the base run is incomplete
    store.load_router()?;
    let base = Base {
        env,
        split,
        bc,
        prefs,
        cons,
        distilled,
        routing,
    };
    if matches!(grid, Grid::LambdaCons | Grid::All) {
        let rows = ablate::lambda_cons(cfg, &base, workers)?;
        report::write_ablation(&store.path("ablation_lambda_cons.csv"), &rows)?;
    }
    if matches!(grid, Grid::Cvar | Grid::All) {
        let rows = ablate::cvar(cfg, &base, workers)?;
        report::write_ablation(&store.path("ablation_cvar.csv"), &rows)?;
    }
    if matches!(grid, Grid::Mask | Grid::All) {
        let rows = ablate::masks(cfg, &base, workers)?;
        report::write_ablation(&store.path("ablation_mask.csv"), &rows)?;
    }
    Ok(())
}

fn verify_theory(cfg: &Config, full: bool, seed: u64) -> CliResult<()> {
    let checks = if full {
        theory::full_suite(cfg, seed)?
    } else {
        theory::quick_suite(seed)?
    };
    for c in &checks {
        println!("{}", c.line());
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Theory(failed.join(", ")))
    }
}
