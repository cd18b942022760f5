//! Ablation grids over the consistency weight, the CVaR knob, and feature masks.
//!
//! Each grid point changes one stage and reruns everything downstream of it;
//! upstream artifacts come from the shared [`Base`].

use log::info;
use riskroute_core::distill::{ConsistencyPair, PreferencePair};
use riskroute_core::domain::{CVaRSpec, DatasetSplit};
use riskroute_core::env::Environment;
use riskroute_core::policy::SoftmaxPolicy;

use crate::config::Config;
use crate::error::CliResult;
use crate::pipeline::{self, RoutingSet, Run};
use crate::report::AblationRow;

/// Only the router is evaluated at ablation points.
const ROUTER_ONLY: [&str; 1] = ["risk_router"];

fn row(coords: Vec<(&str, String)>, eval: &pipeline::Evaluation) -> AblationRow {
    AblationRow {
        coords: coords.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        metrics: eval.metrics("risk_router").expect("risk_router was evaluated").clone(),
    }
}

/// Upstream artifacts shared by every grid point.
#[derive(Debug, Clone)]
pub struct Base {
    pub env: Environment,
    pub split: DatasetSplit,
    pub bc: SoftmaxPolicy,
    pub prefs: Vec<PreferencePair>,
    pub cons: Vec<ConsistencyPair>,
    pub distilled: SoftmaxPolicy,
    pub routing: RoutingSet,
}

impl From<Run> for Base {
    fn from(run: Run) -> Self {
        Self {
            env: run.env,
            split: run.split,
            bc: run.bc,
            prefs: run.prefs,
            cons: run.cons,
            distilled: run.distilled,
            routing: run.routing,
        }
    }
}

/// Re-distill at each consistency weight, then collect routing data, train the
/// router, and evaluate it.
pub fn lambda_cons(cfg: &Config, run: &Base, workers: &rayon::ThreadPool) -> CliResult<Vec<AblationRow>> {
    let mut out = Vec::new();
    for &lc in &cfg.eval.lambda_cons_grid {
        info!("ablation: lambda_cons = {lc}");
        let mut distill = cfg.distill;
        distill.lambda_cons = lc;
        let (slm, _) = pipeline::distill(&distill, &run.bc, &run.prefs, &run.cons)?;
        let routing = pipeline::collect_routing(cfg, &run.env, &run.split, &slm, workers)?;
        let stage = pipeline::train_router_stage(cfg, &cfg.router.train_spec(), cfg.features.mask, &routing.train, &routing.valid)?;
        let eval = pipeline::evaluate(cfg, &run.env, &run.split, &slm, &stage, &ROUTER_ONLY, workers)?;
        out.push(row(vec![("lambda_cons", lc.to_string())], &eval));
    }
    Ok(out)
}

/// Retrain the router at each `(α, ε)` on the shared routing data.
pub fn cvar(cfg: &Config, run: &Base, workers: &rayon::ThreadPool) -> CliResult<Vec<AblationRow>> {
    let mut out = Vec::new();
    for &[alpha, epsilon] in &cfg.eval.cvar_grid {
        info!("ablation: alpha = {alpha}, epsilon = {epsilon}");
        let mut spec = cfg.router.train_spec();
        spec.cvar = CVaRSpec {
            alpha,
            epsilon,
            ..spec.cvar
        };
        let stage = pipeline::train_router_stage(cfg, &spec, cfg.features.mask, &run.routing.train, &run.routing.valid)?;
        let eval = pipeline::evaluate(cfg, &run.env, &run.split, &run.distilled, &stage, &ROUTER_ONLY, workers)?;
        out.push(row(vec![("alpha", alpha.to_string()), ("epsilon", epsilon.to_string())], &eval));
    }
    Ok(out)
}

/// Retrain the router with each feature mask.
pub fn masks(cfg: &Config, run: &Base, workers: &rayon::ThreadPool) -> CliResult<Vec<AblationRow>> {
    let mut out = Vec::new();
    for &mask in &cfg.eval.mask_grid {
        info!("ablation: mask = {}", mask.name());
        let stage = pipeline::train_router_stage(cfg, &cfg.router.train_spec(), mask, &run.routing.train, &run.routing.valid)?;
        let eval = pipeline::evaluate(cfg, &run.env, &run.split, &run.distilled, &stage, &ROUTER_ONLY, workers)?;
        out.push(row(vec![("mask", mask.name().to_string())], &eval));
    }
    Ok(out)
}
