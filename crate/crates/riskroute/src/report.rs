//! CSV and JSON result tables.

use std::path::Path;

use riskroute_core::eval::{pareto_front, RunMetrics, BOOTSTRAP_LEVEL, BOOTSTRAP_RESAMPLES, ECE_BINS};
use riskroute_core::router::EpochStats;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::pipeline::VariantRow;

const METRIC_COLUMNS: [&str; 9] = ["episodes", "steps", "success_rate", "llm_rate", "ci_low", "ci_high", "ece", "brier", "auroc"];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn metric_fields(m: &RunMetrics) -> Vec<String> {
    vec![
        m.episodes.to_string(),
        m.steps.to_string(),
        m.success_rate.to_string(),
        m.llm_rate.to_string(),
        m.ci_low.to_string(),
        m.ci_high.to_string(),
        opt(m.ece),
        opt(m.brier),
        opt(m.auroc),
    ]
}

fn writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Config(format!("{}: {other:?}", path.display())),
    })
}

/// `metrics.csv`: one row per variant.
pub fn write_metrics(path: &Path, rows: &[VariantRow]) -> CliResult<()> {
    let mut w = writer(path)?;
    let mut header = vec!["variant"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.variant.clone()];
        rec.extend(metric_fields(&r.metrics));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// `pareto.csv`: `(llm_rate, SR, ci_low, ci_high)` per variant plus frontier membership.
pub fn write_pareto(path: &Path, rows: &[VariantRow]) -> CliResult<()> {
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.metrics.llm_rate, r.metrics.success_rate)).collect();
    let front = pareto_front(&points);
    let mut w = writer(path)?;
    w.write_record(["variant", "llm_rate", "success_rate", "ci_low", "ci_high", "on_front"])?;
    for (i, r) in rows.iter().enumerate() {
        let m = &r.metrics;
        w.write_record([
            r.variant.clone(),
            m.llm_rate.to_string(),
            m.success_rate.to_string(),
            m.ci_low.to_string(),
            m.ci_high.to_string(),
            front.contains(&i).to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Per-epoch router training trace.
pub fn write_training(path: &Path, epochs: &[EpochStats]) -> CliResult<()> {
    let mut w = writer(path)?;
    w.write_record(["epoch", "mean_risk", "cvar", "brier", "lambda"])?;
    for e in epochs {
        w.write_record([
            e.epoch.to_string(),
            e.mean_risk.to_string(),
            e.cvar.to_string(),
            e.brier.to_string(),
            e.lambda.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// One ablation row: grid coordinates first, then the metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub coords: Vec<(String, String)>,
    pub metrics: RunMetrics,
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> CliResult<()> {
    let mut w = writer(path)?;
    if let Some(first) = rows.first() {
        let mut header: Vec<&str> = first.coords.iter().map(|(k, _)| k.as_str()).collect();
        header.extend(METRIC_COLUMNS);
        w.write_record(&header)?;
    }
    for r in rows {
        let mut rec: Vec<String> = r.coords.iter().map(|(_, v)| v.clone()).collect();
        rec.extend(metric_fields(&r.metrics));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Serialize)]
struct EvalSettings {
    ece_bins: usize,
    bootstrap_resamples: usize,
    bootstrap_level: f64,
    bootstrap_seed: u64,
}

#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    config_hash: &'a str,
    settings: EvalSettings,
    variants: &'a [VariantRow],
    pareto_front: Vec<&'a str>,
}

pub fn summary<'a>(config_hash: &'a str, bootstrap_seed: u64, rows: &'a [VariantRow]) -> Summary<'a> {
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.metrics.llm_rate, r.metrics.success_rate)).collect();
    Summary {
        config_hash,
        settings: EvalSettings {
            ece_bins: ECE_BINS,
            bootstrap_resamples: BOOTSTRAP_RESAMPLES,
            bootstrap_level: BOOTSTRAP_LEVEL,
            bootstrap_seed,
        },
        variants: rows,
        pareto_front: pareto_front(&points).into_iter().map(|i| rows[i].variant.as_str()).collect(),
    }
}

pub fn write_summary(path: &Path, summary: &Summary<'_>) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
