//! End-to-end acceptance checks. Each test prints one `[PASS]`/`[FAIL]` line
//! and then asserts the outcome.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use riskroute::config::Config;
use riskroute::pipeline;
use riskroute::theory::{self, Check, PlantedSize};

const SEED: u64 = 7;

fn report(check: &Check) {
    // straight to the stderr handle so the line survives libtest's output capture
    let _ = writeln!(std::io::stderr().lock(), "{}", check.line());
    assert!(check.passed, "{}", check.line());
}

fn timed(name: &str, limit: Duration, check: Check, elapsed: Duration) -> Check {
    let within = elapsed <= limit;
    Check {
        name: name.to_string(),
        passed: check.passed && within,
        detail: format!("{}; {:.1}s (limit {}s)", check.detail, elapsed.as_secs_f64(), limit.as_secs()),
    }
}

#[test]
fn c01_calibration_recovery() {
    let start = Instant::now();
    let net = theory::planted_router(PlantedSize::FULL, SEED).unwrap();
    let check = theory::calibration_recovery(&net).unwrap();
    report(&timed("calibration recovery", Duration::from_secs(60), check, start.elapsed()));
}

#[test]
fn c02_threshold_optimality() {
    let start = Instant::now();
    let check = theory::threshold_optimality(SEED);
    report(&timed("threshold optimality", Duration::from_secs(10), check, start.elapsed()));
}

#[test]
fn c03_regret_bound() {
    let net = theory::planted_router(PlantedSize::FULL, SEED).unwrap();
    // the router fit is shared with c01; only the bound itself is timed
    let start = Instant::now();
    let check = theory::regret_bound(&net, 20, SEED).unwrap();
    report(&timed("regret bound", Duration::from_secs(10), check, start.elapsed()));
}

#[test]
fn c04_tv_jsd_lemma() {
    report(&theory::tv_jsd_lemma(10_000, SEED));
}

#[test]
fn c05_best_of_k_bound() {
    let start = Instant::now();
    let check = theory::best_of_k_suite(100_000, SEED).unwrap();
    report(&timed("best-of-K bound", Duration::from_secs(60), check, start.elapsed()));
}

#[test]
fn c06_noisy_dpo_sign() {
    report(&theory::noisy_dpo_suite());
}

#[test]
fn c07_consistency_transfer() {
    report(&theory::consistency_suite(&Config::default()).unwrap());
}

#[test]
fn c08_gradient_checks() {
    report(&theory::gradient_suite(20, SEED).unwrap());
}

#[test]
fn c09_pipeline_invariants() {
    report(&theory::pipeline_invariants(1_000, SEED).unwrap());
}

#[test]
fn c10_cvar_knob_direction() {
    report(&theory::cvar_knob_suite(&[1, 2, 3], 20).unwrap());
}

/// Overrides that define the high-risk regime on top of the defaults.
const HIGH_RISK: &[(&str, &str)] = &[("router.threshold_mode", "\"bayes\"")];

/// Router SR may trail the heuristic by this much and still count as matching it.
const SR_MATCH: f64 = 0.01;

#[test]
fn c11_pareto_sanity() {
    let workers = pipeline::worker_pool(None).unwrap();
    let mut wins = 0;
    let mut details = Vec::new();
    for seed in 1..=5u64 {
        let mut sets: Vec<(String, String)> = HIGH_RISK.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        sets.push(("pipeline.seed".into(), seed.to_string()));
        let cfg = Config::from_toml_with_overrides("", &sets).unwrap();
        let run = pipeline::run_all(&cfg, &workers).unwrap();
        let ev = &run.evaluation;
        let router = ev.metrics("risk_router").unwrap();
        let oracle = ev.metrics("oracle").unwrap();
        let heur = ev.metrics("heuristic").unwrap();
        let (sr, llm) = (router.success_rate, router.llm_rate);

        let near_oracle = sr >= oracle.success_rate - 0.03;
        let cheap = llm <= 1.5 * oracle.llm_rate;
        let dominates = sr >= heur.success_rate && llm <= heur.llm_rate && (sr > heur.success_rate || llm < heur.llm_rate);
        let matches_cheaper = sr >= heur.success_rate - SR_MATCH && llm <= 0.75 * heur.llm_rate;
        let ok = near_oracle && cheap && (dominates || matches_cheaper);
        wins += ok as usize;
        details.push(format!(
            "seed {seed} {}: router {sr:.3}/{llm:.3} oracle {:.3}/{:.3} heuristic {:.3}/{:.3}",
            if ok { "ok" } else { "miss" },
            oracle.success_rate,
            oracle.llm_rate,
            heur.success_rate,
            heur.llm_rate
        ));
    }
    report(&Check {
        name: "Pareto sanity".into(),
        passed: wins >= 3,
        detail: format!("{wins}/5 seeds; {}", details.join("; ")),
    });
}

fn run_cli(dir: &Path) -> Duration {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_riskroute"))
        .arg("--dir")
        .arg(dir)
        .arg("run")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    start.elapsed()
}

#[test]
fn c12_determinism_and_speed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_cli(a.path());
    let second = run_cli(b.path());
    let mut differing = Vec::new();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in &names {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap_or_default();
        if x != y {
            differing.push(name.to_string_lossy().into_owned());
        }
    }
    let slowest = first.max(second);
    report(&Check {
        name: "determinism and speed".into(),
        passed: differing.is_empty() && slowest <= Duration::from_secs(300),
        detail: format!(
            "{} artifacts compared, differing {differing:?}; slowest run {:.1}s (limit 300s)",
            names.len(),
            slowest.as_secs_f64()
        ),
    });
}
