//! Run configuration: one TOML file with a block per module, plus overrides from
//! `RISKROUTE__BLOCK__KEY` environment variables and `--set block.key=value` flags.

use std::path::Path;

use riskroute_core::distill::DistillConfig;
use riskroute_core::domain::{CVaRSpec, CostSpec, EnvConfig};
use riskroute_core::features::FeatureMask;
use riskroute_core::policy::{BcConfig, TeacherPolicy};
use riskroute_core::router::{ThresholdMode, TrainSpec};
use riskroute_core::verifier::{QualityLevels, Regime, VerifierSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "RISKROUTE__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineBlock {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub tasks: usize,
    pub task_seed: u64,
    pub split: [f64; 3],
    pub split_seed: u64,
    pub pool_seeds_per_task: usize,
    pub routing_seeds_per_task: usize,
    pub eval_seeds_per_task: usize,
    pub k: usize,
}

impl Default for PipelineBlock {
    fn default() -> Self {
        Self {
            seed: 42,
            tasks: 200,
            task_seed: 7,
            split: [0.70, 0.15, 0.15],
            split_seed: 42,
            pool_seeds_per_task: 5,
            routing_seeds_per_task: 20,
            eval_seeds_per_task: 10,
            k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyBlock {
    pub teacher: TeacherPolicy,
    pub bc: BcConfig,
}

impl Default for PolicyBlock {
    fn default() -> Self {
        Self {
            teacher: TeacherPolicy::default(),
            bc: BcConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierBlock {
    /// Named preset; when set it overrides `eta_v`.
    pub regime: Option<Regime>,
    pub eta_v: f64,
    pub gamma_threshold: f64,
    pub levels: QualityLevels,
}

impl Default for VerifierBlock {
    fn default() -> Self {
        Self {
            regime: Some(Regime::Noisy),
            eta_v: Regime::Noisy.eta_v(),
            gamma_threshold: 0.5,
            levels: QualityLevels::default(),
        }
    }
}

impl VerifierBlock {
    pub fn spec(&self) -> CliResult<VerifierSpec> {
        let eta = self.regime.map_or(self.eta_v, Regime::eta_v);
        Ok(VerifierSpec::new(eta, self.gamma_threshold, self.levels)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesBlock {
    /// Inference-time mask for the risk router.
    pub mask: FeatureMask,
}

impl Default for FeaturesBlock {
    fn default() -> Self {
        Self { mask: FeatureMask::Full }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterBlock {
    pub hidden: [usize; 2],
    pub dropout: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dual_learning_rate: f64,
    pub epochs: usize,
    pub batch_steps: usize,
    pub seed: u64,
    pub threshold_mode: ThresholdMode,
    pub costs: CostSpec,
    pub cvar: CVaRSpec,
}

impl Default for RouterBlock {
    fn default() -> Self {
        let t = TrainSpec::default();
        Self {
            hidden: t.hidden,
            dropout: t.dropout,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            dual_learning_rate: t.dual_learning_rate,
            epochs: t.epochs,
            batch_steps: t.batch_steps,
            seed: t.seed,
            threshold_mode: ThresholdMode::ValidationSweep,
            costs: t.costs,
            cvar: t.cvar,
        }
    }
}

impl RouterBlock {
    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec {
            hidden: self.hidden,
            dropout: self.dropout,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            dual_learning_rate: self.dual_learning_rate,
            epochs: self.epochs,
            batch_steps: self.batch_steps,
            costs: self.costs,
            cvar: self.cvar,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeBlock {
    /// Per-episode teacher-call cap; absent means unlimited.
    pub budget: Option<u64>,
}

impl Default for RuntimeBlock {
    fn default() -> Self {
        Self { budget: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    pub bootstrap_seed: u64,
    pub lambda_cons_grid: Vec<f64>,
    /// `(alpha, epsilon)` points.
    pub cvar_grid: Vec<[f64; 2]>,
    pub mask_grid: Vec<FeatureMask>,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            bootstrap_seed: 2024,
            lambda_cons_grid: vec![0.0, 0.05, 0.1, 0.2, 0.5],
            cvar_grid: vec![
                [0.05, 0.02],
                [0.05, 0.05],
                [0.10, 0.05],
                [0.10, 0.10],
                [0.20, 0.05],
                [0.20, 0.10],
                [0.20, 0.15],
                [0.30, 0.15],
            ],
            mask_grid: FeatureMask::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub pipeline: PipelineBlock,
    pub env: EnvConfig,
    pub policy: PolicyBlock,
    pub verifier: VerifierBlock,
    pub distill: DistillConfig,
    pub features: FeaturesBlock,
    pub router: RouterBlock,
    pub runtime: RuntimeBlock,
    pub eval: EvalBlock,
}

impl Config {
    /// Parse TOML text and apply `block.key=value` overrides.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> CliResult<Self> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        for (path, raw) in overrides {
            set_path(&mut value, path, raw)?;
        }
        let config: Config = value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Load a file (or defaults when `path` is `None`), then environment
    /// overrides, then explicit `--set` overrides.
    pub fn load(path: Option<&Path>, sets: &[String]) -> CliResult<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut overrides = env_overrides(std::env::vars());
        for s in sets {
            overrides.push(parse_assignment(s)?);
        }
        Self::from_toml_with_overrides(&text, &overrides)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.env.validate()?;
        self.verifier.spec()?;
        self.distill.validate()?;
        self.router.costs.validate()?;
        self.router.cvar.validate()?;
        let p = &self.pipeline;
        if p.k < 2 {
            return Err(CliError::Config(format!("pipeline.k must be >= 2, got {}", p.k)));
        }
        if p.tasks < 3 {
            return Err(CliError::Config("pipeline.tasks must be >= 3".into()));
        }
        if p.routing_seeds_per_task == 0 || p.eval_seeds_per_task == 0 {
            return Err(CliError::Config("seed counts must be positive".into()));
        }
        if self.router.epochs == 0 || self.router.batch_steps == 0 {
            return Err(CliError::Config("router.epochs and router.batch_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.router.dropout) {
            return Err(CliError::Config("router.dropout must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// `block.key=value` → (`block.key`, `value`).
pub fn parse_assignment(s: &str) -> CliResult<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{s}` must look like block.key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// `RISKROUTE__ROUTER__EPOCHS=5` → (`router.epochs`, `5`).
pub fn env_overrides(vars: impl Iterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .filter_map(|(k, v)| {
            k.strip_prefix(ENV_PREFIX)
                .map(|rest| (rest.split("__").map(str::to_lowercase).collect::<Vec<_>>().join("."), v))
        })
        .collect();
    out.sort();
    out
}

fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, path: &str, raw: &str) -> CliResult<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override path `{path}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{path}` walks through a non-table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        let back = Config::from_toml_with_overrides(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn overrides_apply() {
        let c = Config::from_toml_with_overrides(
            "[router]\nepochs = 3\n",
            &[
                ("router.cvar.alpha".into(), "0.05".into()),
                ("env.families".into(), "[\"tool_flaky\"]".into()),
                ("verifier.regime".into(), "sharp".into()),
            ],
        )
        .unwrap();
        assert_eq!(c.router.epochs, 3);
        assert_eq!(c.router.cvar.alpha, 0.05);
        assert_eq!(c.env.families.len(), 1);
        assert_eq!(c.verifier.regime, Some(Regime::Sharp));
        assert_ne!(c.hash(), Config::default().hash());
    }

    #[test]
    fn env_vars_map_to_paths() {
        let vars = vec![
            ("RISKROUTE__ROUTER__EPOCHS".to_string(), "4".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ];
        assert_eq!(env_overrides(vars.into_iter()), vec![("router.epochs".to_string(), "4".to_string())]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(Config::from_toml_with_overrides("[router]\nepochz = 3\n", &[]).is_err());
        assert!(Config::from_toml_with_overrides("[env]\nhorizon = 1\n", &[]).is_err());
        assert!(Config::from_toml_with_overrides("", &[("verifier.eta_v".into(), "0.7".into()), ("verifier.regime".into(), "\"\"".into())]).is_err());
        assert!(parse_assignment("novalue").is_err());
    }
}
