//! Run directory: named artifacts with stage tags and config hashes.
//!
//! Every loader checks the stage tag in the artifact header, so running a
//! stage before its predecessors fails with "missing stage X artifact".

use std::path::{Path, PathBuf};

use log::warn;
use riskroute_core::distill::{ConsistencyPair, DistillReport, PairStats, PreferencePair};
use riskroute_core::domain::{DatasetSplit, PerturbedEpisode, RoutingExample};
use riskroute_core::env::Environment;
use riskroute_core::policy::{SoftmaxPolicy, TrajectoryPool};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{policy_checkpoint, policy_from_checkpoint, router_checkpoint, router_from_checkpoint, Checkpoint};
use crate::error::{CliError, CliResult};
use crate::pipeline::{RouterStage, RoutingSet};
use crate::records::{self, ArtifactHeader, JsonArtifact};

/// Stage tags, in pipeline order.
pub mod stage {
    pub const GEN_TASKS: &str = "gen-tasks";
    pub const COLLECT: &str = "collect";
    pub const TRAIN_BC: &str = "train-bc";
    pub const BUILD_PAIRS: &str = "build-pairs";
    pub const DISTILL: &str = "distill";
    pub const COLLECT_ROUTING: &str = "collect-routing";
    pub const TRAIN_ROUTER: &str = "train-router";
    pub const ROLLOUT: &str = "rollout";
    pub const EXTRACT_FEATURES: &str = "extract-features";
}

pub const TASKS: &str = "tasks.json";
pub const SPLIT: &str = "split.json";
pub const POOL: &str = "pool.rljson";
pub const BC: &str = "bc.ckpt";
pub const PAIRS: &str = "pairs.rljson";
pub const CONSISTENCY: &str = "consistency.rljson";
pub const SLM: &str = "slm.ckpt";
pub const DISTILL_REPORT: &str = "distill_report.json";
pub const ROUTING: &str = "routing.rljson";
pub const ROUTING_EPISODES: &str = "routing_episodes.rljson";
pub const ROUTER: &str = "router.ckpt";
pub const ROUTER_TRAINING: &str = "router_training.csv";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.json";
pub const PARETO: &str = "pareto.csv";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoolMeta {
    expert: usize,
}

/// Artifact directory bound to the hash of the active config.
#[derive(Debug, Clone)]
pub struct Store {
    pub dir: PathBuf,
    pub config_hash: String,
}

impl Store {
    pub fn new(dir: &Path, config_hash: &str) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config_hash: config_hash.to_string(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn header(&self, stage: &str) -> ArtifactHeader {
        ArtifactHeader::new(stage, &self.config_hash)
    }

    fn require(&self, name: &str, stage: &'static str) -> CliResult<PathBuf> {
        let path = self.path(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(CliError::MissingStage { stage, path })
        }
    }

    /// Stage-tag and config-hash checks shared by every loader.
    fn check(&self, path: &Path, header: &ArtifactHeader, stage: &'static str) -> CliResult<()> {
        if header.stage != stage {
            return Err(CliError::WrongStage {
                path: path.to_path_buf(),
                expected: stage,
                found: header.stage.clone(),
            });
        }
        if header.config_hash != self.config_hash {
            warn!(
                "{} was produced under config {}, current config is {}",
                path.display(),
                header.config_hash,
                self.config_hash
            );
        }
        Ok(())
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str, stage: &'static str) -> CliResult<T> {
        let path = self.require(name, stage)?;
        let doc: JsonArtifact<T> = records::read_json(&path)?;
        self.check(&path, &doc.header, stage)?;
        Ok(doc.body)
    }

    fn read_records<T: DeserializeOwned>(&self, name: &str, stage: &'static str) -> CliResult<(ArtifactHeader, Vec<T>)> {
        let path = self.require(name, stage)?;
        let (header, recs) = records::read(&path)?;
        self.check(&path, &header, stage)?;
        Ok((header, recs))
    }

    fn read_checkpoint(&self, name: &str, stage: &'static str) -> CliResult<Checkpoint> {
        let path = self.require(name, stage)?;
        let ck = Checkpoint::read(&path)?;
        self.check(&path, &ck.header, stage)?;
        Ok(ck)
    }

    pub fn save_tasks(&self, env: &Environment, split: &DatasetSplit) -> CliResult<()> {
        records::write_json(&self.path(TASKS), &self.header(stage::GEN_TASKS), env)?;
        records::write_json(&self.path(SPLIT), &self.header(stage::GEN_TASKS), split)
    }

    pub fn load_tasks(&self) -> CliResult<(Environment, DatasetSplit)> {
        let env: Environment = self.read_json(TASKS, stage::GEN_TASKS)?;
        env.config.validate()?;
        Ok((env, self.read_json(SPLIT, stage::GEN_TASKS)?))
    }

    pub fn save_pool(&self, pool: &TrajectoryPool) -> CliResult<()> {
        let header = self
            .header(stage::COLLECT)
            .with_meta(serde_json::json!({ "expert": pool.expert.len() }));
        let all: Vec<&PerturbedEpisode> = pool.expert.iter().chain(&pool.perturbed).collect();
        records::write(&self.path(POOL), &header, &all)
    }

    pub fn load_pool(&self) -> CliResult<TrajectoryPool> {
        let (header, mut all): (_, Vec<PerturbedEpisode>) = self.read_records(POOL, stage::COLLECT)?;
        let meta: PoolMeta = serde_json::from_value(header.meta).map_err(|e| CliError::Parse {
            offset: 0,
            message: format!("pool header: {e}"),
        })?;
        if meta.expert > all.len() {
            return Err(CliError::Parse {
                offset: 0,
                message: "pool header counts more expert episodes than the file holds".into(),
            });
        }
        for e in &all {
            e.validate()?;
        }
        let perturbed = all.split_off(meta.expert);
        Ok(TrajectoryPool { expert: all, perturbed })
    }

    pub fn save_policy(&self, name: &str, stage: &str, policy: &SoftmaxPolicy) -> CliResult<()> {
        policy_checkpoint(policy, self.header(stage)).write(&self.path(name))
    }

    pub fn load_bc(&self) -> CliResult<SoftmaxPolicy> {
        policy_from_checkpoint(&self.read_checkpoint(BC, stage::TRAIN_BC)?)
    }

    pub fn load_slm(&self) -> CliResult<SoftmaxPolicy> {
        policy_from_checkpoint(&self.read_checkpoint(SLM, stage::DISTILL)?)
    }

    pub fn save_pairs(&self, prefs: &[PreferencePair], cons: &[ConsistencyPair], stats: &PairStats) -> CliResult<()> {
        let meta = serde_json::to_value(stats).expect("pair stats serialize");
        records::write(&self.path(PAIRS), &self.header(stage::BUILD_PAIRS).with_meta(meta), prefs)?;
        records::write(&self.path(CONSISTENCY), &self.header(stage::BUILD_PAIRS), cons)
    }

    pub fn load_pairs(&self) -> CliResult<(Vec<PreferencePair>, Vec<ConsistencyPair>)> {
        let (_, prefs) = self.read_records(PAIRS, stage::BUILD_PAIRS)?;
        let (_, cons) = self.read_records(CONSISTENCY, stage::BUILD_PAIRS)?;
        Ok((prefs, cons))
    }

    pub fn save_distill_report(&self, report: &DistillReport) -> CliResult<()> {
        records::write_json(&self.path(DISTILL_REPORT), &self.header(stage::DISTILL), report)
    }

    /// All routing examples in one file; train and validation rows are told
    /// apart by task membership in `split.json`.
    pub fn save_routing(&self, routing: &RoutingSet) -> CliResult<()> {
        let examples: Vec<&RoutingExample> = routing.train.iter().chain(&routing.valid).collect();
        records::write(&self.path(ROUTING), &self.header(stage::COLLECT_ROUTING), &examples)?;
        let episodes: Vec<&PerturbedEpisode> = routing.train_episodes.iter().chain(&routing.valid_episodes).collect();
        records::write(&self.path(ROUTING_EPISODES), &self.header(stage::COLLECT_ROUTING), &episodes)
    }

    pub fn load_routing(&self, split: &DatasetSplit) -> CliResult<RoutingSet> {
        let (_, examples): (_, Vec<RoutingExample>) = self.read_records(ROUTING, stage::COLLECT_ROUTING)?;
        let (_, episodes): (_, Vec<PerturbedEpisode>) = self.read_records(ROUTING_EPISODES, stage::COLLECT_ROUTING)?;
        let in_train = |t| split.train.contains(&t);
        let (train, valid): (Vec<_>, Vec<_>) = examples.into_iter().partition(|e| in_train(e.task));
        let (train_episodes, valid_episodes): (Vec<_>, Vec<_>) = episodes.into_iter().partition(|e| in_train(e.task));
        Ok(RoutingSet {
            train,
            valid,
            train_episodes,
            valid_episodes,
        })
    }

    pub fn save_router(&self, stage: &RouterStage) -> CliResult<()> {
        router_checkpoint(stage, self.header(stage::TRAIN_ROUTER)).write(&self.path(ROUTER))?;
        crate::report::write_training(&self.path(ROUTER_TRAINING), &stage.report.epochs)
    }

    pub fn load_router(&self) -> CliResult<RouterStage> {
        router_from_checkpoint(&self.read_checkpoint(ROUTER, stage::TRAIN_ROUTER)?)
    }
}
