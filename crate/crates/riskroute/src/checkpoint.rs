//! Binary parameter checkpoints.
//!
//! Layout: `RRCKPT01`, a little-endian `u32` header length, the JSON header,
//! then every array's `f64` values in little-endian order. The header lists the
//! array names and lengths, so the blob needs no further framing.

use std::path::Path;

use riskroute_core::features::FeatureMask;
use riskroute_core::policy::{FeatureMap, PolicyStage, SoftmaxPolicy};
use riskroute_core::router::{RouterModel, RouterNet, TemperatureFit, TrainReport};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::pipeline::RouterStage;
use crate::records::ArtifactHeader;

pub const MAGIC: &[u8; 8] = b"RRCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layout {
    header: ArtifactHeader,
    arrays: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: ArtifactHeader,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> CliResult<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| CliError::Parse {
                offset: 0,
                message: format!("checkpoint has no array `{name}`"),
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let layout = Layout {
            header: self.header.clone(),
            arrays: self.arrays.iter().map(|(n, v)| (n.clone(), v.len())).collect(),
        };
        let json = serde_json::to_vec(&layout).expect("checkpoint header serializes");
        let values: usize = self.arrays.iter().map(|(_, v)| v.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in &self.arrays {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        let err = |offset: usize, message: &str| CliError::Parse {
            offset,
            message: message.to_string(),
        };
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(err(0, "not a riskroute checkpoint"));
        }
        let mut at = MAGIC.len();
        let len = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        at += 4;
        let json = bytes.get(at..at + len).ok_or_else(|| err(bytes.len(), "truncated checkpoint header"))?;
        let layout: Layout = serde_json::from_slice(json).map_err(|e| err(at, &format!("bad checkpoint header: {e}")))?;
        at += len;
        let mut arrays = Vec::with_capacity(layout.arrays.len());
        for (name, n) in layout.arrays {
            let end = at + 8 * n;
            let raw = bytes.get(at..end).ok_or_else(|| err(bytes.len(), &format!("truncated array `{name}`")))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((name, values));
            at = end;
        }
        if at != bytes.len() {
            return Err(err(at, "trailing bytes after checkpoint arrays"));
        }
        Ok(Self {
            header: layout.header,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PolicyMeta {
    map: FeatureMap,
    temperature: f64,
    stage: PolicyStage,
    param_hash: String,
}

pub fn policy_checkpoint(policy: &SoftmaxPolicy, header: ArtifactHeader) -> Checkpoint {
    let meta = PolicyMeta {
        map: policy.map,
        temperature: policy.temperature,
        stage: policy.stage,
        param_hash: hex::encode(policy.hash()),
    };
    Checkpoint {
        header: header.with_meta(serde_json::to_value(meta).expect("policy meta serializes")),
        arrays: vec![("params".into(), policy.params.clone())],
    }
}

/// Rebuild a policy and check its parameters against the recorded hash.
pub fn policy_from_checkpoint(ck: &Checkpoint) -> CliResult<SoftmaxPolicy> {
    let meta: PolicyMeta = serde_json::from_value(ck.header.meta.clone()).map_err(|e| CliError::Parse {
        offset: 0,
        message: format!("bad policy metadata: {e}"),
    })?;
    let policy = SoftmaxPolicy {
        map: meta.map,
        params: ck.array("params")?.to_vec(),
        temperature: meta.temperature,
        stage: meta.stage,
    };
    if policy.params.len() != (policy.map.dim() + 1) * policy.map.action_count {
        return Err(CliError::Parse {
            offset: 0,
            message: "policy parameter count does not match its feature map".into(),
        });
    }
    if hex::encode(policy.hash()) != meta.param_hash {
        return Err(CliError::Parse {
            offset: 0,
            message: "policy parameters do not match the recorded hash".into(),
        });
    }
    Ok(policy)
}

/// Everything in a [`RouterStage`] except the network arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RouterMeta {
    input_dim: usize,
    hidden: [usize; 2],
    dropout: f64,
    temperature: f64,
    threshold: f64,
    mask: FeatureMask,
    entropy_threshold: f64,
    heuristic_threshold: f64,
    validation_ece: f64,
    validation_brier: f64,
    validation_auroc: Option<f64>,
    report: TrainReport,
    temperature_fit: TemperatureFit,
}

const ROUTER_ARRAYS: [&str; 5] = ["params", "running_mean_1", "running_var_1", "running_mean_2", "running_var_2"];

pub fn router_checkpoint(stage: &RouterStage, header: ArtifactHeader) -> Checkpoint {
    let net = &stage.model.net;
    let meta = RouterMeta {
        input_dim: net.input_dim,
        hidden: net.hidden,
        dropout: net.dropout,
        temperature: net.temperature,
        threshold: stage.model.threshold,
        mask: stage.mask,
        entropy_threshold: stage.entropy_threshold,
        heuristic_threshold: stage.heuristic_threshold,
        validation_ece: stage.validation_ece,
        validation_brier: stage.validation_brier,
        validation_auroc: stage.validation_auroc,
        report: stage.report.clone(),
        temperature_fit: stage.temperature.clone(),
    };
    let arrays = [
        &net.params,
        &net.running_mean[0],
        &net.running_var[0],
        &net.running_mean[1],
        &net.running_var[1],
    ];
    Checkpoint {
        header: header.with_meta(serde_json::to_value(meta).expect("router meta serializes")),
        arrays: ROUTER_ARRAYS.iter().zip(arrays).map(|(n, v)| (n.to_string(), v.clone())).collect(),
    }
}

pub fn router_from_checkpoint(ck: &Checkpoint) -> CliResult<RouterStage> {
    let meta: RouterMeta = serde_json::from_value(ck.header.meta.clone()).map_err(|e| CliError::Parse {
        offset: 0,
        message: format!("bad router metadata: {e}"),
    })?;
    let mut net = RouterNet::zeros(meta.input_dim, meta.hidden, meta.dropout);
    let params = ck.array("params")?;
    if params.len() != net.param_count() {
        return Err(CliError::Parse {
            offset: 0,
            message: format!("router expects {} parameters, checkpoint has {}", net.param_count(), params.len()),
        });
    }
    net.params = params.to_vec();
    for layer in 0..2 {
        let mean = ck.array(ROUTER_ARRAYS[1 + 2 * layer])?;
        let var = ck.array(ROUTER_ARRAYS[2 + 2 * layer])?;
        if mean.len() != meta.hidden[layer] || var.len() != meta.hidden[layer] {
            return Err(CliError::Parse {
                offset: 0,
                message: "router running statistics have the wrong width".into(),
            });
        }
        net.running_mean[layer] = mean.to_vec();
        net.running_var[layer] = var.to_vec();
    }
    net.temperature = meta.temperature;
    Ok(RouterStage {
        model: RouterModel {
            net,
            threshold: meta.threshold,
        },
        mask: meta.mask,
        report: meta.report,
        temperature: meta.temperature_fit,
        entropy_threshold: meta.entropy_threshold,
        heuristic_threshold: meta.heuristic_threshold,
        validation_ece: meta.validation_ece,
        validation_brier: meta.validation_brier,
        validation_auroc: meta.validation_auroc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let ck = Checkpoint {
            header: ArtifactHeader::new("bc", "h"),
            arrays: vec![("a".into(), vec![1.0, -0.0, f64::MIN_POSITIVE])],
        };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}
