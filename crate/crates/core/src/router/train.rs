//! Primal-dual training of the router under the CVaR-constrained Lagrangian
//! `E[R̃] + λ (CVaR_α(R̃) − ε) + λ_B · Brier`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{batch_brier, cvar, cvar_tail, route_surrogate, route_surrogate_grad, seed_risk};
use super::net::RouterNet;
use crate::domain::{CVaRSpec, CostSpec, RoutingExample, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::features::{apply_mask, FeatureMask};
use crate::math;
use crate::optim::{cosine_lr, Adam};
use crate::rng::{self, purpose};

/// Flat, row-major training table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingData {
    pub dim: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<u8>,
    pub seed_ids: Vec<u64>,
}

impl RoutingData {
    pub fn from_examples(examples: &[RoutingExample], mask: FeatureMask) -> Self {
        let mut inputs = Vec::with_capacity(examples.len() * FEATURE_DIM);
        for e in examples {
            inputs.extend_from_slice(&apply_mask(&e.features, mask).0);
        }
        Self {
            dim: FEATURE_DIM,
            inputs,
            labels: examples.iter().map(|e| e.label).collect(),
            seed_ids: examples.iter().map(|e| e.seed_id).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            inputs.extend_from_slice(self.row(r));
        }
        Self {
            dim: self.dim,
            inputs,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            seed_ids: rows.iter().map(|&r| self.seed_ids[r]).collect(),
        }
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    /// Row indices grouped by seed id, in seed order.
    pub fn by_seed(&self) -> BTreeMap<u64, Vec<usize>> {
        let mut out: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, &s) in self.seed_ids.iter().enumerate() {
            out.entry(s).or_default().push(i);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub hidden: [usize; 2],
    pub dropout: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dual_learning_rate: f64,
    pub epochs: usize,
    /// Target number of steps per minibatch; whole seeds are packed until reached.
    pub batch_steps: usize,
    pub costs: CostSpec,
    pub cvar: CVaRSpec,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            hidden: [128, 64],
            dropout: 0.2,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            dual_learning_rate: 1e-2,
            epochs: 20,
            batch_steps: 4096,
            costs: CostSpec::default(),
            cvar: CVaRSpec::default(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_risk: f64,
    pub cvar: f64,
    pub brier: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// λ after every dual step.
    pub lambda_trajectory: Vec<f64>,
    pub final_objective: f64,
}

/// Lower floor keeping `log λ` finite.
const LAMBDA_FLOOR: f64 = 1e-8;

/// Seed-whole minibatches for one epoch.
fn pack_batches(groups: &BTreeMap<u64, Vec<usize>>, batch_steps: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut seeds: Vec<u64> = groups.keys().copied().collect();
    seeds.shuffle(&mut rng::stream(seed, &[purpose::ROUTER, epoch as u64]));
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for s in seeds {
        current.extend_from_slice(&groups[&s]);
        if current.len() >= batch_steps {
            batches.push(core::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        match batches.last_mut() {
            Some(last) if current.len() < batch_steps / 2 => last.extend(current),
            _ => batches.push(current),
        }
    }
    batches
}

/// Lagrangian value and `dL/dp` for a batch of probabilities.
pub fn lagrangian(probs: &[f64], labels: &[u8], seed_ids: &[u64], costs: &CostSpec, spec: &CVaRSpec, lambda: f64) -> (f64, f64, Vec<f64>) {
    let n = probs.len();
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &s) in seed_ids.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let ids: Vec<u64> = groups.keys().copied().collect();
    let risks: Vec<f64> = groups
        .values()
        .map(|rows| rows.iter().map(|&i| route_surrogate(probs[i], labels[i], costs)).sum::<f64>() / rows.len() as f64)
        .collect();
    let tail = cvar_tail(&risks, &ids, spec.alpha);
    let cvar_value = tail.iter().map(|&i| risks[i]).sum::<f64>() / tail.len() as f64;
    let s = ids.len() as f64;
    let brier = batch_brier(probs, labels);
    let objective = math::mean(&risks) + lambda * (cvar_value - spec.epsilon) + spec.lambda_brier * brier;

    let mut seed_weight = vec![1.0 / s; ids.len()];
    for &t in &tail {
        seed_weight[t] += lambda / tail.len() as f64;
    }
    let mut grad = vec![0.0; n];
    for (k, rows) in groups.values().enumerate() {
        let w = seed_weight[k] / rows.len() as f64;
        for &i in rows {
            grad[i] = w * route_surrogate_grad(labels[i], costs) + spec.lambda_brier * 2.0 * (probs[i] - labels[i] as f64) / n as f64;
        }
    }
    (objective, cvar_value, grad)
}

pub fn validate_data(data: &RoutingData) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("routing dataset is empty".into()));
    }
    let seeds = data.by_seed().len();
    if seeds < 2 {
        return Err(Error::InvalidInput(format!("router training needs at least 2 seeds, got {seeds}")));
    }
    let pos = data.positives();
    if pos == 0 || pos == data.len() {
        return Err(Error::DegenerateLabels(format!("{pos} positives out of {} examples", data.len())));
    }
    Ok(())
}

/// Per-epoch diagnostics on a dataset in eval mode.
/// Objective terms of a trained net in eval mode over a whole dataset.
pub fn evaluate_objective(net: &RouterNet, data: &RoutingData, spec: &TrainSpec, lambda: f64) -> Result<EpochStats> {
    let probs = net.probs_eval(&data.inputs)?;
    let steps: Vec<(u64, f64, u8)> = data
        .seed_ids
        .iter()
        .zip(&probs)
        .zip(&data.labels)
        .map(|((&s, &p), &y)| (s, p, y))
        .collect();
    objective_stats(&steps, spec, lambda)
}

/// Mean seed risk, CVaR and Brier of `(seed, probability, label)` steps.
fn objective_stats(steps: &[(u64, f64, u8)], spec: &TrainSpec, lambda: f64) -> Result<EpochStats> {
    let table = seed_risk(steps, &spec.costs, &[]);
    let values = table.values();
    let probs: Vec<f64> = steps.iter().map(|s| s.1).collect();
    let labels: Vec<u8> = steps.iter().map(|s| s.2).collect();
    Ok(EpochStats {
        epoch: 0,
        mean_risk: math::mean(&values),
        cvar: cvar(&values, spec.cvar.alpha)?,
        brier: batch_brier(&probs, &labels),
        lambda,
    })
}

pub fn train_router(data: &RoutingData, spec: &TrainSpec) -> Result<(RouterNet, TrainReport)> {
    validate_data(data)?;
    spec.costs.validate()?;
    spec.cvar.validate()?;
    let mut net = RouterNet::new(data.dim, spec.hidden, spec.dropout, &mut rng::stream(spec.seed, &[purpose::ROUTER, u64::MAX]));
    let groups = data.by_seed();
    let mut primal = Adam::new(net.param_count(), spec.learning_rate, spec.weight_decay);
    let mut dual = Adam::new(1, spec.dual_learning_rate, 0.0);
    let mut log_lambda = [math::ln(spec.cvar.lambda_init.max(LAMBDA_FLOOR))];

    let plans: Vec<Vec<Vec<usize>>> = (0..spec.epochs)
        .map(|e| pack_batches(&groups, spec.batch_steps, spec.seed, e))
        .collect();
    let total_steps: usize = plans.iter().map(Vec::len).sum();
    let mut step = 0usize;
    let mut report = TrainReport {
        epochs: Vec::with_capacity(spec.epochs),
        lambda_trajectory: Vec::with_capacity(total_steps),
        final_objective: 0.0,
    };

    for (epoch, batches) in plans.iter().enumerate() {
        // epoch statistics come from the training passes themselves
        let mut seen: Vec<(u64, f64, u8)> = Vec::with_capacity(data.len());
        for (b, rows) in batches.iter().enumerate() {
            let batch = data.subset(rows);
            let mut drop_rng = rng::stream(spec.seed, &[purpose::ROUTER, epoch as u64, b as u64]);
            let cache = net.forward_train(&batch.inputs, &mut drop_rng);
            let probs: Vec<f64> = cache.logits.iter().map(|&z| math::sigmoid(z)).collect();
            seen.extend(batch.seed_ids.iter().zip(&probs).zip(&batch.labels).map(|((&z, &p), &y)| (z, p, y)));
            let lambda = math::exp(log_lambda[0]);
            let (_, cvar_value, dp) = lagrangian(&probs, &batch.labels, &batch.seed_ids, &spec.costs, &spec.cvar, lambda);
            let dlogits: Vec<f64> = dp.iter().zip(&probs).map(|(g, p)| g * p * (1.0 - p)).collect();
            let grad = net.backward(&cache, &dlogits);
            let lr = cosine_lr(spec.learning_rate, step, total_steps);
            primal.step_with_lr(&mut net.params, &grad, lr);
            net.update_running_stats(&cache);

            // ascent on log λ: d/d(log λ) of λ (CVaR − ε)
            let dual_grad = [-(lambda * (cvar_value - spec.cvar.epsilon))];
            dual.step(&mut log_lambda, &dual_grad);
            log_lambda[0] = log_lambda[0].max(math::ln(LAMBDA_FLOOR));
            report.lambda_trajectory.push(math::exp(log_lambda[0]));
            step += 1;
        }
        let lambda = math::exp(log_lambda[0]);
        let mut stats = objective_stats(&seen, spec, lambda)?;
        stats.epoch = epoch + 1;
        report.epochs.push(stats);
    }
    if let Some(last) = report.epochs.last() {
        report.final_objective = last.mean_risk + last.lambda * (last.cvar - spec.cvar.epsilon) + spec.cvar.lambda_brier * last.brier;
    }
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(n_seeds: u64, steps: usize) -> RoutingData {
        let mut d = RoutingData {
            dim: 1,
            inputs: Vec::new(),
            labels: Vec::new(),
            seed_ids: Vec::new(),
        };
        for s in 0..n_seeds {
            for t in 0..steps {
                d.inputs.push(t as f64 / steps as f64);
                d.labels.push((s % 3 == 0) as u8);
                d.seed_ids.push(s);
            }
        }
        d
    }

    #[test]
    fn packing_keeps_seeds_whole() {
        let d = data(50, 7);
        let batches = pack_batches(&d.by_seed(), 60, 1, 0);
        let mut seen = alloc::collections::BTreeSet::new();
        for b in &batches {
            let seeds: alloc::collections::BTreeSet<u64> = b.iter().map(|&i| d.seed_ids[i]).collect();
            for s in &seeds {
                assert!(seen.insert(*s));
                assert_eq!(b.iter().filter(|&&i| d.seed_ids[i] == *s).count(), 7);
            }
        }
        assert_eq!(seen.len(), 50);
    }

    #[test]
    fn lagrangian_gradient_matches_differences() {
        let d = data(6, 4);
        let probs: Vec<f64> = (0..24).map(|i| 0.1 + 0.8 * ((i * 7) % 11) as f64 / 11.0).collect();
        let spec = CVaRSpec {
            alpha: 0.3,
            ..CVaRSpec::default()
        };
        let costs = CostSpec::default();
        let (_, _, g) = lagrangian(&probs, &d.labels, &d.seed_ids, &costs, &spec, 2.5);
        for i in 0..24 {
            let h = 1e-7;
            let mut a = probs.clone();
            let mut b = probs.clone();
            a[i] += h;
            b[i] -= h;
            let fa = lagrangian(&a, &d.labels, &d.seed_ids, &costs, &spec, 2.5).0;
            let fb = lagrangian(&b, &d.labels, &d.seed_ids, &costs, &spec, 2.5).0;
            assert!(((fa - fb) / (2.0 * h) - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_degenerate_data() {
        let mut d = data(4, 3);
        d.labels.iter_mut().for_each(|y| *y = 0);
        assert!(matches!(train_router(&d, &TrainSpec::default()), Err(Error::DegenerateLabels(_))));
        let mut one = data(1, 5);
        one.labels[0] = 1;
        assert!(train_router(&one, &TrainSpec::default()).is_err());
    }
}
