//! Risk router: network, losses, CVaR-constrained training, calibration.

pub mod calibrate;
pub mod loss;
pub mod net;
pub mod train;

pub use calibrate::{fit_temperature, hard_decision_cost, select_threshold, sweep, threshold_grid, ThresholdMode, TemperatureFit};
pub use loss::{bayes_threshold, brier, cvar, route_surrogate, seed_risk, SeedRiskTable};
pub use net::{Mode, RouterNet};
pub use train::{train_router, EpochStats, RoutingData, TrainReport, TrainSpec};

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::domain::RiskFeatures;
use crate::error::Result;
use crate::features::{apply_mask, FeatureMask};

/// A trained, calibrated router with its decision threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterModel {
    pub net: RouterNet,
    pub threshold: f64,
}

impl RouterModel {
    /// Calibrated escalation probability after applying an inference-time mask.
    pub fn probability(&self, f: &RiskFeatures, mask: FeatureMask) -> Result<f64> {
        Ok(self.net.probs_eval(&apply_mask(f, mask).0)?[0])
    }

    pub fn probabilities(&self, fs: &[RiskFeatures], mask: FeatureMask) -> Result<Vec<f64>> {
        let mut xs = Vec::with_capacity(fs.len() * crate::domain::FEATURE_DIM);
        for f in fs {
            xs.extend_from_slice(&apply_mask(f, mask).0);
        }
        self.net.probs_eval(&xs)
    }

    /// `d_t = 1[p ≥ τ]`.
    pub fn decide(&self, p: f64) -> bool {
        p >= self.threshold
    }
}
