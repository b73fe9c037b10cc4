use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss names used as keys for weights and logs.
pub mod names {
    pub const CLS: &str = "cls";
    pub const MSE: &str = "mse";
    pub const IM_CST: &str = "im_cst";
    pub const VLPROX: &str = "vlprox";
    pub const CAP: &str = "cap";

    pub const ALL: [&str; 5] = [CLS, MSE, IM_CST, VLPROX, CAP];
}

pub const DEFAULT_TAU: f64 = 0.01;
pub const DEFAULT_VLPROX_K: usize = 256;

/// Temperatures, the top-k width of the vision-language proximity loss,
/// and per-loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau_cls: f64,
    pub tau_imcst: f64,
    pub tau_cap: f64,
    pub k_vlprox: usize,
    /// Drop samples whose teacher prediction disagrees with their label.
    pub vlprox_filter: bool,
    /// Same gate applied to the visual contrastive loss (off by default).
    pub imcst_filter: bool,
    pub weights: BTreeMap<String, f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_cls: DEFAULT_TAU,
            tau_imcst: DEFAULT_TAU,
            tau_cap: DEFAULT_TAU,
            k_vlprox: DEFAULT_VLPROX_K,
            vlprox_filter: true,
            imcst_filter: false,
            weights: names::ALL.iter().map(|n| (n.to_string(), 1.0)).collect(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [("tau_cls", self.tau_cls), ("tau_imcst", self.tau_imcst), ("tau_cap", self.tau_cap)] {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::ConfigInvalid(format!("{name} must be positive, got {tau}")));
            }
        }
        if self.k_vlprox == 0 {
            return Err(Error::ConfigInvalid("k_vlprox must be at least 1".into()));
        }
        for (name, w) in &self.weights {
            if !names::ALL.contains(&name.as_str()) {
                return Err(Error::ConfigInvalid(format!("unknown loss {name:?}")));
            }
            if !(*w >= 0.0 && w.is_finite()) {
                return Err(Error::ConfigInvalid(format!("weight for {name} must be nonnegative")));
            }
        }
        Ok(())
    }

    pub fn weight(&self, name: &str) -> f64 {
        self.weights.get(name).copied().unwrap_or(1.0)
    }
}
