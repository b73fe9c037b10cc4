//! SGD with momentum and learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 0.0 }
    }
}

/// `v <- mu v + (g + wd p)`, `p <- p - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: usize) -> Self {
        Self { config, velocity: vec![0.0; params] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let SgdConfig { momentum, weight_decay } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.velocity) {
            let g = if weight_decay == 0.0 { *g } else { g + weight_decay * *p };
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant {
        lr: f64,
    },
    /// `lr * gamma^m` where `m` counts the passed milestones, given as
    /// fractions of the total epochs.
    Step {
        lr: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_milestones")]
        milestones: Vec<f64>,
    },
    /// Cosine one-cycle: warm up from `peak / div` to `peak` over
    /// `pct_start` of the steps, then anneal to `peak / (div * final_div)`.
    OneCycle {
        peak: f64,
        #[serde(default = "default_pct_start")]
        pct_start: f64,
        #[serde(default = "default_div")]
        div: f64,
        #[serde(default = "default_final_div")]
        final_div: f64,
    },
}

fn default_gamma() -> f64 {
    0.1
}
fn default_milestones() -> Vec<f64> {
    vec![1.0 / 3.0, 2.0 / 3.0]
}
fn default_pct_start() -> f64 {
    0.3
}
fn default_div() -> f64 {
    25.0
}
fn default_final_div() -> f64 {
    1e4
}

impl Schedule {
    pub fn step_decay(lr: f64) -> Self {
        Self::Step { lr, gamma: default_gamma(), milestones: default_milestones() }
    }

    pub fn one_cycle(peak: f64) -> Self {
        Self::OneCycle { peak, pct_start: default_pct_start(), div: default_div(), final_div: default_final_div() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Constant { lr } => *lr >= 0.0,
            Self::Step { lr, gamma, milestones } => {
                *lr >= 0.0 && *gamma > 0.0 && milestones.iter().all(|m| (0.0..=1.0).contains(m))
            }
            Self::OneCycle { peak, pct_start, div, final_div } => {
                *peak >= 0.0 && *pct_start > 0.0 && *pct_start < 1.0 && *div > 0.0 && *final_div > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("bad schedule {self:?}")))
        }
    }

    /// Learning rate for global step `step` of `total` steps spread over
    /// `epochs` epochs.
    pub fn lr(&self, step: usize, total: usize, epochs: usize) -> f64 {
        match self {
            Self::Constant { lr } => *lr,
            Self::Step { lr, gamma, milestones } => {
                let per_epoch = total.div_ceil(epochs.max(1)).max(1);
                let epoch = step / per_epoch;
                let passed = milestones.iter().filter(|&&m| epoch >= (m * epochs as f64).floor() as usize).count();
                lr * gamma.powi(passed as i32)
            }
            Self::OneCycle { peak, pct_start, div, final_div } => {
                let initial = peak / div;
                let min = initial / final_div;
                let up_end = pct_start * total as f64 - 1.0;
                let down_end = total as f64 - 1.0;
                let s = step as f64;
                if s <= up_end {
                    anneal_cos(initial, *peak, if up_end > 0.0 { s / up_end } else { 1.0 })
                } else {
                    let span = down_end - up_end;
                    anneal_cos(*peak, min, if span > 0.0 { (s - up_end) / span } else { 1.0 })
                }
            }
        }
    }
}

fn anneal_cos(start: f64, end: f64, pct: f64) -> f64 {
    end + (start - end) / 2.0 * ((PI * pct.clamp(0.0, 1.0)).cos() + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_boundaries() {
        let s = Schedule::step_decay(0.05);
        // 9 epochs, 2 steps each
        assert_eq!(s.lr(0, 18, 9), 0.05);
        assert_eq!(s.lr(5, 18, 9), 0.05);
        assert!((s.lr(6, 18, 9) - 0.005).abs() < 1e-15);
        assert!((s.lr(12, 18, 9) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn one_cycle_shape() {
        let s = Schedule::one_cycle(0.003);
        let total = 100;
        assert!((s.lr(0, total, 10) - 0.003 / 25.0).abs() < 1e-15);
        let peak_step = (0.3 * total as f64 - 1.0) as usize;
        assert!((s.lr(peak_step, total, 10) - 0.003).abs() < 1e-15);
        assert!((s.lr(total - 1, total, 10) - 0.003 / 25.0 / 1e4).abs() < 1e-15);
        let lrs: Vec<f64> = (0..total).map(|i| s.lr(i, total, 10)).collect();
        assert!(lrs[..=peak_step].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[peak_step..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn zero_grad_keeps_params() {
        let mut p: Vec<f64> = vec![1.0, -0.0, 3.5];
        let before: Vec<u64> = p.iter().map(|x| x.to_bits()).collect();
        let mut opt = Sgd::new(SgdConfig::default(), 3);
        opt.step(&mut p, &[0.0; 3], 0.1);
        assert_eq!(p.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), before);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = vec![0.0];
        let mut opt = Sgd::new(SgdConfig { momentum: 0.5, weight_decay: 0.0 }, 1);
        opt.step(&mut p, &[1.0], 1.0);
        opt.step(&mut p, &[1.0], 1.0);
        assert_eq!(p[0], -2.5);
    }
}
