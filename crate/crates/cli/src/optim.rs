//! First-order optimizers with step learning-rate schedules.

use jacmatch::nn::Param;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_drop_factor() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Epochs (0-based) at which the rate is multiplied by `drop_factor`.
    #[serde(default)]
    pub drops: Vec<usize>,
    #[serde(default = "default_drop_factor")]
    pub drop_factor: f64,
    /// L2 coefficient added to the gradient.
    #[serde(default)]
    pub weight_decay: f64,
}

impl OptimizerSpec {
    /// Adam at 1e-3 with one 10x drop at 80% of `epochs`.
    pub fn desk_default(epochs: usize) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam {
                beta1: default_beta1(),
                beta2: default_beta2(),
                eps: default_eps(),
            },
            lr: 1e-3,
            drops: vec![epochs * 4 / 5],
            drop_factor: 0.1,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CliError::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.drops.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CliError::Config(format!(
                "schedule epochs must be strictly increasing, got {:?}",
                self.drops
            )));
        }
        if !(self.drop_factor > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(CliError::Config("drop_factor must be > 0 and weight_decay >= 0".into()));
        }
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(CliError::Config(format!("momentum must be in [0, 1), got {momentum}")))
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                Err(CliError::Config("adam needs betas in [0, 1) and eps > 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.drops.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.drop_factor.powi(n as i32)
    }
}

/// Moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[Param]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        OptimizerState {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One update of `params` in place.
pub fn step(spec: &OptimizerSpec, state: &mut OptimizerState, params: &mut [Param], grads: &[Vec<f64>], epoch: usize) {
    let lr = spec.lr_at(epoch);
    state.step += 1;
    let t = state.step as i32;
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        match spec.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                let v = &mut state.first[i];
                for j in 0..p.data.len() {
                    let gj = g[j] + spec.weight_decay * p.data[j];
                    v[j] = momentum * v[j] + gj;
                    p.data[j] -= lr * v[j];
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                let (m, v) = (&mut state.first[i], &mut state.second[i]);
                for j in 0..p.data.len() {
                    let gj = g[j] + spec.weight_decay * p.data[j];
                    m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                    p.data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                }
            }
        }
    }
}
