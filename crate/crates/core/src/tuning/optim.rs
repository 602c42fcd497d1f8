use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::TuningStrategy;
use crate::autograd::Scalar;
use crate::error::{Error, Result};
use crate::model::SegModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sgd,
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub lr0: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
}

impl OptimizerConfig {
    /// Per-strategy defaults: full/partial use AdamW 1e-5 with weight decay
    /// 1e-3 and a constant schedule; prompt strategies use SGD 0.05 with
    /// cosine decay. Partial reuses the full column (no dedicated settings
    /// are published for it).
    pub fn for_strategy(strategy: TuningStrategy) -> Self {
        match strategy {
            TuningStrategy::ShallowPrompt | TuningStrategy::DeepPrompt => OptimizerConfig {
                algorithm: Algorithm::Sgd,
                lr0: 0.05,
                weight_decay: 0.0,
                schedule: Schedule::Cosine,
                epochs: 100,
                batch_size: 3,
            },
            _ => OptimizerConfig {
                algorithm: Algorithm::AdamW,
                lr0: 1e-5,
                weight_decay: 1e-3,
                schedule: Schedule::Constant,
                epochs: 100,
                batch_size: 3,
            },
        }
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> Result<f64> {
        match self.schedule {
            Schedule::Constant => Ok(self.lr0),
            Schedule::Cosine => cosine_lr(step, total_steps, self.lr0),
        }
    }
}

/// Cosine decay: `lr = lr0 · ½ (1 + cos(π t / T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Contract("cosine_lr needs T > 0".into()));
    }
    if t > total {
        return Err(Error::Contract(format!("cosine_lr step {t} beyond total {total}")));
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct AdamSlot<F> {
    m: Vec<F>,
    v: Vec<F>,
}

/// Parameter updater over the learnable set. Rejects any gradient arriving
/// for a frozen parameter (freeze breach detector).
pub struct Optimizer<F: Scalar> {
    cfg: OptimizerConfig,
    learnable: BTreeSet<String>,
    adam: BTreeMap<String, AdamSlot<F>>,
    step_count: usize,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(cfg: OptimizerConfig, learnable: BTreeSet<String>) -> Self {
        Optimizer {
            cfg,
            learnable,
            adam: BTreeMap::new(),
            step_count: 0,
        }
    }

    /// Apply one update with the given learning rate.
    ///
    /// SGD: `p ← p − lr·g`. AdamW (decoupled weight decay):
    /// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
    /// `p ← p − lr·( m̂ / (√v̂ + ε) + wd·p )` with bias-corrected m̂, v̂.
    pub fn step(
        &mut self,
        model: &mut SegModel<F>,
        grads: &BTreeMap<String, Vec<F>>,
        lr: f64,
    ) -> Result<()> {
        for name in grads.keys() {
            if !self.learnable.contains(name) {
                return Err(Error::Contract(format!(
                    "freeze breach: gradient present for frozen parameter {name}"
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        for (name, g) in grads {
            let p = model.param_mut(name);
            let data = p.value.data_mut();
            if g.len() != data.len() {
                return Err(Error::Dimension(format!(
                    "gradient length {} != parameter length {} for {name}",
                    g.len(),
                    data.len()
                )));
            }
            match self.cfg.algorithm {
                Algorithm::Sgd => {
                    let lrf = F::of_f64(lr);
                    for (pv, &gv) in data.iter_mut().zip(g) {
                        *pv = *pv - lrf * gv;
                    }
                }
                Algorithm::AdamW => {
                    let slot = self.adam.entry(name.clone()).or_insert_with(|| AdamSlot {
                        m: vec![F::zero(); g.len()],
                        v: vec![F::zero(); g.len()],
                    });
                    let b1 = F::of_f64(ADAM_BETA1);
                    let b2 = F::of_f64(ADAM_BETA2);
                    let one = F::one();
                    let eps = F::of_f64(ADAM_EPS);
                    let bc1 = F::of_f64(1.0 - ADAM_BETA1.powi(t as i32));
                    let bc2 = F::of_f64(1.0 - ADAM_BETA2.powi(t as i32));
                    let lrf = F::of_f64(lr);
                    let wd = F::of_f64(self.cfg.weight_decay);
                    for i in 0..g.len() {
                        slot.m[i] = b1 * slot.m[i] + (one - b1) * g[i];
                        slot.v[i] = b2 * slot.v[i] + (one - b2) * g[i] * g[i];
                        let mhat = slot.m[i] / bc1;
                        let vhat = slot.v[i] / bc2;
                        data[i] = data[i] - lrf * (mhat / (vhat.sqrt() + eps) + wd * data[i]);
                    }
                }
            }
        }
        Ok(())
    }
}
