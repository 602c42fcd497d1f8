use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_strategy, Optimizer, OptimizerConfig, TuningStrategy};
use crate::autograd::{NdArray, Scalar};
use crate::error::{Error, Result};
use crate::model::{cross_entropy_loss, soft_dice_loss, SegModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dice,
    CrossEntropy,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(LossKind::Dice),
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            other => Err(Error::Config(format!(
                "unknown loss '{other}' (expected dice|cross_entropy)"
            ))),
        }
    }
}

/// One optimizer step's training telemetry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Fine-tune `model` in place on `(volume, mask)` pairs.
///
/// Single-threaded and fully deterministic: the per-epoch shuffle order is a
/// pure function of `seed`, gradients are accumulated over each mini-batch
/// (mean over samples) before one optimizer step, and the learning rate
/// follows the configured schedule over the global step count. A non-finite
/// loss aborts immediately rather than continuing with poisoned parameters.
pub fn train_epochs<F: Scalar>(
    model: &mut SegModel<F>,
    strategy: TuningStrategy,
    cfg: &OptimizerConfig,
    loss_kind: LossKind,
    samples: &[(NdArray<F>, Vec<u8>)],
    seed: u64,
) -> Result<Vec<TrainRecord>> {
    if strategy == TuningStrategy::None {
        return Ok(Vec::new());
    }
    if samples.is_empty() {
        return Err(Error::MissingData("no training samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let learnable = apply_strategy(model, strategy)?;
    let mut opt = Optimizer::new(cfg.clone(), learnable.clone());

    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut records = Vec::with_capacity(total_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let lr = cfg.lr_at(global_step, total_steps)?;
            let mut acc: BTreeMap<String, Vec<F>> = BTreeMap::new();
            let mut batch_loss = 0.0f64;
            let inv = F::of_f64(1.0 / batch.len() as f64);
            for &si in batch {
                let (volume, mask) = &samples[si];
                let pass = model.forward(volume, true)?;
                let mut tape = pass.tape;
                let loss = match loss_kind {
                    LossKind::Dice => soft_dice_loss(&mut tape, pass.logits, mask)?,
                    LossKind::CrossEntropy => cross_entropy_loss(&mut tape, pass.logits, mask)?,
                };
                let loss_val = tape.value(loss).data()[0].to_f64().unwrap();
                if !loss_val.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss {loss_val} at epoch {epoch} step {global_step}"
                    )));
                }
                batch_loss += loss_val;
                tape.backward(loss)?;
                for name in &learnable {
                    if let Some(g) = tape.grad(pass.param_vars[name]) {
                        let slot = acc.entry(name.clone()).or_insert_with(|| vec![F::zero(); g.len()]);
                        for (a, &gv) in slot.iter_mut().zip(g) {
                            *a += inv * gv;
                        }
                    }
                }
            }
            opt.step(model, &acc, lr)?;
            records.push(TrainRecord {
                epoch,
                step: global_step,
                loss: batch_loss / batch.len() as f64,
                lr,
            });
            global_step += 1;
        }
    }
    Ok(records)
}
