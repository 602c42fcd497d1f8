//! Fine-tuning strategies, parameter-freeze enforcement, learnable-parameter
//! accounting, optimizers, and checkpoint persistence.

mod checkpoint;
mod optim;
#[cfg(test)]
mod tests;
mod train;

pub use checkpoint::{
    fingerprint, fingerprint_hex, load_delta, load_full, read_header, save_delta, save_full,
    CheckpointHeader,
};
pub use optim::{cosine_lr, Algorithm, Optimizer, OptimizerConfig, Schedule};
pub use train::{train_epochs, LossKind, TrainRecord};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::error::{Error, Result};
use crate::model::{PromptMode, SegModel};

/// Which parameters are learnable during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningStrategy {
    /// Direct inference, no training at all.
    None,
    /// Last decoder block (final refinement conv) plus the head.
    Partial,
    /// Every parameter.
    Full,
    /// The single prompt matrix plus the head.
    ShallowPrompt,
    /// All per-site prompt matrices plus the head.
    DeepPrompt,
}

impl TuningStrategy {
    pub const ALL: [TuningStrategy; 5] = [
        TuningStrategy::None,
        TuningStrategy::Partial,
        TuningStrategy::Full,
        TuningStrategy::ShallowPrompt,
        TuningStrategy::DeepPrompt,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TuningStrategy::None => "none",
            TuningStrategy::Partial => "partial",
            TuningStrategy::Full => "full",
            TuningStrategy::ShallowPrompt => "shallow",
            TuningStrategy::DeepPrompt => "deep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TuningStrategy::None),
            "partial" => Ok(TuningStrategy::Partial),
            "full" => Ok(TuningStrategy::Full),
            "shallow" | "shallow_prompt" => Ok(TuningStrategy::ShallowPrompt),
            "deep" | "deep_prompt" => Ok(TuningStrategy::DeepPrompt),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected none|partial|full|shallow|deep)"
            ))),
        }
    }

    pub fn is_prompt(&self) -> bool {
        matches!(self, TuningStrategy::ShallowPrompt | TuningStrategy::DeepPrompt)
    }

    /// Tag byte used in checkpoint headers.
    pub(crate) fn tag(&self) -> u8 {
        match self {
            TuningStrategy::None => 0,
            TuningStrategy::Partial => 1,
            TuningStrategy::Full => 2,
            TuningStrategy::ShallowPrompt => 3,
            TuningStrategy::DeepPrompt => 4,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => TuningStrategy::None,
            1 => TuningStrategy::Partial,
            2 => TuningStrategy::Full,
            3 => TuningStrategy::ShallowPrompt,
            4 => TuningStrategy::DeepPrompt,
            _ => return None,
        })
    }
}

/// The exact learnable partition for a strategy. Everything outside the
/// returned set stays frozen.
pub fn select_learnable<F: Scalar>(
    model: &SegModel<F>,
    strategy: TuningStrategy,
) -> Result<BTreeSet<String>> {
    if strategy.is_prompt() {
        let has_prompts = model.prompt.mode != PromptMode::None && model.prompt.count > 0;
        if !has_prompts {
            return Err(Error::Contract(format!(
                "strategy {} requires a model with prompts (mode {:?}, count {})",
                strategy.name(),
                model.prompt.mode,
                model.prompt.count
            )));
        }
        if strategy == TuningStrategy::ShallowPrompt && model.prompt.mode != PromptMode::Shallow {
            return Err(Error::Contract(
                "shallow_prompt strategy requires prompt mode shallow".into(),
            ));
        }
        if strategy == TuningStrategy::DeepPrompt && model.prompt.mode != PromptMode::Deep {
            return Err(Error::Contract(
                "deep_prompt strategy requires prompt mode deep".into(),
            ));
        }
    }
    let set = model
        .param_names()
        .filter(|name| match strategy {
            TuningStrategy::None => false,
            TuningStrategy::Full => true,
            TuningStrategy::Partial => name.starts_with("dec.final.") || name.starts_with("head."),
            TuningStrategy::ShallowPrompt | TuningStrategy::DeepPrompt => {
                name.starts_with("prompt.") || name.starts_with("head.")
            }
        })
        .map(String::from)
        .collect();
    Ok(set)
}

/// Set learnable flags on the registry to exactly the strategy's partition.
pub fn apply_strategy<F: Scalar>(model: &mut SegModel<F>, strategy: TuningStrategy) -> Result<BTreeSet<String>> {
    let set = select_learnable(model, strategy)?;
    for (name, p) in model.params_mut() {
        p.learnable = set.contains(name);
    }
    Ok(set)
}

/// Learnable scalar count and fraction of the total parameter count.
pub fn count_learnable<F: Scalar>(
    model: &SegModel<F>,
    strategy: TuningStrategy,
) -> Result<(usize, f64)> {
    let set = select_learnable(model, strategy)?;
    let count: usize = model
        .params()
        .filter(|(name, _)| set.contains(*name))
        .map(|(_, p)| p.value.numel())
        .sum();
    let total = model.total_scalar_count();
    Ok((count, count as f64 / total as f64))
}
