use std::sync::Arc;

use crate::autograd::{NdArray, Scalar, Tape, Var};
use crate::error::{Error, Result};

const DICE_EPS: f64 = 1e-5;

/// Transpose `[C, ...spatial]` logits into `[V, C]` voxel rows.
fn logits_to_rows<F: Scalar>(tape: &mut Tape<F>, logits: Var) -> Result<(Var, usize, usize)> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!(
            "expected [C,D,H,W] logits, got {:?}",
            shape
        )));
    }
    let c = shape[0];
    let v = shape[1] * shape[2] * shape[3];
    let mut idx = Vec::with_capacity(v * c);
    for vox in 0..v {
        for ch in 0..c {
            idx.push(ch * v + vox);
        }
    }
    let rows = tape.gather(logits, Arc::new(idx), vec![v, c])?;
    Ok((rows, v, c))
}

/// Soft Dice loss averaged over foreground classes:
/// `1 − mean_c [ (2·Σ p_c t_c + ε) / (Σ p_c + Σ t_c + ε) ]` for c ≥ 1.
pub fn soft_dice_loss<F: Scalar>(tape: &mut Tape<F>, logits: Var, mask: &[u8]) -> Result<Var> {
    let (rows, v, c) = logits_to_rows(tape, logits)?;
    if mask.len() != v {
        return Err(Error::Dimension(format!(
            "mask has {} voxels, logits have {}",
            mask.len(),
            v
        )));
    }
    let probs = tape.softmax_rows(rows)?;
    let eps = F::of_f64(DICE_EPS);
    let mut dice_sum: Option<Var> = None;
    for class in 1..c {
        let truth: Vec<F> = mask
            .iter()
            .map(|&m| if m as usize == class { F::one() } else { F::zero() })
            .collect();
        let t_count = truth.iter().filter(|&&t| t == F::one()).count();
        let p_c = tape.slice_cols(probs, class, 1)?;
        let t_c = tape.constant(NdArray::new(vec![v, 1], truth)?);
        let inter = tape.mul(p_c, t_c)?;
        let inter = tape.sum(inter);
        let p_sum = tape.sum(p_c);
        let num = tape.scale(inter, F::of_f64(2.0));
        let num = tape.add_const(num, eps);
        let den = tape.add_const(p_sum, F::of_f64(t_count as f64) + eps);
        let dice = tape.div(num, den)?;
        dice_sum = Some(match dice_sum {
            Some(acc) => tape.add(acc, dice)?,
            None => dice,
        });
    }
    let dice_sum = dice_sum.ok_or_else(|| Error::Contract("need at least 2 classes".into()))?;
    let mean = tape.scale(dice_sum, F::of_f64(1.0 / (c - 1) as f64));
    let neg = tape.scale(mean, F::of_f64(-1.0));
    Ok(tape.add_const(neg, F::one()))
}

/// Voxel-averaged cross entropy, available behind a config flag for
/// ablation against the Dice loss.
pub fn cross_entropy_loss<F: Scalar>(tape: &mut Tape<F>, logits: Var, mask: &[u8]) -> Result<Var> {
    let (rows, v, c) = logits_to_rows(tape, logits)?;
    if mask.len() != v {
        return Err(Error::Dimension(format!(
            "mask has {} voxels, logits have {}",
            mask.len(),
            v
        )));
    }
    let probs = tape.softmax_rows(rows)?;
    let mut onehot = vec![F::zero(); v * c];
    for (vox, &m) in mask.iter().enumerate() {
        onehot[vox * c + m as usize] = F::one();
    }
    let oh = tape.constant(NdArray::new(vec![v, c], onehot)?);
    let picked = tape.mul(probs, oh)?;
    let ones = tape.constant(NdArray::filled(vec![c, 1], F::one()));
    let p_true = tape.matmul(picked, ones)?;
    let stabilized = tape.add_const(p_true, F::of_f64(1e-12));
    let logp = tape.ln(stabilized);
    let total = tape.sum(logp);
    Ok(tape.scale(total, F::of_f64(-1.0 / v as f64)))
}
