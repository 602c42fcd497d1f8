//! Dice scoring, fold aggregation, the strategy × center comparison matrix,
//! and significance tests.

mod stats;
#[cfg(test)]
mod tests;

pub use stats::{t_test_two_tailed, wilcoxon_signed_rank, Alternative, WilcoxonResult};

use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::synth::{Sample, LABEL_NODAL, LABEL_PRIMARY};
use crate::tuning::TuningStrategy;

/// Per-sample Dice scores for the two foreground classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub sample_id: String,
    pub center_id: String,
    pub primary: f64,
    pub nodal: f64,
    /// Arithmetic mean of the two foreground scores.
    pub mean: f64,
}

/// Dice overlap for one class: `2·|P∩T| / (|P|+|T|)`.
///
/// Both-empty convention: if neither mask contains the class the score is
/// 1.0 (correctly predicting absence counts as perfect agreement).
pub fn dice(pred: &[u8], truth: &[u8], class: u8) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "mask extents differ: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut p = 0usize;
    let mut t = 0usize;
    let mut both = 0usize;
    for (&a, &b) in pred.iter().zip(truth) {
        let ap = a == class;
        let bt = b == class;
        p += ap as usize;
        t += bt as usize;
        both += (ap && bt) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Voxel-wise argmax over class logits; ties break toward the lowest class
/// index so prediction is deterministic.
pub fn predict<F: Scalar>(model: &SegModel<F>, sample: &Sample) -> Result<Vec<u8>> {
    let volume = sample.volume.cast::<F>();
    let pass = model.forward(&volume, false)?;
    let logits = pass.tape.value(pass.logits);
    let shape = logits.shape();
    let classes = shape[0];
    let voxels = shape[1] * shape[2] * shape[3];
    let data = logits.data();
    let mut out = vec![0u8; voxels];
    for v in 0..voxels {
        let mut best = 0usize;
        let mut best_val = data[v];
        for c in 1..classes {
            let val = data[c * voxels + v];
            if val > best_val {
                best = c;
                best_val = val;
            }
        }
        out[v] = best as u8;
    }
    Ok(out)
}

/// Score the model on each sample: argmax prediction, then Dice per
/// foreground class. Deterministic for a fixed model and sample list.
pub fn evaluate<F: Scalar>(model: &SegModel<F>, samples: &[Sample]) -> Result<Vec<DiceReport>> {
    samples
        .iter()
        .map(|s| {
            let pred = predict(model, s)?;
            let primary = dice(&pred, &s.mask, LABEL_PRIMARY)?;
            let nodal = dice(&pred, &s.mask, LABEL_NODAL)?;
            Ok(DiceReport {
                sample_id: s.sample_id.clone(),
                center_id: s.center_id.clone(),
                primary,
                nodal,
                mean: 0.5 * (primary + nodal),
            })
        })
        .collect()
}

/// Sample mean and sample standard deviation (n−1 denominator; a single
/// fold reports σ = 0). The n−1 convention reproduces the reference
/// per-fold arithmetic; see `aggregation_matches_published_fold_table`.
pub fn aggregate_folds(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Degenerate("cannot aggregate zero folds".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// One strategy × fold result on a held-out center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub strategy: TuningStrategy,
    /// The center held out as "new"; the remaining centers are "old".
    pub new_center: String,
    /// Mean Dice pooled over the old centers' test samples.
    pub old_center_mean: f64,
    /// Mean Dice over the new center's test samples.
    pub new_center_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub old_mean: f64,
    pub new_mean: f64,
    pub new_std: f64,
    pub folds: usize,
}

/// Rows = new-center id, columns = strategy in the fixed order
/// none, partial, full, shallow, deep; a missing strategy × center pair is
/// an explicit `None` gap, never silently dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMatrix {
    pub centers: Vec<String>,
    pub strategies: Vec<TuningStrategy>,
    /// `cells[row][col]` indexed by (center, strategy).
    pub cells: Vec<Vec<Option<CellStats>>>,
}

pub fn build_comparison_matrix(reports: &[FoldReport]) -> Result<ComparisonMatrix> {
    let mut centers: Vec<String> = reports.iter().map(|r| r.new_center.clone()).collect();
    centers.sort();
    centers.dedup();
    let strategies = TuningStrategy::ALL.to_vec();
    let mut cells = vec![vec![None; strategies.len()]; centers.len()];
    for (ri, center) in centers.iter().enumerate() {
        for (ci, &strategy) in strategies.iter().enumerate() {
            let mut old = Vec::new();
            let mut new = Vec::new();
            let mut folds: Vec<usize> = Vec::new();
            for r in reports {
                if r.new_center == *center && r.strategy == strategy {
                    old.push(r.old_center_mean);
                    new.push(r.new_center_mean);
                    folds.push(r.fold);
                }
            }
            if folds.is_empty() {
                continue;
            }
            folds.sort_unstable();
            folds.dedup();
            if folds.len() != old.len() {
                return Err(Error::Contract(format!(
                    "duplicate fold entries for {} / {}",
                    center,
                    strategy.name()
                )));
            }
            let (old_mean, _) = aggregate_folds(&old)?;
            let (new_mean, new_std) = aggregate_folds(&new)?;
            cells[ri][ci] = Some(CellStats {
                old_mean,
                new_mean,
                new_std,
                folds: folds.len(),
            });
        }
    }
    Ok(ComparisonMatrix {
        centers,
        strategies,
        cells,
    })
}

const GAP: &str = "NA";

impl ComparisonMatrix {
    /// Wide CSV: one row per center, `old / new_mean / new_std / folds`
    /// column group per strategy. Gaps serialize as `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("center");
        for s in &self.strategies {
            let n = s.name();
            out.push_str(&format!(",{n}_old,{n}_new_mean,{n}_new_std,{n}_folds"));
        }
        out.push('\n');
        for (ri, center) in self.centers.iter().enumerate() {
            out.push_str(center);
            for cell in &self.cells[ri] {
                match cell {
                    Some(c) => out.push_str(&format!(
                        ",{},{},{},{}",
                        c.old_mean, c.new_mean, c.new_std, c.folds
                    )),
                    None => out.push_str(&format!(",{GAP},{GAP},{GAP},{GAP}")),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: "<csv>".into(),
            detail,
            offset: 0,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty csv".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"center") || (cols.len() - 1) % 4 != 0 {
            return Err(bad(format!("unexpected header '{header}'")));
        }
        let mut strategies = Vec::new();
        for group in cols[1..].chunks(4) {
            let name = group[0]
                .strip_suffix("_old")
                .ok_or_else(|| bad(format!("unexpected column '{}'", group[0])))?;
            strategies.push(TuningStrategy::parse(name)?);
        }
        let mut centers = Vec::new();
        let mut cells = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(bad(format!("row width mismatch in '{line}'")));
            }
            centers.push(fields[0].to_string());
            let mut row = Vec::new();
            for group in fields[1..].chunks(4) {
                if group[0] == GAP {
                    row.push(None);
                    continue;
                }
                let parse = |s: &str| {
                    s.parse::<f64>()
                        .map_err(|_| bad(format!("bad number '{s}'")))
                };
                row.push(Some(CellStats {
                    old_mean: parse(group[0])?,
                    new_mean: parse(group[1])?,
                    new_std: parse(group[2])?,
                    folds: group[3]
                        .parse::<usize>()
                        .map_err(|_| bad(format!("bad fold count '{}'", group[3])))?,
                }));
            }
            cells.push(row);
        }
        Ok(ComparisonMatrix {
            centers,
            strategies,
            cells,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serialization cannot fail")
    }
}
