//! Paired significance tests: Wilcoxon signed-rank and the two-tailed
//! t-test.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alternative {
    /// H₁: x > y (one-sided).
    Greater,
    TwoSided,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences.
    pub statistic: f64,
    pub p_value: f64,
    /// Non-zero differences actually ranked.
    pub m: usize,
    /// True when the p-value came from full sign enumeration rather than
    /// the normal approximation.
    pub exact: bool,
}

/// Threshold below which all 2^m sign assignments are enumerated.
pub const WILCOXON_EXACT_MAX: usize = 20;

/// Mid-ranks of the absolute differences (ties share the average rank).
fn mid_ranks(abs: &[f64]) -> Vec<f64> {
    let m = abs.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| abs[a].partial_cmp(&abs[b]).unwrap());
    let mut ranks = vec![0.0; m];
    let mut i = 0;
    while i < m {
        let mut j = i;
        while j + 1 < m && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Wilcoxon signed-rank test on paired observations.
///
/// Zero differences are dropped; tied magnitudes get mid-ranks. For
/// m ≤ 20 the p-value is exact (all 2^m sign assignments enumerated);
/// above that a normal approximation with tie correction and continuity
/// correction is used.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], alternative: Alternative) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "paired lists differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::Degenerate(
            "all paired differences are zero".into(),
        ));
    }
    let m = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = mid_ranks(&abs);
    let w_pos: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();

    if m <= WILCOXON_EXACT_MAX {
        // enumerate every sign assignment; each is equally likely under H₀
        let total = 1u64 << m;
        let mut ge = 0u64;
        let mut le = 0u64;
        let tol = 1e-9;
        for bits in 0..total {
            let mut w = 0.0;
            for (i, r) in ranks.iter().enumerate() {
                if bits >> i & 1 == 1 {
                    w += r;
                }
            }
            if w >= w_pos - tol {
                ge += 1;
            }
            if w <= w_pos + tol {
                le += 1;
            }
        }
        let p_greater = ge as f64 / total as f64;
        let p_less = le as f64 / total as f64;
        let p = match alternative {
            Alternative::Greater => p_greater,
            Alternative::TwoSided => (2.0 * p_greater.min(p_less)).min(1.0),
        };
        return Ok(WilcoxonResult {
            statistic: w_pos,
            p_value: p,
            m,
            exact: true,
        });
    }

    let mf = m as f64;
    let mean = mf * (mf + 1.0) / 4.0;
    // tie correction: subtract Σ(t³ − t)/48 over tie groups
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut i = 0;
    while i < m {
        let mut j = i;
        while j + 1 < m && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = mf * (mf + 1.0) * (2.0 * mf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Err(Error::Degenerate("zero variance after tie correction".into()));
    }
    let sd = var.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let p = match alternative {
        Alternative::Greater => 1.0 - normal.cdf((w_pos - mean - 0.5) / sd),
        Alternative::TwoSided => {
            let z = ((w_pos - mean).abs() - 0.5).max(0.0) / sd;
            (2.0 * (1.0 - normal.cdf(z))).min(1.0)
        }
    };
    Ok(WilcoxonResult {
        statistic: w_pos,
        p_value: p,
        m,
        exact: false,
    })
}

/// Two-tailed t-test: paired when `paired`, otherwise Welch's unequal-
/// variance form. The p-value comes from the Student-t CDF (regularized
/// incomplete beta evaluation).
pub fn t_test_two_tailed(x: &[f64], y: &[f64], paired: bool) -> Result<(f64, f64)> {
    if paired {
        if x.len() != y.len() {
            return Err(Error::Dimension(format!(
                "paired lists differ in length: {} vs {}",
                x.len(),
                y.len()
            )));
        }
        let n = x.len();
        if n < 2 {
            return Err(Error::Degenerate("need n ≥ 2 pairs".into()));
        }
        let d: Vec<f64> = x.iter().zip(y).map(|(&a, &b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        if var == 0.0 {
            if mean == 0.0 {
                // identical pairs: no evidence against H₀ at all
                return Ok((0.0, 1.0));
            }
            return Err(Error::Degenerate("zero variance of paired differences".into()));
        }
        let t = mean / (var / n as f64).sqrt();
        let df = n as f64 - 1.0;
        return Ok((t, two_tailed_p(t, df)?));
    }

    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Degenerate("need n ≥ 2 in each group".into()));
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (n, mean, var)
    };
    let (nx, mx, vx) = stats(x);
    let (ny, my, vy) = stats(y);
    if vx == 0.0 && vy == 0.0 {
        return Err(Error::Degenerate("zero variance in both groups".into()));
    }
    let se2 = vx / nx + vy / ny;
    let t = (mx - my) / se2.sqrt();
    // Welch–Satterthwaite degrees of freedom
    let df = se2 * se2
        / ((vx / nx).powi(2) / (nx - 1.0) + (vy / ny).powi(2) / (ny - 1.0));
    Ok((t, two_tailed_p(t, df)?))
}

fn two_tailed_p(t: f64, df: f64) -> Result<f64> {
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Numerical(format!("bad t distribution (df {df}): {e}")))?;
    Ok((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}
