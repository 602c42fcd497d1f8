use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per parameter element.
    pub per_param: Vec<f64>,
    pub max_rel_err: f64,
    /// Index of the worst element.
    pub argmax: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients against central finite differences
/// `(f(θ+h) − f(θ−h)) / 2h`, elementwise.
///
/// `f` must be a deterministic scalar function of the flattened parameter
/// vector; determinism is verified by double evaluation at the base point.
/// Intended for 64-bit mode only.
pub fn grad_check<Func>(f: Func, theta: &[f64], analytic: &[f64], h: f64) -> Result<GradCheckReport>
where
    Func: Fn(&[f64]) -> Result<f64>,
{
    if analytic.len() != theta.len() {
        return Err(Error::Contract(format!(
            "analytic gradient length {} != parameter length {}",
            analytic.len(),
            theta.len()
        )));
    }
    let base = f(theta)?;
    let base2 = f(theta)?;
    if base != base2 {
        return Err(Error::Contract(format!(
            "function is non-deterministic: {base} vs {base2} at the same point"
        )));
    }

    let mut per_param = Vec::with_capacity(theta.len());
    let mut work = theta.to_vec();
    let mut max_rel = 0.0f64;
    let mut argmax = 0usize;
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work)?;
        work[i] = orig - h;
        let fm = f(&work)?;
        work[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
        let rel = (analytic[i] - fd).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            argmax = i;
        }
        per_param.push(rel);
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        argmax,
    })
}
