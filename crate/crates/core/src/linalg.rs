//! Small dense helpers shared by the conjugate-family code.

use nalgebra::{Cholesky, DMatrix, Dyn};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

pub(crate) const SYMMETRY_TOL: f64 = 1e-12;

/// Cholesky factorization that reports which matrix failed.
pub(crate) fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NotPositiveDefinite(format!("{what} has non-finite entries")));
    }
    m.clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// Largest absolute asymmetry relative to the largest entry (absolute when the
/// matrix is small in magnitude).
pub(crate) fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub(crate) fn ln_det_from_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Log of the multivariate gamma function Γ_p(a).
pub fn ln_mv_gamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    let mut acc = pf * (pf - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for i in 1..=p {
        acc += ln_gamma(a + (1.0 - i as f64) / 2.0);
    }
    acc
}

/// Multivariate digamma ψ_p(a) = Σ_i ψ(a + (1 − i)/2).
pub fn mv_digamma(p: usize, a: f64) -> f64 {
    (1..=p).map(|i| digamma(a + (1.0 - i as f64) / 2.0)).sum()
}
