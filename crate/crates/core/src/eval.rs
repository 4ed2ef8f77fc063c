//! Evaluation metrics.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::message::{exponentiate_rows, forward_range, LOG_DENSITY_FLOOR};
use crate::model::{stationary_distribution, GaussianEmission, GlobalVariational, HmmParams, Observations};

/// Optimal assignment for a square cost matrix (Hungarian algorithm with
/// potentials). Returns `assign` with row i matched to column `assign[i]`.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    // 1-based arrays; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            assign[matched_row[j] - 1] = j - 1;
        }
    }
    assign
}

/// Permutation `perm` with fitted state i matched to true state `perm[i]`,
/// minimizing the total squared distance between matched means.
pub fn align_states(fitted: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<Vec<usize>> {
    if fitted.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} fitted states against {} true states",
            fitted.len(),
            truth.len()
        )));
    }
    let n = fitted.len();
    let cost = DMatrix::from_fn(n, n, |i, j| (&fitted[i] - &truth[j]).norm_squared());
    Ok(min_cost_assignment(&cost))
}

/// Posterior means of the emission locations, u1/u2.
pub fn fitted_means(w: &GlobalVariational) -> Vec<DVector<f64>> {
    w.emit.iter().map(|e| &e.u1 / e.u2).collect()
}

/// ‖Â − A‖_F with Â the Dirichlet mean, after relabelling fitted states to the
/// truth by [`align_states`] on the emission means.
pub fn transition_error(w: &GlobalVariational, truth: &HmmParams) -> Result<f64> {
    let k = w.num_states();
    if truth.num_states() != k {
        return Err(Error::DimensionMismatch(format!("K = {k} fitted against K = {} true", truth.num_states())));
    }
    let perm = align_states(&fitted_means(w), &truth.means())?;
    let a_hat = w.expected_transition_matrix();
    let mut aligned = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            aligned[(perm[i], perm[j])] = a_hat[(i, j)];
        }
    }
    Ok((aligned - truth.trans()).norm())
}

/// Plug-in point parameters: Â = E[A], μ̂ = posterior mean, Σ̂ = Ψ/(ν − p − 1),
/// π0 = stationary distribution of Â.
pub fn point_estimates(w: &GlobalVariational) -> Result<HmmParams> {
    let a_hat = w.expected_transition_matrix();
    let emissions = w
        .emission_params()?
        .into_iter()
        .map(|e| GaussianEmission::new(e.mu0.clone(), e.mean_covariance()))
        .collect::<Result<Vec<_>>>()?;
    let pi = stationary_distribution(&a_hat)?;
    HmmParams::new(pi, a_hat, emissions)
}

/// Average log p(y_{1:L}) / L under the given parameters (scaled forward pass).
pub fn log_likelihood_per_obs(params: &HmmParams, test: &Observations) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidParameter("empty test sequence".into()));
    }
    if test.dim() != params.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{}-dimensional test data for a {}-dimensional model",
            test.dim(),
            params.dim()
        )));
    }
    let k = params.num_states();
    let len = test.len();
    let mut emit = Vec::with_capacity(len * k);
    for t in 0..len {
        for e in params.emissions() {
            let v = e.log_density(test.row(t));
            emit.push(if v.is_nan() { LOG_DENSITY_FLOOR } else { v.max(LOG_DENSITY_FLOOR) });
        }
    }
    let maxes = exponentiate_rows(&mut emit, k, 0)?;
    let trans: Vec<f64> = (0..k).flat_map(|j| (0..k).map(move |l| (j, l))).map(|(j, l)| params.trans()[(j, l)]).collect();
    let mut alpha = vec![0.0; len * k];
    let mut log_terms = vec![0.0; len];
    forward_range(params.pi0(), &trans, &emit, &maxes, k, &mut alpha, &mut log_terms, 0, 0)?;
    Ok(log_terms.iter().sum::<f64>() / len as f64)
}

/// Held-out predictive log-probability per observation under plug-in
/// posterior means.
pub fn predictive_log_prob(w: &GlobalVariational, test: &Observations) -> Result<f64> {
    log_likelihood_per_obs(&point_estimates(w)?, test)
}

/// Splits off the final contiguous `fraction` of the sequence as a test set.
pub fn holdout_split(obs: &Observations, fraction: f64) -> Result<(Observations, Observations)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("held-out fraction {fraction} outside (0, 1)")));
    }
    let n_test = ((obs.len() as f64) * fraction).round() as usize;
    if n_test == 0 || n_test >= obs.len() {
        return Err(Error::InvalidParameter(format!("sequence of length {} too short to split", obs.len())));
    }
    let cut = obs.len() - n_test;
    Ok((obs.slice(0..cut), obs.slice(cut..obs.len())))
}

/// Contiguous-block folds: fold i holds out the i-th of `folds` equal blocks
/// and trains on the remainder joined end to end.
pub fn contiguous_folds(obs: &Observations, folds: usize) -> Result<Vec<(Observations, Observations)>> {
    if folds < 2 || obs.len() < 2 * folds {
        return Err(Error::InvalidParameter(format!("cannot form {folds} folds from {} observations", obs.len())));
    }
    let t = obs.len();
    (0..folds)
        .map(|i| {
            let lo = i * t / folds;
            let hi = (i + 1) * t / folds;
            let train = obs.slice(0..lo).concat(&obs.slice(hi..t))?;
            Ok((train, obs.slice(lo..hi)))
        })
        .collect()
}

/// Summary of one fitted run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub trans_error: Option<f64>,
    pub pred_logprob: f64,
    pub per_iter_seconds: f64,
    pub total_seconds: f64,
    /// Always "plug-in posterior means".
    pub predictive: String,
    pub config: String,
}

pub const PREDICTIVE_KIND: &str = "plug-in posterior means";
