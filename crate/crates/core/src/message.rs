//! Variational surrogates (Ã, p̃, π̂) and scaled forward-backward.

use std::ops::Range;

use nalgebra::DMatrix;
use statrs::function::gamma::digamma;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, ln_det_from_cholesky, mv_digamma};
use crate::model::{niw_from_natural, stationary_distribution, DirichletNat, GlobalVariational, NiwNat, Observations};

/// Floor applied to expected log emission densities so that −∞ never
/// enters the recursions.
pub const LOG_DENSITY_FLOOR: f64 = -1e300;

/// Ã_{jk} = exp[ψ(α_jk) − ψ(Σ_l α_jl)] with α = w + 1.
pub fn expected_transition(rows: &[DirichletNat]) -> DMatrix<f64> {
    let k = rows.len();
    let mut out = DMatrix::zeros(k, k);
    for (j, row) in rows.iter().enumerate() {
        let alpha = row.concentration();
        let total = digamma(alpha.iter().sum());
        for (l, a) in alpha.iter().enumerate() {
            out[(j, l)] = (digamma(*a) - total).exp();
        }
    }
    out
}

/// π̂: stationary distribution of E_q[A].
pub fn estimate_pi(rows: &[DirichletNat]) -> Result<Vec<f64>> {
    let k = rows.len();
    let mut mean = DMatrix::zeros(k, k);
    for (j, row) in rows.iter().enumerate() {
        for (l, v) in row.mean().into_iter().enumerate() {
            mean[(j, l)] = v;
        }
    }
    stationary_distribution(&mean)
}

/// Closed-form E_{q(μ,Σ)}[ln N(y | μ, Σ)] for one NIW factor, with the
/// y-independent part precomputed.
#[derive(Debug, Clone)]
pub struct EmissionExpectation {
    mean: Vec<f64>,
    chol: Vec<f64>,
    nu: f64,
    constant: f64,
}

impl EmissionExpectation {
    pub fn new(nat: &NiwNat) -> Result<Self> {
        let std = niw_from_natural(nat).map_err(|e| {
            Error::NotPositiveDefinite(format!("corrupted variational emission state: {e}"))
        })?;
        let p = std.dim();
        let chol = cholesky(&std.sigma0, "variational NIW scale")?;
        let ln_det = ln_det_from_cholesky(&chol);
        let pf = p as f64;
        // E ln|Σ| = ln|Ψ| − p ln 2 − ψ_p(ν/2)
        let e_ln_det = ln_det - pf * std::f64::consts::LN_2 - mv_digamma(p, std.nu0 / 2.0);
        let constant = -0.5 * pf * (2.0 * std::f64::consts::PI).ln() - 0.5 * e_ln_det - 0.5 * pf / std.kappa0;
        let l = chol.l();
        let mut flat = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..=i {
                flat[i * p + j] = l[(i, j)];
            }
        }
        Ok(Self { mean: std.mu0.iter().copied().collect(), chol: flat, nu: std.nu0, constant })
    }

    #[inline]
    pub fn log_density(&self, y: &[f64]) -> f64 {
        let p = self.mean.len();
        let mut maha = 0.0;
        let mut stack = [0.0f64; 16];
        let mut heap = Vec::new();
        let z: &mut [f64] = if p <= stack.len() {
            &mut stack[..p]
        } else {
            heap.resize(p, 0.0);
            &mut heap
        };
        for i in 0..p {
            let row = &self.chol[i * p..i * p + i];
            let acc = y[i] - self.mean[i] - row.iter().zip(&z[..i]).map(|(l, v)| l * v).sum::<f64>();
            z[i] = acc / self.chol[i * p + i];
            maha += z[i] * z[i];
        }
        self.constant - 0.5 * self.nu * maha
    }
}

pub fn expected_log_density(nat: &NiwNat, y: &[f64]) -> Result<f64> {
    if y.len() != nat.dim() {
        return Err(Error::DimensionMismatch(format!(
            "observation of length {} for a {}-dimensional emission",
            y.len(),
            nat.dim()
        )));
    }
    Ok(EmissionExpectation::new(nat)?.log_density(y))
}

/// Everything the local step needs from the current global state: Ã (and its
/// log), π̂, and per-state evaluators of ln p̃(y | k).
#[derive(Debug, Clone)]
pub struct ExpectedParams {
    k: usize,
    atilde: Vec<f64>,
    log_atilde: Vec<f64>,
    pi_hat: Vec<f64>,
    emissions: Vec<EmissionExpectation>,
}

impl ExpectedParams {
    pub fn from_global(w: &GlobalVariational) -> Result<Self> {
        let k = w.num_states();
        let a = expected_transition(&w.trans);
        let mut atilde = vec![0.0; k * k];
        for j in 0..k {
            for l in 0..k {
                atilde[j * k + l] = a[(j, l)];
            }
        }
        let log_atilde = atilde.iter().map(|v| v.ln()).collect();
        let pi_hat = estimate_pi(&w.trans)?;
        let emissions = w
            .emit
            .iter()
            .map(EmissionExpectation::new)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { k, atilde, log_atilde, pi_hat, emissions })
    }

    pub fn num_states(&self) -> usize {
        self.k
    }

    pub fn pi_hat(&self) -> &[f64] {
        &self.pi_hat
    }

    /// Ã in row-major order.
    pub fn atilde(&self) -> &[f64] {
        &self.atilde
    }

    pub fn log_atilde(&self) -> &[f64] {
        &self.log_atilde
    }

    pub fn atilde_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.k, self.k, &self.atilde)
    }

    /// ln p̃(y_t | k) for t in `range`, row-major (len × K), floored at
    /// [`LOG_DENSITY_FLOOR`].
    pub fn log_ptilde(&self, obs: &Observations, range: Range<usize>) -> Vec<f64> {
        let mut out = Vec::with_capacity(range.len() * self.k);
        self.extend_log_ptilde(obs, range, &mut out);
        out
    }

    pub(crate) fn extend_log_ptilde(&self, obs: &Observations, range: Range<usize>, out: &mut Vec<f64>) {
        for t in range {
            let y = obs.row(t);
            for e in &self.emissions {
                let v = e.log_density(y);
                out.push(if v.is_nan() { LOG_DENSITY_FLOOR } else { v.max(LOG_DENSITY_FLOOR) });
            }
        }
    }
}

/// Marginal and pairwise posteriors over a chain of length `len`.
///
/// `pair(t)` is the K×K (row-major) joint of (x_t, x_{t+1}), 0-based, so there
/// are `len − 1` pairwise slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Beliefs {
    k: usize,
    len: usize,
    marginals: Vec<f64>,
    pairwise: Vec<f64>,
    log_norm: f64,
}

impl Beliefs {
    pub fn new(k: usize, marginals: Vec<f64>, pairwise: Vec<f64>, log_norm: f64) -> Result<Self> {
        if k == 0 || !marginals.len().is_multiple_of(k) || marginals.is_empty() {
            return Err(Error::DimensionMismatch("marginals do not form rows of K".into()));
        }
        let len = marginals.len() / k;
        if pairwise.len() != (len - 1) * k * k {
            return Err(Error::DimensionMismatch(format!(
                "expected {} pairwise entries, got {}",
                (len - 1) * k * k,
                pairwise.len()
            )));
        }
        Ok(Self { k, len, marginals, pairwise, log_norm })
    }

    /// Beliefs that put all mass on one state sequence.
    pub fn deterministic(k: usize, states: &[usize]) -> Result<Self> {
        let len = states.len();
        let mut marginals = vec![0.0; len * k];
        let mut pairwise = vec![0.0; len.saturating_sub(1) * k * k];
        for (t, &s) in states.iter().enumerate() {
            if s >= k {
                return Err(Error::InvalidParameter(format!("state {s} out of range for K = {k}")));
            }
            marginals[t * k + s] = 1.0;
            if t + 1 < len {
                pairwise[t * k * k + s * k + states[t + 1]] = 1.0;
            }
        }
        Self::new(k, marginals, pairwise, 0.0)
    }

    pub fn num_states(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }

    pub fn marginal(&self, t: usize) -> &[f64] {
        &self.marginals[t * self.k..(t + 1) * self.k]
    }

    pub fn pair(&self, t: usize) -> &[f64] {
        let kk = self.k * self.k;
        &self.pairwise[t * kk..(t + 1) * kk]
    }

    pub fn marginals(&self) -> &[f64] {
        &self.marginals
    }

    pub fn pairwise(&self) -> &[f64] {
        &self.pairwise
    }

    /// Beliefs for positions `range` only; the log normalizer is carried over
    /// from the enclosing chain.
    pub fn restrict(&self, range: Range<usize>) -> Beliefs {
        let kk = self.k * self.k;
        Beliefs {
            k: self.k,
            len: range.len(),
            marginals: self.marginals[range.start * self.k..range.end * self.k].to_vec(),
            pairwise: self.pairwise[range.start * kk..(range.end - 1) * kk].to_vec(),
            log_norm: self.log_norm,
        }
    }
}

/// Converts rows of ln p̃ in place to exp(row − max_row) and returns the row
/// maxima. `offset` is added to positions reported in errors.
pub(crate) fn exponentiate_rows(log_p: &mut [f64], k: usize, offset: usize) -> Result<Vec<f64>> {
    let mut maxes = Vec::with_capacity(log_p.len() / k);
    for (t, row) in log_p.chunks_exact_mut(k).enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::ZeroLikelihood { position: offset + t });
        }
        for v in row.iter_mut() {
            *v = (*v - m).exp();
        }
        maxes.push(m);
    }
    Ok(maxes)
}

/// Fills normalized forward messages α_t for t in `from..len`, continuing from
/// α_{from−1} (or `prior` when `from == 0`). `log_terms[t]` receives
/// ln s_t + max_t, so their sum is the log normalizer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_range(
    prior: &[f64],
    atilde: &[f64],
    emit: &[f64],
    maxes: &[f64],
    k: usize,
    alpha: &mut [f64],
    log_terms: &mut [f64],
    from: usize,
    offset: usize,
) -> Result<()> {
    let len = emit.len() / k;
    for t in from..len {
        let (done, rest) = alpha.split_at_mut(t * k);
        let out = &mut rest[..k];
        if t == 0 {
            out.copy_from_slice(prior);
        } else {
            let prev = &done[(t - 1) * k..];
            out.iter_mut().for_each(|v| *v = 0.0);
            for (j, a) in prev.iter().enumerate() {
                let row = &atilde[j * k..(j + 1) * k];
                for (o, r) in out.iter_mut().zip(row) {
                    *o += a * r;
                }
            }
        }
        let mut s = 0.0;
        for (o, e) in out.iter_mut().zip(&emit[t * k..(t + 1) * k]) {
            *o *= e;
            s += *o;
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::ZeroLikelihood { position: offset + t });
        }
        out.iter_mut().for_each(|v| *v /= s);
        log_terms[t] = s.ln() + maxes[t];
    }
    Ok(())
}

/// β_t ∝ Ã (e_{t+1} ⊙ β_{t+1}), normalized to sum to one.
#[inline]
pub(crate) fn backward_step(atilde: &[f64], emit_next: &[f64], beta_next: &[f64], scratch: &mut [f64], out: &mut [f64]) {
    let k = out.len();
    for ((b, e), n) in scratch.iter_mut().zip(emit_next).zip(beta_next) {
        *b = e * n;
    }
    let mut total = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        let row = &atilde[j * k..(j + 1) * k];
        *o = row.iter().zip(scratch.iter()).map(|(a, b)| a * b).sum();
        total += *o;
    }
    out.iter_mut().for_each(|v| *v /= total);
}

/// Fills normalized backward messages for t in `down_to..from` (descending),
/// given valid β_t for t ≥ `from`. With `from == len` the last message is
/// initialized flat first.
pub(crate) fn backward_range(atilde: &[f64], emit: &[f64], k: usize, beta: &mut [f64], down_to: usize, from: usize) {
    let len = emit.len() / k;
    let mut from = from;
    if from == len {
        beta[(len - 1) * k..].iter_mut().for_each(|v| *v = 1.0 / k as f64);
        from = len - 1;
    }
    let mut scratch = vec![0.0; k];
    for t in (down_to..from).rev() {
        let (lo, hi) = beta.split_at_mut((t + 1) * k);
        backward_step(atilde, &emit[(t + 1) * k..(t + 2) * k], &hi[..k], &mut scratch, &mut lo[t * k..]);
    }
}

/// γ ∝ α ⊙ β.
#[inline]
pub(crate) fn marginal_into(alpha: &[f64], beta: &[f64], out: &mut [f64]) {
    let mut s = 0.0;
    for ((o, x), y) in out.iter_mut().zip(alpha).zip(beta) {
        *o = x * y;
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

/// ξ(j, c) ∝ α_t(j) Ã(j, c) e_{t+1}(c) β_{t+1}(c).
#[inline]
pub(crate) fn pair_into(alpha: &[f64], atilde: &[f64], emit_next: &[f64], beta_next: &[f64], out: &mut [f64]) {
    let k = alpha.len();
    let mut total = 0.0;
    for j in 0..k {
        let aj = alpha[j];
        for c in 0..k {
            let v = aj * atilde[j * k + c] * emit_next[c] * beta_next[c];
            out[j * k + c] = v;
            total += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Backward sweep that never stores β. Calls `visit(t, γ_t, ξ_t)` for every t
/// in descending order, where ξ_t is the pair (t, t + 1) and is absent at the
/// last position.
pub(crate) fn backward_visit(
    alpha: &[f64],
    emit: &[f64],
    atilde: &[f64],
    k: usize,
    mut visit: impl FnMut(usize, &[f64], Option<&[f64]>),
) {
    let len = alpha.len() / k;
    let mut beta_next = vec![1.0 / k as f64; k];
    let mut beta = vec![0.0; k];
    let mut scratch = vec![0.0; k];
    let mut gamma = vec![0.0; k];
    let mut xi = vec![0.0; k * k];
    marginal_into(&alpha[(len - 1) * k..], &beta_next, &mut gamma);
    visit(len - 1, &gamma, None);
    for t in (0..len - 1).rev() {
        let emit_next = &emit[(t + 1) * k..(t + 2) * k];
        let alpha_t = &alpha[t * k..(t + 1) * k];
        pair_into(alpha_t, atilde, emit_next, &beta_next, &mut xi);
        backward_step(atilde, emit_next, &beta_next, &mut scratch, &mut beta);
        marginal_into(alpha_t, &beta, &mut gamma);
        visit(t, &gamma, Some(&xi));
        std::mem::swap(&mut beta, &mut beta_next);
    }
}

/// Full beliefs over positions `range` of a window whose α and β are known.
pub(crate) fn assemble_beliefs(
    alpha: &[f64],
    beta: &[f64],
    emit: &[f64],
    atilde: &[f64],
    k: usize,
    range: Range<usize>,
    log_norm: f64,
) -> Result<Beliefs> {
    let len = range.len();
    let mut marginals = vec![0.0; len * k];
    let mut pairwise = vec![0.0; len.saturating_sub(1) * k * k];
    for (i, t) in range.clone().enumerate() {
        marginal_into(&alpha[t * k..(t + 1) * k], &beta[t * k..(t + 1) * k], &mut marginals[i * k..(i + 1) * k]);
        if t + 1 < range.end {
            pair_into(
                &alpha[t * k..(t + 1) * k],
                atilde,
                &emit[(t + 1) * k..(t + 2) * k],
                &beta[(t + 1) * k..(t + 2) * k],
                &mut pairwise[i * k * k..(i + 1) * k * k],
            );
        }
    }
    Beliefs::new(k, marginals, pairwise, log_norm)
}

fn check_shapes(pi_init: &[f64], atilde: &DMatrix<f64>, log_ptilde: &[f64]) -> Result<(usize, usize)> {
    let k = pi_init.len();
    if k == 0 || atilde.nrows() != k || atilde.ncols() != k {
        return Err(Error::DimensionMismatch(format!(
            "initial distribution over {k} states with a {}x{} transition surrogate",
            atilde.nrows(),
            atilde.ncols()
        )));
    }
    if log_ptilde.is_empty() || !log_ptilde.len().is_multiple_of(k) {
        return Err(Error::DimensionMismatch(format!(
            "{} emission terms do not form rows of {k}",
            log_ptilde.len()
        )));
    }
    Ok((k, log_ptilde.len() / k))
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let k = m.nrows();
    let mut out = vec![0.0; k * m.ncols()];
    for j in 0..k {
        for l in 0..m.ncols() {
            out[j * m.ncols() + l] = m[(j, l)];
        }
    }
    out
}

/// Scaled forward-backward over a chain with initial distribution `pi_init`,
/// transition surrogate Ã and expected log emission densities (len × K,
/// row-major).
pub fn forward_backward(pi_init: &[f64], atilde: &DMatrix<f64>, log_ptilde: &[f64]) -> Result<Beliefs> {
    let (k, _) = check_shapes(pi_init, atilde, log_ptilde)?;
    forward_backward_flat(pi_init, &row_major(atilde), log_ptilde, k)
}

pub(crate) fn forward_backward_flat(pi_init: &[f64], atilde: &[f64], log_ptilde: &[f64], k: usize) -> Result<Beliefs> {
    let mut emit = log_ptilde.to_vec();
    let maxes = exponentiate_rows(&mut emit, k, 0)?;
    let len = maxes.len();
    let mut alpha = vec![0.0; len * k];
    let mut log_terms = vec![0.0; len];
    forward_range(pi_init, atilde, &emit, &maxes, k, &mut alpha, &mut log_terms, 0, 0)?;
    let mut beta = vec![0.0; len * k];
    backward_range(atilde, &emit, k, &mut beta, 0, len);
    assemble_beliefs(&alpha, &beta, &emit, atilde, k, 0..len, log_terms.iter().sum())
}

/// Enumeration cap for [`brute_force_beliefs`].
pub const ENUMERATION_CAP: usize = 10_000_000;

/// Exact beliefs by summing over all K^L state sequences.
pub fn brute_force_beliefs(pi_init: &[f64], atilde: &DMatrix<f64>, log_ptilde: &[f64]) -> Result<Beliefs> {
    let (k, len) = check_shapes(pi_init, atilde, log_ptilde)?;
    oracle::check_cap(k, len)?;
    let log_a = row_major(atilde).iter().map(|v| v.ln()).collect::<Vec<_>>();
    let log_pi = pi_init.iter().map(|v| v.ln()).collect::<Vec<_>>();
    let mass = |seq: &[usize]| oracle::sequence_log_mass(&log_pi, &log_a, log_ptilde, k, seq);

    let mut max = f64::NEG_INFINITY;
    oracle::for_each_sequence(k, len, |seq| max = max.max(mass(seq)));
    if !max.is_finite() {
        return Err(Error::ZeroLikelihood { position: 0 });
    }
    let mut total = 0.0;
    let mut marginals = vec![0.0; len * k];
    let mut pairwise = vec![0.0; (len - 1) * k * k];
    oracle::for_each_sequence(k, len, |seq| {
        let w = (mass(seq) - max).exp();
        total += w;
        for (t, &s) in seq.iter().enumerate() {
            marginals[t * k + s] += w;
            if t + 1 < len {
                pairwise[t * k * k + s * k + seq[t + 1]] += w;
            }
        }
    });
    marginals.iter_mut().for_each(|v| *v /= total);
    pairwise.iter_mut().for_each(|v| *v /= total);
    Beliefs::new(k, marginals, pairwise, max + total.ln())
}

/// Sequence enumeration helpers shared by the exhaustive oracles.
pub mod oracle {
    use super::*;

    pub(crate) fn check_cap(k: usize, len: usize) -> Result<()> {
        let count = (k as f64).powi(len as i32);
        if count > ENUMERATION_CAP as f64 {
            return Err(Error::EnumerationTooLarge { count, cap: ENUMERATION_CAP });
        }
        Ok(())
    }

    /// Visits every sequence in {0..k}^len in lexicographic order.
    pub fn for_each_sequence(k: usize, len: usize, mut f: impl FnMut(&[usize])) {
        let mut seq = vec![0usize; len];
        loop {
            f(&seq);
            let mut pos = len;
            loop {
                if pos == 0 {
                    return;
                }
                pos -= 1;
                seq[pos] += 1;
                if seq[pos] < k {
                    break;
                }
                seq[pos] = 0;
            }
        }
    }

    /// ln of the unnormalized mass π(x_1) Π Ã p̃ of one sequence.
    pub fn sequence_log_mass(log_pi: &[f64], log_a: &[f64], log_p: &[f64], k: usize, seq: &[usize]) -> f64 {
        let mut acc = log_pi[seq[0]] + log_p[seq[0]];
        for t in 1..seq.len() {
            acc += log_a[seq[t - 1] * k + seq[t]] + log_p[t * k + seq[t]];
        }
        acc
    }

    /// The normalized joint q(x) over all sequences, with its log normalizer.
    pub fn joint_distribution(
        pi_init: &[f64],
        atilde: &DMatrix<f64>,
        log_ptilde: &[f64],
    ) -> Result<(Vec<Vec<usize>>, Vec<f64>, f64)> {
        let (k, len) = check_shapes(pi_init, atilde, log_ptilde)?;
        check_cap(k, len)?;
        let log_a = row_major(atilde).iter().map(|v| v.ln()).collect::<Vec<_>>();
        let log_pi = pi_init.iter().map(|v| v.ln()).collect::<Vec<_>>();
        let mut seqs = Vec::new();
        let mut masses = Vec::new();
        for_each_sequence(k, len, |s| {
            seqs.push(s.to_vec());
            masses.push(sequence_log_mass(&log_pi, &log_a, log_ptilde, k, s));
        });
        let max = masses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let probs: Vec<f64> = masses.iter().map(|m| (m - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        Ok((seqs, probs.iter().map(|p| p / total).collect(), max + total.ln()))
    }

    /// Marginal and pairwise beliefs implied by an arbitrary joint over
    /// sequences of equal length.
    pub fn beliefs_from_joint(k: usize, seqs: &[Vec<usize>], probs: &[f64], log_norm: f64) -> Result<Beliefs> {
        let len = seqs.first().map(Vec::len).unwrap_or(0);
        let mut marginals = vec![0.0; len * k];
        let mut pairwise = vec![0.0; len.saturating_sub(1) * k * k];
        for (seq, &p) in seqs.iter().zip(probs) {
            for (t, &s) in seq.iter().enumerate() {
                marginals[t * k + s] += p;
                if t + 1 < len {
                    pairwise[t * k * k + s * k + seq[t + 1]] += p;
                }
            }
        }
        Beliefs::new(k, marginals, pairwise, log_norm)
    }
}
