//! Stochastic variational inference over subchains.
//!
//! Positions in [`SubchainSpec`] are 1-based and inclusive, as in the
//! sampling rule `start ~ Uniform{1, …, T − L + 1}`; the accessors convert to
//! 0-based half-open ranges.

use std::ops::Range;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch::{add_emission, initialize};
use crate::error::{Error, Result};
use crate::eval::predictive_log_prob;
use crate::message::{
    assemble_beliefs, backward_range, exponentiate_rows, forward_range, marginal_into, oracle, pair_into, Beliefs,
    ExpectedParams,
};
use crate::model::{DirichletNat, GlobalVariational, Observations, Prior};
use crate::stats::{ExpectedStats, StatsAccumulator};
use crate::trace::{FitTrace, TraceRecord};

/// A sampled window plus the buffer extents added around it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubchainSpec {
    pub start: usize,
    pub len: usize,
    pub buf_left: usize,
    pub buf_right: usize,
}

impl SubchainSpec {
    pub fn new(total: usize, start: usize, len: usize) -> Result<Self> {
        if len < 1 || start < 1 || start + len - 1 > total {
            return Err(Error::InvalidParameter(format!(
                "subchain starting at {start} with length {len} does not fit in a sequence of length {total}"
            )));
        }
        Ok(Self { start, len, buf_left: 0, buf_right: 0 })
    }

    /// 0-based range of the subchain itself.
    pub fn interior(&self) -> Range<usize> {
        self.start - 1..self.start - 1 + self.len
    }

    /// 0-based range including buffers.
    pub fn window(&self) -> Range<usize> {
        self.start - 1 - self.buf_left..self.start - 1 + self.len + self.buf_right
    }

    pub fn buffer_added(&self) -> usize {
        self.buf_left + self.buf_right
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SviConfig {
    /// Subchain length L.
    pub subchain_len: usize,
    /// Subchains per minibatch M.
    pub minibatch: usize,
    /// Forgetting rate κ of ρ_n = (1 + n)^(−κ).
    pub kappa: f64,
    pub iters: usize,
    /// GrowBuf tolerance on the L1 change of the endpoint beliefs.
    pub epsilon: f64,
    /// Observations added per side in each GrowBuf round.
    pub grow_u: usize,
    pub use_growbuf: bool,
    pub seed: u64,
    /// Maximum number of validation observations scored per iteration.
    pub objective_len: usize,
}

impl Default for SviConfig {
    fn default() -> Self {
        Self {
            subchain_len: 20,
            minibatch: 10,
            kappa: 0.5,
            iters: 100,
            epsilon: 1e-6,
            grow_u: 8,
            use_growbuf: true,
            seed: 0,
            objective_len: 2000,
        }
    }
}

impl SviConfig {
    /// L = 2·half_width + 1.
    pub fn subchain_len_from_half_width(half_width: usize) -> usize {
        2 * half_width + 1
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        if self.subchain_len < 2 {
            return Err(Error::InvalidParameter("subchain length must be at least 2".into()));
        }
        if self.subchain_len > total {
            return Err(Error::InvalidParameter(format!(
                "subchain length {} exceeds sequence length {total}",
                self.subchain_len
            )));
        }
        if self.minibatch == 0 {
            return Err(Error::InvalidParameter("minibatch size must be at least 1".into()));
        }
        // κ = 0.5 is admitted: it is the value used in practice, and the
        // schedule still has Σρ = ∞ with Σρ² diverging only logarithmically.
        if !(0.5..=1.0).contains(&self.kappa) {
            return Err(Error::InvalidParameter(format!("forgetting rate {} outside [0.5, 1]", self.kappa)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter("GrowBuf tolerance must be positive".into()));
        }
        if self.grow_u == 0 {
            return Err(Error::InvalidParameter("GrowBuf step must be at least 1".into()));
        }
        if self.objective_len == 0 {
            return Err(Error::InvalidParameter("objective length must be at least 1".into()));
        }
        Ok(())
    }
}

/// Uniform start on {1, …, T − L + 1}, no buffers.
pub fn sample_subchain<R: Rng + ?Sized>(total: usize, len: usize, rng: &mut R) -> Result<SubchainSpec> {
    if len < 2 || len > total {
        return Err(Error::InvalidParameter(format!(
            "subchain length {len} must lie in [2, {total}]"
        )));
    }
    let start = rng.random_range(1..=total - len + 1);
    SubchainSpec::new(total, start, len)
}

/// Scales applied to subchain transition and emission statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchFactors {
    pub trans: f64,
    pub emit: f64,
}

impl BatchFactors {
    pub fn scaled(&self, s: f64) -> BatchFactors {
        BatchFactors { trans: self.trans * s, emit: self.emit * s }
    }
}

/// c^A = (T − L + 1)/(L − 1), c^φ = (T − L + 1)/L.
pub fn batch_factors(total: usize, len: usize) -> Result<BatchFactors> {
    if len < 2 || len > total {
        return Err(Error::InvalidParameter(format!("subchain length {len} must lie in [2, {total}]")));
    }
    let n = (total - len + 1) as f64;
    Ok(BatchFactors { trans: n / (len - 1) as f64, emit: n / len as f64 })
}

/// ρ_n = (1 + n)^(−κ).
pub fn step_size(n: usize, kappa: f64) -> f64 {
    (1.0 + n as f64).powf(-kappa)
}

/// u + cᵀE[t] for one (already averaged) set of statistics.
pub fn scaled_target(prior: &Prior, c: BatchFactors, stats: &ExpectedStats) -> GlobalVariational {
    let k = stats.num_states();
    let trans = (0..k)
        .map(|j| DirichletNat {
            u: prior.dirichlet.u.iter().enumerate().map(|(l, u)| u + c.trans * stats.trans[(j, l)]).collect(),
        })
        .collect();
    let emit = stats.emit.iter().map(|e| add_emission(&prior.niw, e, c.emit)).collect();
    GlobalVariational { trans, emit, prior: prior.clone() }
}

/// A natural-gradient vector in the flat layout of
/// [`GlobalVariational::to_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalGradient(pub Vec<f64>);

impl NaturalGradient {
    pub fn dot(&self, other: &NaturalGradient) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// u + cᵀE[t] − w.
pub fn natural_gradient(w: &GlobalVariational, c: BatchFactors, stats: &ExpectedStats) -> NaturalGradient {
    let target = scaled_target(&w.prior, c, stats).to_flat();
    NaturalGradient(target.iter().zip(w.to_flat()).map(|(t, v)| t - v).collect())
}

/// w_{n+1} = (1 − ρ) w_n + ρ (u + Σ_S cᵀE[t_S] / M).
pub fn minibatch_update(
    w: &GlobalVariational,
    c: BatchFactors,
    stats: &[ExpectedStats],
    rho: f64,
) -> Result<GlobalVariational> {
    let first = stats
        .first()
        .ok_or_else(|| Error::InvalidParameter("minibatch must contain at least one subchain".into()))?;
    let mut sum = ExpectedStats::zeros(first.num_states(), first.dim());
    for s in stats {
        sum.add_scaled(s, 1.0, 1.0);
    }
    let m = stats.len() as f64;
    let mean = if stats.len() == 1 { sum } else { sum.scaled(1.0 / m, 1.0 / m) };
    let target = scaled_target(&w.prior, c, &mean);
    let next = w.lerp(&target, rho);
    next.validate().map_err(|e| match e {
        Error::NotPositiveDefinite(msg) => {
            Error::NotPositiveDefinite(format!("after a step of size {rho}: {msg}"))
        }
        other => other,
    })?;
    Ok(next)
}

/// Result of [`grow_buffer`]: interior beliefs, the final buffer extents and
/// the endpoint residual of every comparison.
#[derive(Debug, Clone)]
pub struct GrowBufOutcome {
    pub beliefs: Beliefs,
    pub spec: SubchainSpec,
    pub residuals: Vec<f64>,
}

/// Messages over a contiguous window [lo, hi) of the sequence.
struct Window<'a> {
    params: &'a ExpectedParams,
    obs: &'a Observations,
    lo: usize,
    hi: usize,
    emit: Vec<f64>,
    maxes: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_terms: Vec<f64>,
}

impl<'a> Window<'a> {
    fn new(params: &'a ExpectedParams, obs: &'a Observations, range: Range<usize>) -> Result<Self> {
        let k = params.num_states();
        let mut emit = params.log_ptilde(obs, range.clone());
        let maxes = exponentiate_rows(&mut emit, k, range.start)?;
        let len = range.len();
        let mut w = Window {
            params,
            obs,
            lo: range.start,
            hi: range.end,
            emit,
            maxes,
            alpha: vec![0.0; len * k],
            beta: vec![0.0; len * k],
            log_terms: vec![0.0; len],
        };
        w.forward_from(0)?;
        w.backward_from(len);
        Ok(w)
    }

    fn forward_from(&mut self, from: usize) -> Result<()> {
        let p = self.params;
        forward_range(
            p.pi_hat(),
            p.atilde(),
            &self.emit,
            &self.maxes,
            p.num_states(),
            &mut self.alpha,
            &mut self.log_terms,
            from,
            self.lo,
        )
    }

    fn backward_from(&mut self, from: usize) {
        backward_range(self.params.atilde(), &self.emit, self.params.num_states(), &mut self.beta, 0, from);
    }

    /// Extends to [new_lo, new_hi). Forward messages survive when the left
    /// edge is unchanged and backward messages when the right edge is.
    fn extend(&mut self, new_lo: usize, new_hi: usize) -> Result<()> {
        let k = self.params.num_states();
        let (add_left, add_right) = (self.lo - new_lo, new_hi - self.hi);
        let mut left = self.params.log_ptilde(self.obs, new_lo..self.lo);
        let left_max = exponentiate_rows(&mut left, k, new_lo)?;
        let mut right = self.params.log_ptilde(self.obs, self.hi..new_hi);
        let right_max = exponentiate_rows(&mut right, k, self.hi)?;
        let old_len = self.hi - self.lo;

        self.emit = [left, std::mem::take(&mut self.emit), right].concat();
        self.maxes = [left_max, std::mem::take(&mut self.maxes), right_max].concat();
        let len = old_len + add_left + add_right;
        self.lo = new_lo;
        self.hi = new_hi;

        if add_left == 0 {
            self.alpha.resize(len * k, 0.0);
            self.log_terms.resize(len, 0.0);
            self.forward_from(old_len)?;
        } else {
            self.alpha = vec![0.0; len * k];
            self.log_terms = vec![0.0; len];
            self.forward_from(0)?;
        }
        if add_right == 0 {
            let mut beta = vec![0.0; add_left * k];
            beta.extend_from_slice(&self.beta);
            self.beta = beta;
            self.backward_from(add_left);
        } else {
            self.beta = vec![0.0; len * k];
            self.backward_from(len);
        }
        Ok(())
    }

    fn marginal(&self, t: usize) -> Vec<f64> {
        let k = self.params.num_states();
        let i = t - self.lo;
        let mut out = vec![0.0; k];
        marginal_into(&self.alpha[i * k..(i + 1) * k], &self.beta[i * k..(i + 1) * k], &mut out);
        out
    }

    fn beliefs(&self, range: Range<usize>) -> Result<Beliefs> {
        assemble_beliefs(
            &self.alpha,
            &self.beta,
            &self.emit,
            self.params.atilde(),
            self.params.num_states(),
            range.start - self.lo..range.end - self.lo,
            self.log_terms.iter().sum(),
        )
    }

    /// Expected statistics over `range`, accumulated without materializing
    /// the beliefs.
    fn stats(&self, range: Range<usize>) -> ExpectedStats {
        let k = self.params.num_states();
        let mut acc = StatsAccumulator::new(k, self.obs.dim());
        let mut gamma = vec![0.0; k];
        let mut xi = vec![0.0; k * k];
        for t in range.clone() {
            let i = t - self.lo;
            let alpha = &self.alpha[i * k..(i + 1) * k];
            marginal_into(alpha, &self.beta[i * k..(i + 1) * k], &mut gamma);
            acc.add_marginal(&gamma, self.obs.row(t));
            if t + 1 < range.end {
                pair_into(
                    alpha,
                    self.params.atilde(),
                    &self.emit[(i + 1) * k..(i + 2) * k],
                    &self.beta[(i + 1) * k..(i + 2) * k],
                    &mut xi,
                );
                acc.add_pair(&xi);
            }
        }
        acc.finish()
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Beliefs over the subchain alone, forward messages started from π̂.
pub fn subchain_beliefs(obs: &Observations, spec: &SubchainSpec, params: &ExpectedParams) -> Result<Beliefs> {
    let window = Window::new(params, obs, spec.window())?;
    window.beliefs(spec.interior())
}

/// GrowBuf: pads the subchain by `grow_u` observations per side per round
/// (clipped at the sequence ends), reruns message passing over the padded
/// window with π̂ at its left edge, and stops once the L1 change of both
/// interior endpoint marginals is at most `epsilon`, or once the window covers
/// the whole sequence. Returns the interior beliefs only.
pub fn grow_buffer(
    obs: &Observations,
    spec: &SubchainSpec,
    params: &ExpectedParams,
    epsilon: f64,
    grow_u: usize,
) -> Result<GrowBufOutcome> {
    let (window, spec, residuals) = grow_window(obs, spec, params, epsilon, grow_u)?;
    Ok(GrowBufOutcome { beliefs: window.beliefs(spec.interior())?, spec, residuals })
}

fn grow_window<'a>(
    obs: &'a Observations,
    spec: &SubchainSpec,
    params: &'a ExpectedParams,
    epsilon: f64,
    grow_u: usize,
) -> Result<(Window<'a>, SubchainSpec, Vec<f64>)> {
    if grow_u == 0 || !(epsilon > 0.0) {
        return Err(Error::InvalidParameter("GrowBuf needs epsilon > 0 and a step of at least 1".into()));
    }
    let total = obs.len();
    let mut spec = *spec;
    let interior = spec.interior();
    let (first, last) = (interior.start, interior.end - 1);
    let mut window = Window::new(params, obs, spec.window())?;
    let mut prev = (window.marginal(first), window.marginal(last));
    let mut residuals = Vec::new();
    while window.lo > 0 || window.hi < total {
        let new_lo = window.lo.saturating_sub(grow_u);
        let new_hi = (window.hi + grow_u).min(total);
        window.extend(new_lo, new_hi)?;
        spec.buf_left = interior.start - new_lo;
        spec.buf_right = new_hi - interior.end;
        let now = (window.marginal(first), window.marginal(last));
        let residual = l1(&now.0, &prev.0).max(l1(&now.1, &prev.1));
        residuals.push(residual);
        prev = now;
        if residual <= epsilon {
            break;
        }
    }
    Ok((window, spec, residuals))
}

/// Initializes from `prior` and `config.seed` and runs SVIHMM.
pub fn run_svihmm(
    obs: &Observations,
    k: usize,
    prior: &Prior,
    config: &SviConfig,
    validation: Option<&Observations>,
) -> Result<FitTrace> {
    if prior.num_states() != k {
        return Err(Error::DimensionMismatch(format!("prior for K = {} but K = {k} requested", prior.num_states())));
    }
    config.validate(obs.len())?;
    let w0 = initialize(obs, prior, config.seed)?;
    run_svihmm_from(obs, w0, config, validation)
}

/// SVIHMM from a given state. Each record describes one minibatch update;
/// `objective` is the predictive log-probability per observation of the
/// updated state on the first `objective_len` observations of `validation`
/// (default: the trailing `objective_len` observations of `obs`), and is not
/// included in `wall_seconds`.
pub fn run_svihmm_from(
    obs: &Observations,
    w0: GlobalVariational,
    config: &SviConfig,
    validation: Option<&Observations>,
) -> Result<FitTrace> {
    config.validate(obs.len())?;
    let total = obs.len();
    let scoring = match validation {
        Some(v) => v.slice(0..v.len().min(config.objective_len)),
        None => obs.slice(total - total.min(config.objective_len)..total),
    };
    let c = batch_factors(total, config.subchain_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut w = w0;
    let mut records = Vec::with_capacity(config.iters);
    for n in 0..config.iters {
        let start = Instant::now();
        let params = ExpectedParams::from_global(&w)?;
        let mut batch = Vec::with_capacity(config.minibatch);
        let mut added = 0;
        for _ in 0..config.minibatch {
            let spec = sample_subchain(total, config.subchain_len, &mut rng)?;
            let window = if config.use_growbuf {
                let (window, grown, _) = grow_window(obs, &spec, &params, config.epsilon, config.grow_u)?;
                added += grown.buffer_added();
                window
            } else {
                Window::new(&params, obs, spec.window())?
            };
            batch.push(window.stats(spec.interior()));
        }
        let rho = step_size(n, config.kappa);
        w = minibatch_update(&w, c, &batch, rho)?;
        let wall_seconds = start.elapsed().as_secs_f64();
        let objective = predictive_log_prob(&w, &scoring)?;
        if !objective.is_finite() {
            return Err(Error::NonFinite { iteration: n, detail: format!("validation objective {objective}") });
        }
        log::debug!("svi iter {n}: rho {rho} objective {objective} buffer {added}");
        records.push(TraceRecord { iter: n, rho: Some(rho), objective, buffer_added_total: added, wall_seconds });
    }
    Ok(FitTrace { records, final_state: w, converged: false })
}

/// Outcome of comparing the noisy natural gradients from exact and
/// approximate beliefs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPlaneCheck {
    /// Inner product of the two gradients.
    pub dot: f64,
    /// M^S / ‖cᵀt‖₂: belief errors below this keep the gradients in the same
    /// half-space.
    pub eps_bound: f64,
    pub ok: bool,
    /// Larger of the two gradient norms.
    pub m_s: f64,
    /// ‖cᵀt‖₂ = sqrt(Σ_j (c_j Σ_x |t_j(x, y)|)²) over all state sequences x.
    pub t_norm: f64,
}

/// Statistics in the flat natural-parameter layout.
fn flat_stats(stats: &ExpectedStats) -> Vec<f64> {
    let k = stats.num_states();
    let mut out = Vec::new();
    for j in 0..k {
        out.extend((0..k).map(|l| stats.trans[(j, l)]));
    }
    for e in &stats.emit {
        out.extend(e.s1.iter());
        out.push(e.s2());
        out.extend(e.s3.iter());
        out.push(e.s4());
    }
    out
}

/// Compares gradients from `exact` and `approx` beliefs over one subchain.
/// `stats_fn` maps beliefs over the subchain to its sufficient statistics.
pub fn ascent_halfplane_check(
    exact: &Beliefs,
    approx: &Beliefs,
    w: &GlobalVariational,
    c: BatchFactors,
    stats_fn: impl Fn(&Beliefs) -> Result<ExpectedStats>,
) -> Result<HalfPlaneCheck> {
    if exact.len() != approx.len() || exact.num_states() != approx.num_states() {
        return Err(Error::DimensionMismatch("belief sets cover different subchains".into()));
    }
    let g_exact = natural_gradient(w, c, &stats_fn(exact)?);
    let g_approx = natural_gradient(w, c, &stats_fn(approx)?);
    let dot = g_exact.dot(&g_approx);
    let m_s = g_exact.norm().max(g_approx.norm());

    let (k, len) = (exact.num_states(), exact.len());
    oracle::check_cap(k, len)?;
    let mut abs_sum: Vec<f64> = Vec::new();
    let mut failure = None;
    oracle::for_each_sequence(k, len, |seq| {
        if failure.is_some() {
            return;
        }
        let t = Beliefs::deterministic(k, seq).and_then(|b| stats_fn(&b));
        match t {
            Ok(t) => {
                let flat = flat_stats(&t);
                if abs_sum.is_empty() {
                    abs_sum = vec![0.0; flat.len()];
                }
                for (a, v) in abs_sum.iter_mut().zip(&flat) {
                    *a += v.abs();
                }
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let per_coord = scale_flat(&abs_sum, k, c);
    let t_norm = per_coord.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(HalfPlaneCheck { dot, eps_bound: m_s / t_norm, ok: dot > 0.0, m_s, t_norm })
}

/// Applies c^A to the first K² coordinates and c^φ to the rest.
fn scale_flat(sums: &[f64], k: usize, c: BatchFactors) -> Vec<f64> {
    sums.iter()
        .enumerate()
        .map(|(i, v)| if i < k * k { c.trans * v } else { c.emit * v })
        .collect()
}
