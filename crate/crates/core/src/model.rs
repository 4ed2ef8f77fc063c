//! Model parameters, conjugate natural-parameter algebra and the generative
//! sampler.
//!
//! The NIW natural parameters follow the layout
//!
//! ```text
//! u1 = κ0 μ0,  u2 = κ0,  u3 = Σ0 + κ0 μ0 μ0ᵀ,  u4 = ν0 + 2 + p
//! ```
//!
//! so that adding expected sufficient statistics (Σ y q, Σ q, Σ y yᵀ q, Σ q)
//! is exactly the conjugate update. A Dirichlet with concentration α has
//! natural parameter α − 1.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, cholesky, SYMMETRY_TOL};

const SIMPLEX_TOL: f64 = 1e-12;
const MAX_SQUARINGS: usize = 64;
const STATIONARY_STEP_TOL: f64 = 1e-12;
const STATIONARY_RESIDUAL_TOL: f64 = 1e-10;

/// A T×p observation sequence stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    values: Vec<f64>,
    dim: usize,
}

impl Observations {
    pub fn new(values: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("observation dimension must be positive".into()));
        }
        if !values.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch(format!(
                "{} values do not form rows of width {dim}",
                values.len()
            )));
        }
        Ok(Self { values, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch("ragged observation rows".into()));
        }
        Self::new(rows.concat(), dim)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Copy of rows `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Observations {
        Observations {
            values: self.values[range.start * self.dim..range.end * self.dim].to_vec(),
            dim: self.dim,
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Observations) -> Result<Observations> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch("cannot concatenate different widths".into()));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Ok(Observations { values, dim: self.dim })
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for t in 0..self.len() {
            for (d, v) in self.row(t).iter().enumerate() {
                m[d] += v;
            }
        }
        m / self.len().max(1) as f64
    }

    /// Maximum-likelihood covariance (divides by T).
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut c = DMatrix::zeros(self.dim, self.dim);
        for t in 0..self.len() {
            let y = self.row(t);
            for a in 0..self.dim {
                let da = y[a] - mean[a];
                for b in 0..self.dim {
                    c[(a, b)] += da * (y[b] - mean[b]);
                }
            }
        }
        c / self.len().max(1) as f64
    }
}

/// One Gaussian emission distribution with its cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianEmission {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
}

impl GaussianEmission {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        if cov.nrows() != p || cov.ncols() != p {
            return Err(Error::DimensionMismatch(format!(
                "covariance is {}x{} for a mean of length {p}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if asymmetry(&cov) > SYMMETRY_TOL {
            return Err(Error::NotPositiveDefinite("emission covariance is not symmetric".into()));
        }
        let chol_lower = cholesky(&cov, "emission covariance")?.l();
        Ok(Self { mean, cov, chol_lower })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn chol_lower(&self) -> &DMatrix<f64> {
        &self.chol_lower
    }

    /// ln N(y | μ, Σ).
    pub fn log_density(&self, y: &[f64]) -> f64 {
        let p = self.mean.len();
        let mut z = vec![0.0; p];
        let mut half_logdet = 0.0;
        for i in 0..p {
            let mut acc = y[i] - self.mean[i];
            for (j, zj) in z.iter().enumerate().take(i) {
                acc -= self.chol_lower[(i, j)] * zj;
            }
            let d = self.chol_lower[(i, i)];
            z[i] = acc / d;
            half_logdet += d.ln();
        }
        let maha: f64 = z.iter().map(|v| v * v).sum();
        -0.5 * p as f64 * (2.0 * std::f64::consts::PI).ln() - half_logdet - 0.5 * maha
    }
}

/// Generative HMM parameters θ = (π0, A, φ).
#[derive(Debug, Clone)]
pub struct HmmParams {
    pi0: Vec<f64>,
    trans: DMatrix<f64>,
    emissions: Vec<GaussianEmission>,
}

impl HmmParams {
    pub fn new(pi0: Vec<f64>, trans: DMatrix<f64>, emissions: Vec<GaussianEmission>) -> Result<Self> {
        let k = pi0.len();
        if k == 0 {
            return Err(Error::InvalidParameter("at least one state is required".into()));
        }
        if trans.nrows() != k || trans.ncols() != k || emissions.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "{k} states but transition matrix is {}x{} and {} emissions",
                trans.nrows(),
                trans.ncols(),
                emissions.len()
            )));
        }
        check_simplex(&pi0, "initial distribution")?;
        for j in 0..k {
            let row: Vec<f64> = trans.row(j).iter().copied().collect();
            check_simplex(&row, &format!("transition row {}", j + 1))?;
        }
        let p = emissions[0].mean.len();
        if emissions.iter().any(|e| e.mean.len() != p) || p == 0 {
            return Err(Error::DimensionMismatch("emission dimensions differ".into()));
        }
        Ok(Self { pi0, trans, emissions })
    }

    /// Builds parameters whose initial distribution is the stationary
    /// distribution of `trans`.
    pub fn stationary(trans: DMatrix<f64>, emissions: Vec<GaussianEmission>) -> Result<Self> {
        let pi0 = stationary_distribution(&trans)?;
        Self::new(pi0, trans, emissions)
    }

    pub fn num_states(&self) -> usize {
        self.pi0.len()
    }

    pub fn dim(&self) -> usize {
        self.emissions[0].mean.len()
    }

    pub fn pi0(&self) -> &[f64] {
        &self.pi0
    }

    pub fn trans(&self) -> &DMatrix<f64> {
        &self.trans
    }

    pub fn emissions(&self) -> &[GaussianEmission] {
        &self.emissions
    }

    pub fn means(&self) -> Vec<DVector<f64>> {
        self.emissions.iter().map(|e| e.mean.clone()).collect()
    }

    /// Canonical text form used for checksums; every float is printed with
    /// its shortest round-trip representation.
    pub fn canonical_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "K={} p={}", self.num_states(), self.dim());
        let _ = writeln!(s, "pi0={:?}", self.pi0);
        for j in 0..self.num_states() {
            let row: Vec<f64> = self.trans.row(j).iter().copied().collect();
            let _ = writeln!(s, "A[{j}]={row:?}");
        }
        for (k, e) in self.emissions.iter().enumerate() {
            let _ = writeln!(s, "mu[{k}]={:?}", e.mean.as_slice());
            let cov: Vec<f64> = e.cov.iter().copied().collect();
            let _ = writeln!(s, "Sigma[{k}]={cov:?}");
        }
        s
    }
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidParameter(format!("{what} has negative or non-finite entries")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidParameter(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Normal-inverse-Wishart hyperparameters in standard form.
#[derive(Debug, Clone, PartialEq)]
pub struct NiwParams {
    pub mu0: DVector<f64>,
    pub kappa0: f64,
    pub sigma0: DMatrix<f64>,
    pub nu0: f64,
}

impl NiwParams {
    pub fn new(mu0: DVector<f64>, kappa0: f64, sigma0: DMatrix<f64>, nu0: f64) -> Result<Self> {
        let params = Self { mu0, kappa0, sigma0, nu0 };
        params.validate()?;
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.dim();
        if p == 0 || self.sigma0.nrows() != p || self.sigma0.ncols() != p {
            return Err(Error::DimensionMismatch("NIW mean and scale disagree".into()));
        }
        if !(self.kappa0 > 0.0) || !self.kappa0.is_finite() {
            return Err(Error::InvalidParameter(format!("kappa0 = {} must be positive", self.kappa0)));
        }
        if !(self.nu0 > p as f64 + 2.0) || !self.nu0.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "nu0 = {} must exceed p + 2 = {}",
                self.nu0,
                p + 2
            )));
        }
        if asymmetry(&self.sigma0) > SYMMETRY_TOL {
            return Err(Error::NotPositiveDefinite("NIW scale matrix is not symmetric".into()));
        }
        cholesky(&self.sigma0, "NIW scale matrix")?;
        Ok(())
    }

    /// Posterior mean of Σ, Σ0 / (ν0 − p − 1).
    pub fn mean_covariance(&self) -> DMatrix<f64> {
        &self.sigma0 / (self.nu0 - self.dim() as f64 - 1.0)
    }
}

/// NIW natural parameters (u1, u2, u3, u4).
#[derive(Debug, Clone, PartialEq)]
pub struct NiwNat {
    pub u1: DVector<f64>,
    pub u2: f64,
    pub u3: DMatrix<f64>,
    pub u4: f64,
}

impl NiwNat {
    pub fn dim(&self) -> usize {
        self.u1.len()
    }

    /// Checks u2 > 0, u4 > 2p + 4 and that u3 − u1 u1ᵀ / u2 is SPD.
    pub fn validate(&self) -> Result<()> {
        niw_from_natural(self).map(|_| ())
    }

    /// (1 − ρ)·self + ρ·target.
    pub fn lerp(&self, target: &NiwNat, rho: f64) -> NiwNat {
        NiwNat {
            u1: &self.u1 * (1.0 - rho) + &target.u1 * rho,
            u2: self.u2 * (1.0 - rho) + target.u2 * rho,
            u3: &self.u3 * (1.0 - rho) + &target.u3 * rho,
            u4: self.u4 * (1.0 - rho) + target.u4 * rho,
        }
    }
}

pub fn niw_to_natural(std: &NiwParams) -> NiwNat {
    let p = std.dim() as f64;
    NiwNat {
        u1: &std.mu0 * std.kappa0,
        u2: std.kappa0,
        u3: &std.sigma0 + (&std.mu0 * std.mu0.transpose()) * std.kappa0,
        u4: std.nu0 + 2.0 + p,
    }
}

pub fn niw_from_natural(nat: &NiwNat) -> Result<NiwParams> {
    let p = nat.dim();
    if nat.u3.nrows() != p || nat.u3.ncols() != p {
        return Err(Error::DimensionMismatch("NIW natural parameter shapes disagree".into()));
    }
    if !(nat.u2 > 0.0) || !nat.u2.is_finite() {
        return Err(Error::InvalidParameter(format!("u2 = {} must be positive", nat.u2)));
    }
    let mu0 = &nat.u1 / nat.u2;
    let sigma0 = &nat.u3 - (&nat.u1 * nat.u1.transpose()) / nat.u2;
    NiwParams::new(mu0, nat.u2, sigma0, nat.u4 - 2.0 - p as f64)
}

/// Dirichlet natural parameters u = α − 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletNat {
    pub u: Vec<f64>,
}

impl DirichletNat {
    pub fn from_concentration(alpha: &[f64]) -> Result<Self> {
        let nat = Self { u: alpha.iter().map(|a| a - 1.0).collect() };
        nat.validate()?;
        Ok(nat)
    }

    pub fn validate(&self) -> Result<()> {
        if self.u.is_empty() {
            return Err(Error::InvalidParameter("empty Dirichlet parameter".into()));
        }
        if let Some(bad) = self.u.iter().find(|v| !(**v > -1.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "Dirichlet natural parameter {bad} must exceed -1"
            )));
        }
        Ok(())
    }

    pub fn concentration(&self) -> Vec<f64> {
        self.u.iter().map(|v| v + 1.0).collect()
    }

    /// E[A_row] = α / Σα.
    pub fn mean(&self) -> Vec<f64> {
        let alpha = self.concentration();
        let total: f64 = alpha.iter().sum();
        alpha.iter().map(|a| a / total).collect()
    }

    pub fn lerp(&self, target: &DirichletNat, rho: f64) -> DirichletNat {
        DirichletNat {
            u: self
                .u
                .iter()
                .zip(&target.u)
                .map(|(a, b)| a * (1.0 - rho) + b * rho)
                .collect(),
        }
    }
}

/// Prior hyperparameters u = (u^A, u^φ); every transition row and every
/// emission share the same prior.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub dirichlet: DirichletNat,
    pub niw: NiwNat,
}

impl Prior {
    pub fn new(dirichlet: DirichletNat, niw: NiwNat) -> Result<Self> {
        dirichlet.validate()?;
        niw.validate()?;
        Ok(Self { dirichlet, niw })
    }

    pub fn num_states(&self) -> usize {
        self.dirichlet.u.len()
    }

    pub fn dim(&self) -> usize {
        self.niw.dim()
    }
}

/// Variational state w = (w^A, w^φ) together with the prior u.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalVariational {
    pub trans: Vec<DirichletNat>,
    pub emit: Vec<NiwNat>,
    pub prior: Prior,
}

impl GlobalVariational {
    /// The prior itself as a variational state (w = u).
    pub fn from_prior(prior: &Prior) -> Self {
        let k = prior.num_states();
        Self {
            trans: vec![prior.dirichlet.clone(); k],
            emit: vec![prior.niw.clone(); k],
            prior: prior.clone(),
        }
    }

    pub fn num_states(&self) -> usize {
        self.trans.len()
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_states();
        if self.emit.len() != k || self.prior.num_states() != k {
            return Err(Error::DimensionMismatch(format!(
                "{k} transition rows, {} emissions, prior over {} states",
                self.emit.len(),
                self.prior.num_states()
            )));
        }
        for (j, row) in self.trans.iter().enumerate() {
            if row.u.len() != k {
                return Err(Error::DimensionMismatch(format!("transition row {j} has wrong length")));
            }
            row.validate()?;
        }
        for (j, e) in self.emit.iter().enumerate() {
            if e.dim() != self.dim() {
                return Err(Error::DimensionMismatch(format!("emission {j} has wrong dimension")));
            }
            e.validate()
                .map_err(|err| Error::NotPositiveDefinite(format!("emission {j}: {err}")))?;
        }
        self.prior.dirichlet.validate()?;
        self.prior.niw.validate()
    }

    /// E_q[A] with rows (w_j + 1) / Σ(w_j + 1).
    pub fn expected_transition_matrix(&self) -> DMatrix<f64> {
        let k = self.num_states();
        let mut a = DMatrix::zeros(k, k);
        for (j, row) in self.trans.iter().enumerate() {
            for (l, v) in row.mean().into_iter().enumerate() {
                a[(j, l)] = v;
            }
        }
        a
    }

    /// Standard-form NIW for every state.
    pub fn emission_params(&self) -> Result<Vec<NiwParams>> {
        self.emit.iter().map(niw_from_natural).collect()
    }

    /// Flattened natural parameters: every transition row, then for every
    /// state (u1, u2, u3 column-major, u4).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for row in &self.trans {
            out.extend_from_slice(&row.u);
        }
        for e in &self.emit {
            out.extend(e.u1.iter());
            out.push(e.u2);
            out.extend(e.u3.iter());
            out.push(e.u4);
        }
        out
    }

    /// Inverse of [`GlobalVariational::to_flat`], reusing `self` for shapes
    /// and prior. The result is not validated.
    pub fn with_flat(&self, flat: &[f64]) -> Result<GlobalVariational> {
        let expected = self.to_flat().len();
        if flat.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "expected {expected} natural parameters, got {}",
                flat.len()
            )));
        }
        let k = self.num_states();
        let p = self.dim();
        let mut it = flat.iter().copied();
        let mut next = |n: usize| -> Vec<f64> { (&mut it).take(n).collect() };
        let trans = (0..k).map(|_| DirichletNat { u: next(k) }).collect();
        let emit = (0..k)
            .map(|_| NiwNat {
                u1: DVector::from_vec(next(p)),
                u2: next(1)[0],
                u3: DMatrix::from_vec(p, p, next(p * p)),
                u4: next(1)[0],
            })
            .collect();
        Ok(GlobalVariational { trans, emit, prior: self.prior.clone() })
    }

    /// (1 − ρ)·self + ρ·target, keeping the prior of `self`.
    pub fn lerp(&self, target: &GlobalVariational, rho: f64) -> GlobalVariational {
        GlobalVariational {
            trans: self.trans.iter().zip(&target.trans).map(|(a, b)| a.lerp(b, rho)).collect(),
            emit: self.emit.iter().zip(&target.emit).map(|(a, b)| a.lerp(b, rho)).collect(),
            prior: self.prior.clone(),
        }
    }

    /// Relabels states: state `perm[i]` of the result is state `i` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> GlobalVariational {
        let k = self.num_states();
        let mut trans = vec![DirichletNat { u: vec![0.0; k] }; k];
        let mut emit = self.emit.clone();
        for i in 0..k {
            let mut row = vec![0.0; k];
            for j in 0..k {
                row[perm[j]] = self.trans[i].u[j];
            }
            trans[perm[i]] = DirichletNat { u: row };
            emit[perm[i]] = self.emit[i].clone();
        }
        GlobalVariational { trans, emit, prior: self.prior.clone() }
    }
}

/// Stationary distribution πᵀA = πᵀ of a row-stochastic matrix.
///
/// Power iteration from the uniform vector, accelerated by repeated squaring:
/// iterate k evaluates uᵀA^(2^k). Stops once successive iterates differ by
/// less than 1e-12 in L1 and the residual ‖πᵀA − πᵀ‖∞ is at most 1e-10.
pub fn stationary_distribution(trans: &DMatrix<f64>) -> Result<Vec<f64>> {
    let k = trans.nrows();
    if k == 0 || trans.ncols() != k {
        return Err(Error::DimensionMismatch(format!(
            "transition matrix is {}x{}",
            trans.nrows(),
            trans.ncols()
        )));
    }
    if trans.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidParameter("transition matrix has negative entries".into()));
    }
    let mut power = trans.clone();
    normalize_rows(&mut power);
    let uniform = vec![1.0 / k as f64; k];
    let mut pi = uniform.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_SQUARINGS {
        let mut next = vec_mat(&uniform, &power);
        normalize(&mut next);
        let step: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        residual = stationary_residual(&pi, trans);
        if step < STATIONARY_STEP_TOL && residual <= STATIONARY_RESIDUAL_TOL {
            return Ok(pi);
        }
        power = &power * &power;
        normalize_rows(&mut power);
    }
    Err(Error::NoConvergence { iterations: MAX_SQUARINGS, residual })
}

/// ‖πᵀA − πᵀ‖∞.
pub fn stationary_residual(pi: &[f64], trans: &DMatrix<f64>) -> f64 {
    vec_mat(pi, trans)
        .iter()
        .zip(pi)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn vec_mat(v: &[f64], m: &DMatrix<f64>) -> Vec<f64> {
    let k = m.ncols();
    (0..k).map(|c| v.iter().enumerate().map(|(r, x)| x * m[(r, c)]).sum()).collect()
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

fn normalize_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row /= s;
        }
    }
}

/// Draws a state index from a probability vector.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Samples a state path and observations from the HMM.
///
/// Randomness comes from `ChaCha8Rng::seed_from_u64(seed)`, so output is
/// reproducible across platforms. Gaussian draws are μ + L z with L the
/// Cholesky factor of Σ and z standard normal.
pub fn sample_hmm(params: &HmmParams, len: usize, seed: u64) -> Result<(Vec<usize>, Observations)> {
    if len == 0 {
        return Err(Error::InvalidParameter("sequence length must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = params.dim();
    let k = params.num_states();
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|j| params.trans.row(j).iter().copied().collect())
        .collect();
    let mut states = Vec::with_capacity(len);
    let mut values = Vec::with_capacity(len * p);
    let mut z = vec![0.0; p];
    let mut state = sample_categorical(&mut rng, &params.pi0);
    for t in 0..len {
        if t > 0 {
            state = sample_categorical(&mut rng, &rows[state]);
        }
        states.push(state);
        let e = &params.emissions[state];
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for i in 0..p {
            let mut v = e.mean[i];
            for (j, zj) in z.iter().enumerate().take(i + 1) {
                v += e.chol_lower[(i, j)] * zj;
            }
            values.push(v);
        }
    }
    Ok((states, Observations::new(values, p)?))
}

/// Draws (μ, Σ) from a normal-inverse-Wishart via the Bartlett decomposition
/// of the precision Σ⁻¹ ~ Wishart(Σ0⁻¹, ν0).
pub fn sample_niw<R: Rng + ?Sized>(params: &NiwParams, rng: &mut R) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = params.dim();
    let scale_inv = cholesky(&params.sigma0, "NIW scale")?.inverse();
    let l = cholesky(&scale_inv, "inverse NIW scale")?.l();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let dof = params.nu0 - i as f64;
        let chi: f64 = rng.sample(rand_distr::ChiSquared::new(dof).map_err(|e| Error::InvalidParameter(e.to_string()))?);
        a[(i, i)] = chi.sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = &l * a;
    let precision = &la * la.transpose();
    let mut sigma = cholesky(&precision, "sampled precision")?.inverse();
    crate::linalg::symmetrize(&mut sigma);
    let chol = cholesky(&(&sigma / params.kappa0), "sampled mean covariance")?.l();
    let z = DVector::from_fn(p, |_, _| rng.sample(StandardNormal));
    Ok((&params.mu0 + chol * z, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    fn niw1(mu: f64, kappa: f64, sigma: f64, nu: f64) -> NiwParams {
        NiwParams::new(DVector::from_element(1, mu), kappa, DMatrix::from_element(1, 1, sigma), nu).unwrap()
    }

    #[test]
    fn niw_natural_examples() {
        let nat = niw_to_natural(&niw1(0.0, 1.0, 1.0, 4.0));
        assert_eq!((nat.u1[0], nat.u2, nat.u3[(0, 0)], nat.u4), (0.0, 1.0, 1.0, 7.0));
        let nat = niw_to_natural(&niw1(2.0, 3.0, 5.0, 4.0));
        assert_eq!((nat.u1[0], nat.u2, nat.u3[(0, 0)], nat.u4), (6.0, 3.0, 17.0, 7.0));

        let back = niw_from_natural(&nat).unwrap();
        assert_abs_diff_eq!(back.mu0[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(back.kappa0, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(back.sigma0[(0, 0)], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(back.nu0, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn niw_rejects_invalid() {
        assert!(NiwParams::new(DVector::zeros(1), 0.0, DMatrix::identity(1, 1), 4.0).is_err());
        assert!(NiwParams::new(DVector::zeros(1), 1.0, DMatrix::from_element(1, 1, -1.0), 4.0).is_err());
        assert!(NiwParams::new(DVector::zeros(2), 1.0, DMatrix::identity(2, 2), 4.0).is_err());
        let bad = NiwNat { u1: DVector::zeros(1), u2: -1.0, u3: DMatrix::identity(1, 1), u4: 7.0 };
        assert!(niw_from_natural(&bad).is_err());
        // u3 − u1²/u2 = 1 − 4 < 0
        let bad = NiwNat { u1: DVector::from_element(1, 2.0), u2: 1.0, u3: DMatrix::identity(1, 1), u4: 7.0 };
        assert!(matches!(niw_from_natural(&bad), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn stationary_examples() {
        let pi = stationary_distribution(&dmatrix![0.5, 0.5; 0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(pi[0], 0.5, epsilon = 1e-12);
        let a = dmatrix![0.9, 0.1; 0.5, 0.5];
        let pi = stationary_distribution(&a).unwrap();
        assert_abs_diff_eq!(pi[0], 5.0 / 6.0, epsilon = 1e-10);
        assert_abs_diff_eq!(pi[1], 1.0 / 6.0, epsilon = 1e-10);
        assert!(stationary_residual(&pi, &a) <= 1e-10);
    }

    #[test]
    fn stationary_slow_mixing_chain() {
        // Nearly reducible: plain power iteration would need ~1e5 steps.
        let k = 8;
        let mut a = DMatrix::zeros(k, k);
        for j in 0..k {
            a[(j, j)] = 0.9995 - 1e-4 * j as f64;
            a[(j, (j + 1) % k)] = 1.0 - a[(j, j)];
        }
        let pi = stationary_distribution(&a).unwrap();
        assert!(stationary_residual(&pi, &a) <= 1e-10);
        assert_abs_diff_eq!(pi.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn stationary_periodic_and_zero_column() {
        let pi = stationary_distribution(&dmatrix![0.0, 1.0; 1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(pi[0], 0.5, epsilon = 1e-12);
        let pi = stationary_distribution(&dmatrix![0.0, 1.0; 0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(pi[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn hmm_params_validation() {
        let e = GaussianEmission::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        assert!(HmmParams::new(vec![0.5, 0.5], dmatrix![0.5, 0.6; 0.5, 0.5], vec![e.clone(), e.clone()]).is_err());
        assert!(HmmParams::new(vec![0.6, 0.5], dmatrix![0.5, 0.5; 0.5, 0.5], vec![e.clone(), e.clone()]).is_err());
        assert!(GaussianEmission::new(DVector::zeros(2), dmatrix![1.0, 0.5; 0.4, 1.0]).is_err());
        assert!(HmmParams::new(vec![0.5, 0.5], dmatrix![0.5, 0.5; 0.5, 0.5], vec![e.clone(), e]).is_ok());
    }

    #[test]
    fn absorbing_chain_stays_put() {
        let e = GaussianEmission::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let params = HmmParams::new(vec![1.0, 0.0], DMatrix::identity(2, 2), vec![e.clone(), e]).unwrap();
        let (states, _) = sample_hmm(&params, 500, 3).unwrap();
        assert!(states.iter().all(|&s| s == 0));
    }

    #[test]
    fn degenerate_emission_returns_means() {
        let tiny = DMatrix::identity(2, 2) * 1e-12;
        let e0 = GaussianEmission::new(DVector::from_vec(vec![1.0, -2.0]), tiny.clone()).unwrap();
        let e1 = GaussianEmission::new(DVector::from_vec(vec![5.0, 3.0]), tiny).unwrap();
        let params = HmmParams::stationary(dmatrix![0.7, 0.3; 0.2, 0.8], vec![e0, e1]).unwrap();
        let (states, obs) = sample_hmm(&params, 1000, 11).unwrap();
        for (t, &s) in states.iter().enumerate() {
            let mean = params.emissions()[s].mean();
            for d in 0..2 {
                assert!((obs.row(t)[d] - mean[d]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let e = GaussianEmission::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let params = HmmParams::stationary(dmatrix![0.7, 0.3; 0.2, 0.8], vec![e.clone(), e]).unwrap();
        let a = sample_hmm(&params, 300, 5).unwrap();
        let b = sample_hmm(&params, 300, 5).unwrap();
        assert_eq!(a.0, b.0);
        assert!(a.1.values().iter().zip(b.1.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = sample_hmm(&params, 300, 6).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn flat_round_trip_and_permutation() {
        let niw = niw_to_natural(&NiwParams::new(DVector::from_vec(vec![1.0, 2.0]), 2.0, DMatrix::identity(2, 2), 5.0).unwrap());
        let prior = Prior::new(DirichletNat { u: vec![0.0; 3] }, niw).unwrap();
        let mut w = GlobalVariational::from_prior(&prior);
        w.trans[0].u = vec![1.0, 2.0, 3.0];
        w.emit[2].u2 = 7.0;
        let back = w.with_flat(&w.to_flat()).unwrap();
        assert_eq!(back, w);
        let perm = [2, 0, 1];
        let pw = w.permuted(&perm);
        // old state 0 is new state 2; its self-transition moves to (2, 2)
        assert_eq!(pw.trans[2].u, vec![2.0, 3.0, 1.0]);
        assert_eq!(pw.emit[1].u2, 7.0);
    }

    proptest::proptest! {
        #[test]
        fn niw_round_trip(mu in proptest::collection::vec(-50.0..50.0f64, 2),
                          kappa in 0.01..100.0f64,
                          a in 0.1..10.0f64, b in -0.9..0.9f64, c in 0.1..10.0f64,
                          extra in 0.01..50.0f64) {
            let off = b * (a * c).sqrt();
            let sigma = nalgebra::dmatrix![a, off; off, c];
            let std = NiwParams::new(DVector::from_vec(mu), kappa, sigma, 4.0 + extra).unwrap();
            let back = niw_from_natural(&niw_to_natural(&std)).unwrap();
            let scale = 1.0 + std.mu0.amax().powi(2) * kappa;
            proptest::prop_assert!((back.kappa0 - std.kappa0).abs() <= 1e-12 * kappa.max(1.0));
            proptest::prop_assert!((back.nu0 - std.nu0).abs() <= 1e-12 * std.nu0);
            proptest::prop_assert!((&back.mu0 - &std.mu0).amax() <= 1e-12 * (1.0 + std.mu0.amax()));
            proptest::prop_assert!((&back.sigma0 - &std.sigma0).amax() <= 1e-12 * scale);
        }

        #[test]
        fn dirichlet_mean_on_simplex(u in proptest::collection::vec(-0.999..1e4f64, 1..10)) {
            let m = DirichletNat { u }.mean();
            proptest::prop_assert!(m.iter().all(|v| *v >= 0.0));
            proptest::prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn stationary_residual_small(rows in proptest::collection::vec(proptest::collection::vec(0.01..1.0f64, 4), 4)) {
            let mut a = DMatrix::zeros(4, 4);
            for (j, r) in rows.iter().enumerate() {
                let s: f64 = r.iter().sum();
                for (l, v) in r.iter().enumerate() { a[(j, l)] = v / s; }
            }
            let pi = stationary_distribution(&a).unwrap();
            proptest::prop_assert!(stationary_residual(&pi, &a) <= 1e-10);
        }
    }
}
