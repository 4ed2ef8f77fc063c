//! Expected sufficient statistics under local beliefs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::message::Beliefs;
use crate::model::Observations;

/// Per-state expected emission statistics (Σ q y, Σ q, Σ q y yᵀ, Σ q).
///
/// The two count statistics are identical by definition and stored once.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionStats {
    pub s1: DVector<f64>,
    pub count: f64,
    pub s3: DMatrix<f64>,
}

impl EmissionStats {
    pub fn zeros(p: usize) -> Self {
        Self { s1: DVector::zeros(p), count: 0.0, s3: DMatrix::zeros(p, p) }
    }

    pub fn s2(&self) -> f64 {
        self.count
    }

    pub fn s4(&self) -> f64 {
        self.count
    }

    fn add_scaled(&mut self, other: &EmissionStats, c: f64) {
        self.s1 += &other.s1 * c;
        self.count += other.count * c;
        self.s3 += &other.s3 * c;
    }
}

/// Expected transition counts (K×K) and emission statistics for a chain or
/// subchain.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedStats {
    pub trans: DMatrix<f64>,
    pub emit: Vec<EmissionStats>,
}

impl ExpectedStats {
    pub fn zeros(k: usize, p: usize) -> Self {
        Self { trans: DMatrix::zeros(k, k), emit: vec![EmissionStats::zeros(p); k] }
    }

    pub fn num_states(&self) -> usize {
        self.emit.len()
    }

    pub fn dim(&self) -> usize {
        self.emit.first().map(|e| e.s1.len()).unwrap_or(0)
    }

    /// `self += c_trans · other.trans`, `self += c_emit · other.emit`.
    pub fn add_scaled(&mut self, other: &ExpectedStats, c_trans: f64, c_emit: f64) {
        self.trans += &other.trans * c_trans;
        for (a, b) in self.emit.iter_mut().zip(&other.emit) {
            a.add_scaled(b, c_emit);
        }
    }

    pub fn scaled(&self, c_trans: f64, c_emit: f64) -> ExpectedStats {
        let mut out = ExpectedStats::zeros(self.num_states(), self.dim());
        out.add_scaled(self, c_trans, c_emit);
        out
    }

    pub fn transition_mass(&self) -> f64 {
        self.trans.sum()
    }

    pub fn emission_mass(&self) -> f64 {
        self.emit.iter().map(|e| e.count).sum()
    }
}

/// Transition counts with a flag that is false when the chain had fewer than
/// two positions (no transition observable).
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionCounts {
    pub counts: DMatrix<f64>,
    pub observable: bool,
}

pub fn expected_transition_stats(beliefs: &Beliefs) -> TransitionCounts {
    let k = beliefs.num_states();
    let mut counts = DMatrix::zeros(k, k);
    for t in 0..beliefs.len().saturating_sub(1) {
        let pair = beliefs.pair(t);
        for j in 0..k {
            for c in 0..k {
                counts[(j, c)] += pair[j * k + c];
            }
        }
    }
    TransitionCounts { counts, observable: beliefs.len() >= 2 }
}

pub fn expected_emission_stats(beliefs: &Beliefs, y: &Observations) -> Result<Vec<EmissionStats>> {
    if y.len() != beliefs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} observations for beliefs over {} positions",
            y.len(),
            beliefs.len()
        )));
    }
    let mut acc = StatsAccumulator::new(beliefs.num_states(), y.dim());
    for t in 0..beliefs.len() {
        acc.add_marginal(beliefs.marginal(t), y.row(t));
    }
    Ok(acc.finish().emit)
}

/// Statistics of beliefs over `obs[offset .. offset + beliefs.len()]`.
pub fn expected_stats(beliefs: &Beliefs, obs: &Observations, offset: usize) -> Result<ExpectedStats> {
    if offset + beliefs.len() > obs.len() {
        return Err(Error::DimensionMismatch(format!(
            "beliefs over {}..{} exceed a sequence of length {}",
            offset,
            offset + beliefs.len(),
            obs.len()
        )));
    }
    let mut acc = StatsAccumulator::new(beliefs.num_states(), obs.dim());
    for t in 0..beliefs.len() {
        acc.add_marginal(beliefs.marginal(t), obs.row(offset + t));
        if t + 1 < beliefs.len() {
            acc.add_pair(beliefs.pair(t));
        }
    }
    Ok(acc.finish())
}

/// Flat accumulator for the streaming passes.
pub(crate) struct StatsAccumulator {
    k: usize,
    p: usize,
    trans: Vec<f64>,
    s1: Vec<f64>,
    count: Vec<f64>,
    s3: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(k: usize, p: usize) -> Self {
        Self {
            k,
            p,
            trans: vec![0.0; k * k],
            s1: vec![0.0; k * p],
            count: vec![0.0; k],
            s3: vec![0.0; k * p * p],
        }
    }

    #[inline]
    pub fn add_marginal(&mut self, gamma: &[f64], y: &[f64]) {
        let p = self.p;
        for (s, &g) in gamma.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.count[s] += g;
            let s1 = &mut self.s1[s * p..(s + 1) * p];
            let s3 = &mut self.s3[s * p * p..(s + 1) * p * p];
            for i in 0..p {
                let gy = g * y[i];
                s1[i] += gy;
                for j in 0..p {
                    s3[i * p + j] += gy * y[j];
                }
            }
        }
    }

    #[inline]
    pub fn add_pair(&mut self, xi: &[f64]) {
        for (a, b) in self.trans.iter_mut().zip(xi) {
            *a += b;
        }
    }

    pub fn finish(self) -> ExpectedStats {
        let (k, p) = (self.k, self.p);
        let trans = DMatrix::from_row_slice(k, k, &self.trans);
        let emit = (0..k)
            .map(|s| {
                let mut s3 = DMatrix::from_row_slice(p, p, &self.s3[s * p * p..(s + 1) * p * p]);
                crate::linalg::symmetrize(&mut s3);
                EmissionStats {
                    s1: DVector::from_column_slice(&self.s1[s * p..(s + 1) * p]),
                    count: self.count[s],
                    s3,
                }
            })
            .collect();
        ExpectedStats { trans, emit }
    }
}
