//! The diagonally dominant (DD) and reversed cycles (RC) benchmark models.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{GaussianEmission, HmmParams};

const DD_MEANS: [[f64; 2]; 8] = [
    [0.0, 20.0],
    [20.0, 0.0],
    [-90.0, -30.0],
    [30.0, -30.0],
    [-20.0, 0.0],
    [0.0, -20.0],
    [30.0, 30.0],
    [-30.0, 30.0],
];

const RC_MEANS: [[f64; 2]; 8] = [
    [-50.0, 0.0],
    [30.0, -30.0],
    [30.0, 30.0],
    [-100.0, -10.0],
    [40.0, -40.0],
    [-65.0, 0.0],
    [40.0, 40.0],
    [100.0, 10.0],
];

/// Row j of the RC transition matrix, as (column, probability) pairs, 0-based.
///
/// The published matrix prints 9 in row 2, column 1, which makes that row
/// sum to 10; it is read as 0 so that state 2 continues the 1 → 2 → 3 cycle.
const RC_ROWS: [&[(usize, f64)]; 8] = [
    &[(0, 0.01), (1, 0.99)],
    &[(1, 0.01), (2, 0.99)],
    &[(0, 0.85), (3, 0.15)],
    &[(4, 1.0)],
    &[(4, 0.01), (5, 0.99)],
    &[(5, 0.01), (6, 0.99)],
    &[(4, 0.85), (7, 0.15)],
    &[(0, 1.0)],
];

fn emissions(means: &[[f64; 2]; 8], var: f64) -> Result<Vec<GaussianEmission>> {
    means
        .iter()
        .map(|m| GaussianEmission::new(DVector::from_row_slice(m), DMatrix::identity(2, 2) * var))
        .collect()
}

/// K = 8 circulant chain with 0.999 self-transitions and 0.001 to the next
/// state (8 wraps to 1), unit-covariance emissions, uniform start.
pub fn make_dd_params() -> HmmParams {
    let mut a = DMatrix::zeros(8, 8);
    for j in 0..8 {
        a[(j, j)] = 0.999;
        a[(j, (j + 1) % 8)] = 0.001;
    }
    HmmParams::stationary(a, emissions(&DD_MEANS, 1.0).expect("fixed emissions are valid"))
        .expect("fixed DD parameters are valid")
}

/// Two 3-state cycles joined by bridge states 4 and 8, emissions with
/// covariance 20·I, started at stationarity.
pub fn make_rc_params() -> HmmParams {
    log::info!("RC transition matrix: printed entry (2, 1) = 9 read as 0");
    let mut a = DMatrix::zeros(8, 8);
    for (j, row) in RC_ROWS.iter().enumerate() {
        for &(c, p) in row.iter() {
            a[(j, c)] = p;
        }
    }
    HmmParams::stationary(a, emissions(&RC_MEANS, 20.0).expect("fixed emissions are valid"))
        .expect("fixed RC parameters are valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    Dd,
    Rc,
}

impl Generator {
    pub fn params(self) -> HmmParams {
        match self {
            Generator::Dd => make_dd_params(),
            Generator::Rc => make_rc_params(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Generator::Dd => "dd",
            Generator::Rc => "rc",
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dd" => Ok(Generator::Dd),
            "rc" => Ok(Generator::Rc),
            other => Err(Error::InvalidParameter(format!("unknown generator {other:?} (expected dd or rc)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_hmm;

    #[test]
    fn dd_entries() {
        let dd = make_dd_params();
        let a = dd.trans();
        assert_eq!(a[(0, 0)], 0.999);
        assert_eq!(a[(0, 1)], 0.001);
        assert!((2..8).all(|c| a[(0, c)] == 0.0));
        assert_eq!(a[(7, 0)], 0.001);
        assert_eq!(dd.means()[2].as_slice(), &[-90.0, -30.0]);
        for j in 0..8 {
            assert_eq!(a.row(j).sum(), 1.0);
        }
        assert!(dd.pi0().iter().all(|p| (p - 0.125).abs() < 1e-12));
    }

    #[test]
    fn rc_entries() {
        let rc = make_rc_params();
        let a = rc.trans();
        assert_eq!(a[(3, 4)], 1.0);
        assert_eq!(a[(1, 0)], 0.0);
        assert_eq!(rc.means()[7].as_slice(), &[100.0, 10.0]);
        assert_eq!(rc.emissions()[7].cov(), &(DMatrix::identity(2, 2) * 20.0));
        for j in 0..8 {
            assert_eq!(a.row(j).sum(), 1.0, "row {j}");
        }
    }

    #[test]
    fn dd_transition_frequencies() {
        let dd = make_dd_params();
        let (states, _) = sample_hmm(&dd, 100_000, 17).unwrap();
        let mut counts = DMatrix::<f64>::zeros(8, 8);
        for w in states.windows(2) {
            counts[(w[0], w[1])] += 1.0;
        }
        for j in 0..8 {
            let n = counts.row(j).sum();
            for c in 0..8 {
                let p = dd.trans()[(j, c)];
                let se = (p * (1.0 - p) / n).sqrt();
                let freq = counts[(j, c)] / n;
                assert!((freq - p).abs() <= 3.0 * se + 1e-12, "A[{j}][{c}]: {freq} vs {p} (se {se})");
            }
        }
    }

    #[test]
    fn rc_stays_within_cycles() {
        let (states, _) = sample_hmm(&make_rc_params(), 100_000, 3).unwrap();
        let n = states.len() as f64;
        let first = states.iter().filter(|s| **s <= 2).count() as f64 / n;
        let second = states.iter().filter(|s| (4..=6).contains(*s)).count() as f64 / n;
        assert!(first > 0.4 && second > 0.4, "{first} {second}");
    }

    #[test]
    fn parses_names() {
        assert_eq!("DD".parse::<Generator>().unwrap(), Generator::Dd);
        assert_eq!("rc".parse::<Generator>().unwrap().to_string(), "rc");
        assert!("xx".parse::<Generator>().is_err());
    }
}
