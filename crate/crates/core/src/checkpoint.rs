//! Model checkpoints.
//!
//! A checkpoint is a JSON document:
//!
//! ```text
//! {
//!   "format": "svihmm-checkpoint",
//!   "version": 1,
//!   "k": K, "p": p,
//!   "prior": { "dirichlet": [u_1 .. u_K], "niw": NIW },
//!   "transitions": [[w_j1 .. w_jK] for each row j],
//!   "emissions": [NIW for each state]
//! }
//! ```
//!
//! where an NIW block is `{"u1": [..p], "u2": x, "u3": [[..p] ..p rows], "u4": x}`
//! in natural parameters. Numbers are written in shortest round-trip decimal
//! form, so reading a checkpoint reproduces the state bit for bit.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DirichletNat, GlobalVariational, NiwNat, Prior};

pub const FORMAT: &str = "svihmm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NiwBlock {
    u1: Vec<f64>,
    u2: f64,
    u3: Vec<Vec<f64>>,
    u4: f64,
}

#[derive(Serialize, Deserialize)]
struct PriorBlock {
    dirichlet: Vec<f64>,
    niw: NiwBlock,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    k: usize,
    p: usize,
    prior: PriorBlock,
    transitions: Vec<Vec<f64>>,
    emissions: Vec<NiwBlock>,
}

fn to_block(n: &NiwNat) -> NiwBlock {
    NiwBlock {
        u1: n.u1.iter().copied().collect(),
        u2: n.u2,
        u3: n.u3.row_iter().map(|r| r.iter().copied().collect()).collect(),
        u4: n.u4,
    }
}

fn from_block(b: &NiwBlock, p: usize) -> Result<NiwNat> {
    if b.u1.len() != p || b.u3.len() != p || b.u3.iter().any(|r| r.len() != p) {
        return Err(Error::DimensionMismatch(format!("NIW block does not have dimension {p}")));
    }
    Ok(NiwNat {
        u1: DVector::from_vec(b.u1.clone()),
        u2: b.u2,
        u3: DMatrix::from_fn(p, p, |i, j| b.u3[i][j]),
        u4: b.u4,
    })
}

pub fn to_json(w: &GlobalVariational) -> Result<String> {
    let doc = Document {
        format: FORMAT.into(),
        version: VERSION,
        k: w.num_states(),
        p: w.dim(),
        prior: PriorBlock { dirichlet: w.prior.dirichlet.u.clone(), niw: to_block(&w.prior.niw) },
        transitions: w.trans.iter().map(|r| r.u.clone()).collect(),
        emissions: w.emit.iter().map(to_block).collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn from_json(text: &str) -> Result<GlobalVariational> {
    let doc: Document = serde_json::from_str(text)?;
    if doc.format != FORMAT {
        return Err(Error::Format(format!("expected format {FORMAT:?}, found {:?}", doc.format)));
    }
    if doc.version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", doc.version)));
    }
    let (k, p) = (doc.k, doc.p);
    if doc.transitions.len() != k || doc.emissions.len() != k || doc.prior.dirichlet.len() != k {
        return Err(Error::DimensionMismatch(format!("checkpoint declares K = {k} but blocks disagree")));
    }
    if doc.transitions.iter().any(|r| r.len() != k) {
        return Err(Error::DimensionMismatch("transition rows must have K entries".into()));
    }
    let prior = Prior::new(DirichletNat { u: doc.prior.dirichlet }, from_block(&doc.prior.niw, p)?)?;
    let w = GlobalVariational {
        trans: doc.transitions.into_iter().map(|u| DirichletNat { u }).collect(),
        emit: doc.emissions.iter().map(|b| from_block(b, p)).collect::<Result<_>>()?,
        prior,
    };
    w.validate()?;
    Ok(w)
}

pub fn save(w: &GlobalVariational, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(w)? + "\n")?;
    Ok(())
}

pub fn load(path: &Path) -> Result<GlobalVariational> {
    from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::{default_prior, initialize};
    use crate::model::Observations;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state() -> GlobalVariational {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = Observations::new((0..300).map(|_| rng.random::<f64>() * 7.0 - 1.0 / 3.0).collect(), 3).unwrap();
        let prior = default_prior(&obs, 4).unwrap();
        initialize(&obs, &prior, 8).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let w = state();
        let back = from_json(&to_json(&w).unwrap()).unwrap();
        let a: Vec<u64> = w.to_flat().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.to_flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.prior, w.prior);
    }

    #[test]
    fn rejects_wrong_version_and_format() {
        let text = to_json(&state()).unwrap();
        let bumped = text.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(from_json(&bumped), Err(Error::Format(_))));
        let renamed = text.replace(FORMAT, "other");
        assert!(matches!(from_json(&renamed), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_invalid_state() {
        let mut w = state();
        w.emit[0].u2 = -1.0;
        let text = to_json(&w).unwrap();
        assert!(from_json(&text).is_err());
    }
}
