//! Dataset files.
//!
//! Binary layout (any path not ending in `.csv`):
//!
//! * `<path>`: T·p IEEE-754 binary64 values, little-endian, row-major.
//! * `<path>.meta`: one `key: value` pair per line:
//!
//! ```text
//! format: svihmm-dataset
//! version: 1
//! encoding: f64-le-row-major
//! T: 10000
//! p: 2
//! generator: dd
//! seed: 1
//! params_checksum: <sha256 hex of the generating parameters, or none>
//! data_checksum: <sha256 hex of the payload bytes>
//! states: <file name of the state sidecar, or none>
//! ```
//!
//! * `<path>.states` (optional): T little-endian u32 state labels, 1-based.
//!
//! CSV layout (`.csv`): header `t,y1,…,yp` plus a trailing `x` column when
//! states are included; `t` and `x` are 1-based and values are written in
//! shortest round-trip form. The `.meta` sidecar is written with
//! `encoding: csv`; the data checksum is always taken over the binary64
//! little-endian encoding of the values, so it does not depend on the layout.
//! A CSV without a sidecar is accepted and described as `generator: external`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{sample_hmm, HmmParams, Observations};
use crate::synthetic::Generator;

pub const FORMAT: &str = "svihmm-dataset";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub len: usize,
    pub dim: usize,
    pub generator: String,
    pub seed: Option<u64>,
    pub params_checksum: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub obs: Observations,
    /// 0-based state labels in memory.
    pub states: Option<Vec<usize>>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn value_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// SHA-256 of the canonical text rendering of the parameters.
pub fn params_checksum(params: &HmmParams) -> String {
    sha256_hex(params.canonical_text().as_bytes())
}

pub fn data_checksum(obs: &Observations) -> String {
    sha256_hex(&value_bytes(obs.values()))
}

/// Samples T observations from a benchmark generator.
pub fn generate(generator: Generator, len: usize, seed: u64, include_states: bool) -> Result<Dataset> {
    if len < 2 {
        return Err(Error::InvalidParameter("datasets need T ≥ 2".into()));
    }
    let params = generator.params();
    let (states, obs) = sample_hmm(&params, len, seed)?;
    Ok(Dataset {
        meta: DatasetMeta {
            len,
            dim: obs.dim(),
            generator: generator.name().into(),
            seed: Some(seed),
            params_checksum: Some(params_checksum(&params)),
        },
        obs,
        states: include_states.then_some(states),
    })
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let (t, p) = (data.obs.len(), data.obs.dim());
    if data.meta.len != t || data.meta.dim != p {
        return Err(Error::DimensionMismatch(format!(
            "metadata declares {}x{} but the payload is {t}x{p}",
            data.meta.len, data.meta.dim
        )));
    }
    if let Some(s) = &data.states {
        if s.len() != t {
            return Err(Error::DimensionMismatch(format!("{} states for {t} observations", s.len())));
        }
    }
    let csv = is_csv(path);
    let states_path = sidecar(path, ".states");
    if csv {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=p).map(|i| format!("y{i}")));
        if data.states.is_some() {
            header.push("x".into());
        }
        w.write_record(&header)?;
        for i in 0..t {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend(data.obs.row(i).iter().map(|v| v.to_string()));
            if let Some(s) = &data.states {
                rec.push((s[i] + 1).to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    } else {
        fs::write(path, value_bytes(data.obs.values()))?;
        if let Some(s) = &data.states {
            let bytes: Vec<u8> = s.iter().flat_map(|x| (*x as u32 + 1).to_le_bytes()).collect();
            fs::write(&states_path, bytes)?;
        }
    }
    let states_entry = match (&data.states, csv) {
        (None, _) => "none".to_string(),
        (Some(_), true) => "column x".to_string(),
        (Some(_), false) => states_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let meta = format!(
        "format: {FORMAT}\nversion: {VERSION}\nencoding: {}\nT: {t}\np: {p}\ngenerator: {}\nseed: {}\nparams_checksum: {}\ndata_checksum: {}\nstates: {states_entry}\n",
        if csv { "csv" } else { "f64-le-row-major" },
        data.meta.generator,
        data.meta.seed.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
        data.meta.params_checksum.as_deref().unwrap_or("none"),
        data_checksum(&data.obs),
    );
    fs::write(sidecar(path, ".meta"), meta)?;
    Ok(())
}

fn parse_meta(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("metadata line {} is not key: value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn required<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key).map(String::as_str).ok_or_else(|| Error::Format(format!("metadata lacks {key:?}")))
}

fn parse_usize(meta: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    required(meta, key)?.parse().map_err(|_| Error::Format(format!("metadata {key:?} is not an integer")))
}

fn optional(meta: &BTreeMap<String, String>, key: &str) -> Option<String> {
    meta.get(key).filter(|v| v.as_str() != "none").cloned()
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let meta_path = sidecar(path, ".meta");
    let csv = is_csv(path);
    let meta = if meta_path.exists() {
        Some(parse_meta(&fs::read_to_string(&meta_path)?)?)
    } else if csv {
        None
    } else {
        return Err(Error::Format(format!("missing metadata sidecar {}", meta_path.display())));
    };
    if let Some(m) = &meta {
        if required(m, "format")? != FORMAT {
            return Err(Error::Format(format!("not a {FORMAT} file")));
        }
        if required(m, "version")? != VERSION.to_string() {
            return Err(Error::Format(format!("unsupported dataset version {}", required(m, "version")?)));
        }
    }

    let (obs, states) = if csv { read_csv(path, meta.as_ref())? } else { read_binary(path, meta.as_ref().unwrap())? };

    let Some(m) = meta else {
        return Ok(Dataset {
            meta: DatasetMeta { len: obs.len(), dim: obs.dim(), generator: "external".into(), seed: None, params_checksum: None },
            obs,
            states,
        });
    };
    let expected = required(&m, "data_checksum")?;
    let actual = data_checksum(&obs);
    if expected != actual {
        return Err(Error::Checksum { what: "data", expected: expected.into(), actual });
    }
    let seed = match optional(&m, "seed") {
        Some(s) => Some(s.parse().map_err(|_| Error::Format("metadata \"seed\" is not an integer".into()))?),
        None => None,
    };
    let params_checksum = optional(&m, "params_checksum");
    let generator = required(&m, "generator")?.to_string();
    if let (Ok(g), Some(sum)) = (generator.parse::<Generator>(), &params_checksum) {
        let actual = self::params_checksum(&g.params());
        if &actual != sum {
            return Err(Error::Checksum { what: "parameter", expected: sum.clone(), actual });
        }
    }
    Ok(Dataset { meta: DatasetMeta { len: obs.len(), dim: obs.dim(), generator, seed, params_checksum }, obs, states })
}

fn read_binary(path: &Path, meta: &BTreeMap<String, String>) -> Result<(Observations, Option<Vec<usize>>)> {
    let (t, p) = (parse_usize(meta, "T")?, parse_usize(meta, "p")?);
    if p == 0 {
        return Err(Error::Format("p must be positive".into()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("payload of {} bytes is not a whole number of values", bytes.len())));
    }
    let found = bytes.len() / 8;
    let expected = t * p;
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    if found > expected {
        return Err(Error::DimensionMismatch(format!("payload holds {found} values but T·p = {expected}")));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let obs = Observations::new(values, p)?;
    let states = match optional(meta, "states") {
        Some(name) => {
            let sp = path.parent().unwrap_or(Path::new("")).join(name);
            let bytes = fs::read(&sp)?;
            if bytes.len() != 4 * t {
                return Err(Error::Truncated { expected: t, found: bytes.len() / 4 });
            }
            Some(parse_states(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())))?)
        }
        None => None,
    };
    Ok((obs, states))
}

fn parse_states(labels: impl Iterator<Item = u32>) -> Result<Vec<usize>> {
    labels
        .map(|x| {
            if x == 0 {
                Err(Error::Format("state labels are 1-based; found 0".into()))
            } else {
                Ok(x as usize - 1)
            }
        })
        .collect()
}

fn read_csv(path: &Path, meta: Option<&BTreeMap<String, String>>) -> Result<(Observations, Option<Vec<usize>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("t") {
        return Err(Error::Format("CSV header must start with t".into()));
    }
    let has_states = header.last().map(String::as_str) == Some("x");
    let p = header.len() - 1 - usize::from(has_states);
    for (i, h) in header[1..=p].iter().enumerate() {
        if *h != format!("y{}", i + 1) {
            return Err(Error::Format(format!("unexpected CSV column {h:?}")));
        }
    }
    if p == 0 {
        return Err(Error::Format("CSV has no observation columns".into()));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Format(format!("row {}: bad number {s:?}", i + 1)));
        for j in 1..=p {
            values.push(parse(&rec[j])?);
        }
        if has_states {
            labels.push(rec[p + 1].trim().parse::<u32>().map_err(|_| Error::Format(format!("row {}: bad state", i + 1)))?);
        }
    }
    let found = values.len() / p;
    if let Some(m) = meta {
        let (t, mp) = (parse_usize(m, "T")?, parse_usize(m, "p")?);
        if mp != p {
            return Err(Error::DimensionMismatch(format!("metadata declares p = {mp}, CSV has {p} columns")));
        }
        if found < t {
            return Err(Error::Truncated { expected: t * p, found: found * p });
        }
        if found > t {
            return Err(Error::DimensionMismatch(format!("CSV holds {found} rows but T = {t}")));
        }
    }
    let obs = Observations::new(values, p)?;
    let states = if has_states { Some(parse_states(labels.into_iter())?) } else { None };
    Ok((obs, states))
}
