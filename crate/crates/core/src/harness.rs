//! Experiment runner.
//!
//! An experiment is described by a TOML file:
//!
//! ```toml
//! name = "dd-budget"
//! output_dir = "out/dd-budget"
//!
//! [data]
//! generator = "dd"        # or: path = "data/rc.bin"
//! T = 10000
//! seed = 1
//! holdout = 0.1           # final contiguous fraction held out
//! folds = 0               # > 1 switches to contiguous-block folds
//!
//! [[runs]]
//! algorithm = "svi"
//! K = 8
//! restarts = 20
//! seed = 100              # restart r uses seed + r
//! L = 3
//! budget = 300            # M = budget / L; must divide exactly
//! kappa = 0.5
//! iters = 100
//! growbuf = true
//! epsilon = 1e-6
//! grow_u = 1
//!
//! [[runs]]
//! algorithm = "batch"
//! K = 8
//! max_iters = 200
//! tol = 1e-6
//! ```
//!
//! `results.csv` receives one row per restart (per restart and fold when
//! folds are used), written and flushed as each run finishes. Each run also
//! writes `trace_<run_id>.csv`. All fields except the two timing columns are
//! reproducible bit for bit from the same configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::batch::{default_prior, run_batch_vb, BatchConfig};
use crate::dataset::{generate, read_dataset};
use crate::error::{Error, Result};
use crate::eval::{contiguous_folds, holdout_split, predictive_log_prob, transition_error, EvalReport, PREDICTIVE_KIND};
use crate::model::{HmmParams, Observations};
use crate::svi::{run_svihmm, SviConfig};
use crate::synthetic::Generator;
use crate::trace::FitTrace;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub generator: Option<String>,
    pub path: Option<PathBuf>,
    #[serde(rename = "T")]
    pub len: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_holdout")]
    pub holdout: f64,
    #[serde(default)]
    pub folds: usize,
}

fn default_holdout() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Batch,
    Svi,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: Option<String>,
    pub algorithm: Algorithm,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default = "one")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "L")]
    pub subchain_len: Option<usize>,
    pub half_width: Option<usize>,
    #[serde(rename = "M")]
    pub minibatch: Option<usize>,
    pub budget: Option<usize>,
    pub kappa: Option<f64>,
    pub iters: Option<usize>,
    pub growbuf: Option<bool>,
    pub epsilon: Option<f64>,
    pub grow_u: Option<usize>,
    pub objective_len: Option<usize>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub runs: Vec<RunConfig>,
}

fn default_name() -> String {
    "experiment".into()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a config; a relative `output_dir` or data `path` is resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                cfg.data.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }
}

impl RunConfig {
    /// Resolves L and M, enforcing L·M = budget when a budget is given.
    fn shape(&self) -> Result<(usize, usize)> {
        let l = match (self.subchain_len, self.half_width) {
            (Some(_), Some(_)) => return Err(Error::InvalidParameter("give either L or half_width, not both".into())),
            (Some(l), None) => l,
            (None, Some(h)) => SviConfig::subchain_len_from_half_width(h),
            (None, None) => SviConfig::default().subchain_len,
        };
        let m = match (self.minibatch, self.budget) {
            (Some(m), Some(b)) if l * m != b => {
                return Err(Error::InvalidParameter(format!("L·M = {} does not match budget {b}", l * m)))
            }
            (Some(m), _) => m,
            (None, Some(b)) => {
                if l == 0 || b % l != 0 {
                    return Err(Error::InvalidParameter(format!("budget {b} is not a multiple of L = {l}")));
                }
                b / l
            }
            (None, None) => SviConfig::default().minibatch,
        };
        Ok((l, m))
    }

    pub fn svi_config(&self, seed: u64) -> Result<SviConfig> {
        let d = SviConfig::default();
        let (subchain_len, minibatch) = self.shape()?;
        Ok(SviConfig {
            subchain_len,
            minibatch,
            kappa: self.kappa.unwrap_or(d.kappa),
            iters: self.iters.unwrap_or(d.iters),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            grow_u: self.grow_u.unwrap_or(d.grow_u),
            use_growbuf: self.growbuf.unwrap_or(d.use_growbuf),
            seed,
            objective_len: self.objective_len.unwrap_or(d.objective_len),
        })
    }

    pub fn batch_config(&self, seed: u64) -> BatchConfig {
        let d = BatchConfig::default();
        BatchConfig { max_iters: self.max_iters.unwrap_or(d.max_iters), rel_tol: self.tol.unwrap_or(d.rel_tol), seed }
    }
}

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub run_id: String,
    pub seed: u64,
    pub algorithm: Algorithm,
    #[serde(rename = "L")]
    pub subchain_len: Option<usize>,
    #[serde(rename = "M")]
    pub minibatch: Option<usize>,
    pub kappa: Option<f64>,
    pub epsilon: Option<f64>,
    pub growbuf: Option<bool>,
    pub iters: usize,
    pub trans_error: Option<f64>,
    pub pred_logprob: f64,
    pub total_seconds: f64,
    pub per_iter_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub row: ResultRow,
    pub report: EvalReport,
    pub trace_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub results_path: PathBuf,
    pub runs: Vec<RunOutcome>,
}

struct LoadedData {
    obs: Observations,
    truth: Option<HmmParams>,
}

fn load_data(cfg: &DataConfig) -> Result<LoadedData> {
    match (&cfg.generator, &cfg.path) {
        (Some(g), None) => {
            let g: Generator = g.parse()?;
            let len = cfg.len.ok_or_else(|| Error::InvalidParameter("data.T is required with a generator".into()))?;
            let data = generate(g, len, cfg.seed, false)?;
            Ok(LoadedData { obs: data.obs, truth: Some(g.params()) })
        }
        (None, Some(path)) => {
            let data = read_dataset(path)?;
            let truth = data.meta.generator.parse::<Generator>().ok().map(Generator::params);
            let obs = match cfg.len {
                Some(t) if t < data.obs.len() => data.obs.slice(0..t),
                _ => data.obs,
            };
            Ok(LoadedData { obs, truth })
        }
        _ => Err(Error::InvalidParameter("data needs exactly one of generator or path".into())),
    }
}

/// Fits one run and scores it on `test`.
pub fn fit_and_evaluate(
    run: &RunConfig,
    seed: u64,
    train: &Observations,
    test: &Observations,
    truth: Option<&HmmParams>,
) -> Result<(FitTrace, ResultRow, EvalReport)> {
    let prior = default_prior(train, run.k)?;
    let (trace, mut row, config) = match run.algorithm {
        Algorithm::Batch => {
            let cfg = run.batch_config(seed);
            let trace = run_batch_vb(train, run.k, &prior, &cfg)?;
            let row = ResultRow {
                run_id: String::new(),
                seed,
                algorithm: Algorithm::Batch,
                subchain_len: None,
                minibatch: None,
                kappa: None,
                epsilon: None,
                growbuf: None,
                iters: trace.records.len(),
                trans_error: None,
                pred_logprob: 0.0,
                total_seconds: 0.0,
                per_iter_seconds: 0.0,
            };
            (trace, row, format!("{cfg:?}"))
        }
        Algorithm::Svi => {
            let cfg = run.svi_config(seed)?;
            let trace = run_svihmm(train, run.k, &prior, &cfg, Some(test))?;
            let row = ResultRow {
                run_id: String::new(),
                seed,
                algorithm: Algorithm::Svi,
                subchain_len: Some(cfg.subchain_len),
                minibatch: Some(cfg.minibatch),
                kappa: Some(cfg.kappa),
                epsilon: cfg.use_growbuf.then_some(cfg.epsilon),
                growbuf: Some(cfg.use_growbuf),
                iters: trace.records.len(),
                trans_error: None,
                pred_logprob: 0.0,
                total_seconds: 0.0,
                per_iter_seconds: 0.0,
            };
            (trace, row, format!("{cfg:?}"))
        }
    };
    let w = &trace.final_state;
    row.trans_error = match truth {
        Some(t) if t.num_states() == run.k && t.dim() == train.dim() => Some(transition_error(w, t)?),
        _ => None,
    };
    row.pred_logprob = predictive_log_prob(w, test)?;
    row.total_seconds = trace.total_seconds();
    row.per_iter_seconds = trace.per_iter_seconds();
    let report = EvalReport {
        trans_error: row.trans_error,
        pred_logprob: row.pred_logprob,
        per_iter_seconds: row.per_iter_seconds,
        total_seconds: row.total_seconds,
        predictive: PREDICTIVE_KIND.into(),
        config,
    };
    Ok((trace, row, report))
}

/// Runs every restart of every configured run, appending to
/// `<output_dir>/results.csv` as runs complete.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    if cfg.runs.is_empty() {
        return Err(Error::InvalidParameter("experiment has no runs".into()));
    }
    for run in &cfg.runs {
        if run.restarts == 0 {
            return Err(Error::InvalidParameter("restarts must be at least 1".into()));
        }
        if run.algorithm == Algorithm::Svi {
            run.shape()?;
        }
    }
    let data = load_data(&cfg.data)?;
    let splits = if cfg.data.folds > 1 {
        contiguous_folds(&data.obs, cfg.data.folds)?
    } else {
        vec![holdout_split(&data.obs, cfg.data.holdout)?]
    };

    fs::create_dir_all(&cfg.output_dir)?;
    let results_path = cfg.output_dir.join("results.csv");
    let mut writer = csv::Writer::from_path(&results_path)?;
    let mut runs = Vec::new();
    for (i, run) in cfg.runs.iter().enumerate() {
        let label = run.name.clone().unwrap_or_else(|| format!("{}{i}", match run.algorithm {
            Algorithm::Batch => "batch",
            Algorithm::Svi => "svi",
        }));
        for r in 0..run.restarts {
            let seed = run.seed + r as u64;
            for (f, (train, test)) in splits.iter().enumerate() {
                let run_id = if splits.len() > 1 { format!("{label}-r{r}-f{f}") } else { format!("{label}-r{r}") };
                log::info!("{}: starting {run_id} (seed {seed})", cfg.name);
                let (trace, mut row, report) = fit_and_evaluate(run, seed, train, test, data.truth.as_ref())?;
                row.run_id = run_id.clone();
                let trace_path = cfg.output_dir.join(format!("trace_{run_id}.csv"));
                trace.write_csv(&trace_path)?;
                writer.serialize(&row)?;
                writer.flush()?;
                runs.push(RunOutcome { row, report, trace_path });
            }
        }
    }
    Ok(ExperimentOutcome { results_path, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"
        name = "small"
        output_dir = "out"
        [data]
        generator = "dd"
        T = 2000
        seed = 5
        [[runs]]
        algorithm = "svi"
        K = 8
        restarts = 3
        seed = 10
        L = 5
        budget = 50
        iters = 5
        grow_u = 1
        [[runs]]
        algorithm = "batch"
        K = 8
        max_iters = 3
    "#;

    fn configured(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::from_toml(CONFIG).unwrap();
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn budget_fixes_minibatch_size() {
        let cfg = ExperimentConfig::from_toml(CONFIG).unwrap();
        assert_eq!(cfg.runs[0].shape().unwrap(), (5, 10));
        let mut bad = cfg.runs[0].clone();
        bad.subchain_len = Some(7);
        assert!(bad.shape().is_err());
        bad.minibatch = Some(3);
        bad.subchain_len = Some(5);
        assert!(bad.shape().is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(ExperimentConfig::from_toml(&CONFIG.replace("kappa", "kapa").replace("iters = 5", "itrs = 5")).is_err());
    }

    #[test]
    fn writes_rows_and_traces() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&configured(dir.path())).unwrap();
        assert_eq!(out.runs.len(), 4);
        let mut r = csv::Reader::from_path(&out.results_path).unwrap();
        let header: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
        assert_eq!(
            header,
            [
                "run_id", "seed", "algorithm", "L", "M", "kappa", "epsilon", "growbuf", "iters", "trans_error",
                "pred_logprob", "total_seconds", "per_iter_seconds"
            ]
        );
        assert_eq!(r.records().count(), 4);
        let seeds: Vec<u64> = out.runs.iter().take(3).map(|o| o.row.seed).collect();
        assert_eq!(seeds, [10, 11, 12]);
        for o in &out.runs {
            assert!(o.trace_path.exists());
            assert!(o.row.pred_logprob.is_finite());
            assert!(o.row.trans_error.is_some());
        }
    }

    #[test]
    fn reruns_reproduce_numeric_fields() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_experiment(&configured(a.path())).unwrap();
        let rb = run_experiment(&configured(b.path())).unwrap();
        for (x, y) in ra.runs.iter().zip(&rb.runs) {
            assert_eq!(x.row.pred_logprob.to_bits(), y.row.pred_logprob.to_bits());
            assert_eq!(x.row.trans_error.map(f64::to_bits), y.row.trans_error.map(f64::to_bits));
            assert_eq!(x.row.iters, y.row.iters);
        }
    }

    #[test]
    fn folds_produce_one_row_per_fold() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = configured(dir.path());
        cfg.data.folds = 5;
        cfg.runs.truncate(1);
        cfg.runs[0].restarts = 1;
        let out = run_experiment(&cfg).unwrap();
        let ids: Vec<&str> = out.runs.iter().map(|o| o.row.run_id.as_str()).collect();
        assert_eq!(ids, ["svi0-r0-f0", "svi0-r0-f1", "svi0-r0-f2", "svi0-r0-f3", "svi0-r0-f4"]);
    }
}
