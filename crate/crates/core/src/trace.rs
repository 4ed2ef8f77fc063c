use std::path::Path;

use crate::error::Result;
use crate::model::GlobalVariational;

/// One row of a fit trace.
///
/// `objective` is the ELBO for batch runs and the validation predictive
/// log-probability per observation for SVI runs. `wall_seconds` is the time
/// spent in that iteration, excluding objective evaluation for SVI.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub rho: Option<f64>,
    pub objective: f64,
    pub buffer_added_total: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitTrace {
    pub records: Vec<TraceRecord>,
    pub final_state: GlobalVariational,
    pub converged: bool,
}

impl FitTrace {
    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }

    pub fn total_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.wall_seconds).sum()
    }

    /// Mean per-iteration time over iterations that performed an update.
    pub fn per_iter_seconds(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.total_seconds() / self.records.len() as f64
        }
    }

    pub fn buffer_added_total(&self) -> usize {
        self.records.iter().map(|r| r.buffer_added_total).sum()
    }

    /// Writes `iter,rho,objective,buffer_added_total,wall_seconds`; `rho` is
    /// empty for batch iterations.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iter", "rho", "objective", "buffer_added_total", "wall_seconds"])?;
        for r in &self.records {
            w.write_record([
                r.iter.to_string(),
                r.rho.map(|v| v.to_string()).unwrap_or_default(),
                r.objective.to_string(),
                r.buffer_added_total.to_string(),
                r.wall_seconds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
