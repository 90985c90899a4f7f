//! Per-round convergence records shared by both frameworks.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{accuracy, Dataset, LinearModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Primal residual norm (network lasso only).
    pub r_p: Option<f64>,
    /// Dual residual norm (network lasso only).
    pub r_s: Option<f64>,
    /// Duality gap (Mocha only).
    pub gap: Option<f64>,
    pub objective: f64,
    /// Cumulative communication rounds, one per outer iteration.
    pub rounds: usize,
    pub wall_ms: f64,
    /// Macro test accuracy, when sampled this round.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
    /// Whether the stopping criterion was met (false: iteration cap).
    pub converged: bool,
}

pub const TRACE_CSV_HEADER: &str = "iter,r_p,r_s,gap,objective,rounds,wall_ms,accuracy";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl ConvergenceTrace {
    pub fn total_rounds(&self) -> usize {
        self.rows.last().map_or(0, |r| r.rounds)
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.rows.last().map(|r| r.objective)
    }

    /// Running minimum of the objective column.
    pub fn best_so_far_objective(&self) -> Vec<f64> {
        self.rows
            .iter()
            .scan(f64::INFINITY, |best, r| {
                *best = best.min(r.objective);
                Some(*best)
            })
            .collect()
    }

    pub fn has_accuracy(&self) -> bool {
        self.rows.iter().any(|r| r.accuracy.is_some())
    }

    /// Zeroes wall-clock columns so traces can be compared for determinism.
    pub fn without_timings(&self) -> Self {
        let mut t = self.clone();
        for r in &mut t.rows {
            r.wall_ms = 0.0;
        }
        t
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from(TRACE_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:?},{},{:?},{}\n",
                r.iter,
                opt(r.r_p),
                opt(r.r_s),
                opt(r.gap),
                r.objective,
                r.rounds,
                r.wall_ms,
                opt(r.accuracy)
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv_string().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Samples macro-averaged test accuracy of per-node models every `every` rounds.
#[derive(Debug, Clone)]
pub struct AccuracyProbe<'a> {
    pub test: Vec<&'a Dataset>,
    pub every: usize,
}

impl<'a> AccuracyProbe<'a> {
    pub fn new(test: Vec<&'a Dataset>, every: usize) -> Self {
        Self {
            test,
            every: every.max(1),
        }
    }

    pub fn sample(&self, round: usize, models: &[LinearModel]) -> Option<f64> {
        if round % self.every != 0 {
            return None;
        }
        macro_accuracy(models, &self.test).ok()
    }
}

/// Mean over nodes of each node's model accuracy on its own dataset.
pub fn macro_accuracy(models: &[LinearModel], data: &[&Dataset]) -> Result<f64> {
    if models.len() != data.len() || models.is_empty() {
        return Err(Error::invalid(format!(
            "{} models for {} datasets",
            models.len(),
            data.len()
        )));
    }
    let per_node = models
        .iter()
        .zip(data)
        .map(|(m, d)| accuracy(m, d))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_node.iter().sum::<f64>() / per_node.len() as f64)
}
