use std::io::Write;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::dataset::Trajectory;
use crate::multiscale::RolloutResult;
use crate::{Error, Result};

/// Mean over trajectories of the squared Euclidean error at each grid point.
///
/// `pred` must carry one batch member per truth trajectory, on the same grid.
pub fn per_step_error(pred: &RolloutResult, truth: &[Trajectory]) -> Result<Vec<f64>> {
    if truth.is_empty() || pred.batch() != truth.len() {
        return Err(Error::invalid(format!(
            "prediction has {} trajectories, truth has {}",
            pred.batch(),
            truth.len()
        )));
    }
    for (b, tr) in truth.iter().enumerate() {
        if tr.len() != pred.len() || tr.dim() != pred.dim() {
            return Err(Error::invalid(format!(
                "truth trajectory {b} has {} states of dim {}, prediction has {} of dim {}",
                tr.len(),
                tr.dim(),
                pred.len(),
                pred.dim()
            )));
        }
        if (tr.dt - pred.dt).abs() > 1e-9 * tr.dt.abs() {
            return Err(Error::invalid(format!(
                "grid mismatch: truth dt {} vs prediction dt {}",
                tr.dt, pred.dt
            )));
        }
    }
    let n = truth.len() as f64;
    Ok(pred
        .states
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(k, step)| {
            let total: f64 = truth
                .iter()
                .zip(step.outer_iter())
                .map(|(tr, x)| {
                    tr.state(k)
                        .iter()
                        .zip(x.iter())
                        .map(|(a, b)| (b - a) * (b - a))
                        .sum::<f64>()
                })
                .sum();
            total / n
        })
        .collect())
}

/// Mean of [`per_step_error`] over the whole grid, `t = 0` included.
pub fn integrated_l2(pred: &RolloutResult, truth: &[Trajectory]) -> Result<f64> {
    Ok(mean(&per_step_error(pred, truth)?))
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Evaluation of one scheme on a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub scheme_id: String,
    pub dt_min: f64,
    pub dt_max: f64,
    pub dt: f64,
    pub per_step_mse: Vec<f64>,
    pub integrated_l2: f64,
    pub wall_seconds: f64,
}

impl ErrorReport {
    pub fn new(
        scheme_id: impl Into<String>,
        (dt_min, dt_max): (f64, f64),
        pred: &RolloutResult,
        truth: &[Trajectory],
        wall_seconds: f64,
    ) -> Result<Self> {
        let per_step_mse = per_step_error(pred, truth)?;
        Ok(ErrorReport {
            scheme_id: scheme_id.into(),
            dt_min,
            dt_max,
            dt: pred.dt,
            integrated_l2: mean(&per_step_mse),
            per_step_mse,
            wall_seconds,
        })
    }

    /// `time,mse` rows.
    pub fn write_per_step_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "time,mse")?;
        for (k, e) in self.per_step_mse.iter().enumerate() {
            writeln!(w, "{},{e}", k as f64 * self.dt)?;
        }
        Ok(())
    }
}

pub const SUMMARY_HEADER: &str = "scheme_id,dt_min,dt_max,integrated_l2,wall_seconds";

pub fn write_summary_csv(reports: &[ErrorReport], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.scheme_id, r.dt_min, r.dt_max, r.integrated_l2, r.wall_seconds
        )?;
    }
    Ok(())
}
