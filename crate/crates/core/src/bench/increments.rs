use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;

use crate::dynamics::{reference_trajectory, Region, SystemSpec};
use crate::{Error, Result};

/// Reference increments `x(j dt) - x(0)` over a regular grid of initial states.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementField {
    pub system: String,
    pub dt: f64,
    /// Grid points, one row each.
    pub points: Array2<f64>,
    /// `fields[j - 1]` holds the increments after `j` steps, one row per point.
    /// Rows of diverged points are NaN.
    pub fields: Vec<Array2<f64>>,
    pub diverged: Vec<bool>,
}

impl IncrementField {
    pub fn j_max(&self) -> usize {
        self.fields.len()
    }

    /// CSV for step `j` (1-based): `x0,...,dx0,...,diverged`.
    pub fn write_csv(&self, j: usize, mut w: impl Write) -> std::io::Result<()> {
        let d = self.points.ncols();
        let xs: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
        let dxs: Vec<String> = (0..d).map(|k| format!("dx{k}")).collect();
        writeln!(w, "{},{},diverged", xs.join(","), dxs.join(","))?;
        let field = &self.fields[j - 1];
        for (i, (p, inc)) in self.points.outer_iter().zip(field.outer_iter()).enumerate() {
            for v in p.iter().chain(inc.iter()) {
                write!(w, "{v},")?;
            }
            writeln!(w, "{}", u8::from(self.diverged[i]))?;
        }
        Ok(())
    }
}

/// Axis values: `n` evenly spaced points including both ends, or the single
/// value of a degenerate interval.
fn axis_points(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if lo == hi {
        return vec![lo];
    }
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Increments of the reference flow for `j = 1..=j_max` at every point of a
/// `grid_n`-per-axis grid over `region` (the radius bound is ignored).
/// A point whose reference trajectory diverges is flagged, not fatal.
pub fn increment_field(
    system: &SystemSpec,
    region: &Region,
    grid_n: usize,
    dt: f64,
    j_max: usize,
) -> Result<IncrementField> {
    region.validate()?;
    if region.dim() != system.dim {
        return Err(Error::invalid(format!(
            "region has {} axes, system '{}' has dimension {}",
            region.dim(),
            system.name,
            system.dim
        )));
    }
    if grid_n == 0 || j_max == 0 {
        return Err(Error::invalid("grid_n and j_max must be at least 1"));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let axes: Vec<Vec<f64>> = region
        .bounds
        .iter()
        .map(|&(lo, hi)| axis_points(lo, hi, grid_n))
        .collect();
    let count: usize = axes.iter().map(Vec::len).product();
    let d = system.dim;
    let mut points = Array2::zeros((count, d));
    for (i, mut row) in points.outer_iter_mut().enumerate() {
        let mut rest = i;
        for k in (0..d).rev() {
            row[k] = axes[k][rest % axes[k].len()];
            rest /= axes[k].len();
        }
    }

    let results: Vec<Option<Vec<f64>>> = points
        .outer_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|x0| {
            let x0 = x0.to_vec();
            match reference_trajectory(system, &x0, dt, j_max) {
                Ok(tr) => Some(tr.states()[d..].to_vec()),
                Err(e) => {
                    log::warn!("increment field: point {x0:?} flagged: {e}");
                    None
                }
            }
        })
        .collect();

    let mut fields = vec![Array2::from_elem((count, d), f64::NAN); j_max];
    let mut diverged = vec![false; count];
    for (i, res) in results.into_iter().enumerate() {
        let Some(states) = res else {
            diverged[i] = true;
            continue;
        };
        for (j, field) in fields.iter_mut().enumerate() {
            for k in 0..d {
                field[[i, k]] = states[j * d + k] - points[[i, k]];
            }
        }
    }
    Ok(IncrementField {
        system: system.name.clone(),
        dt,
        points,
        fields,
        diverged,
    })
}
