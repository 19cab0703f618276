//! Explicit Runge-Kutta stepping with fixed step size.

use ndarray::{Array3, ArrayView2};

use crate::dataset::Trajectory;
use crate::dynamics::SystemSpec;
use crate::{Error, Result};

/// Butcher tableau of an explicit Runge-Kutta scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct RkTableau {
    pub name: String,
    /// Row `j` holds the `j` coefficients multiplying stages `0..j`.
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl RkTableau {
    /// Build a tableau from a full `k x k` coefficient matrix. Anything on or
    /// above the diagonal must be zero: implicit schemes are rejected.
    pub fn new(name: &str, a: Vec<Vec<f64>>, b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let k = b.len();
        if k == 0 || a.len() != k || c.len() != k || a.iter().any(|r| r.len() != k) {
            return Err(Error::invalid(format!(
                "tableau '{name}': inconsistent stage count"
            )));
        }
        for (j, row) in a.iter().enumerate() {
            if row[j..].iter().any(|&v| v != 0.0) {
                return Err(Error::invalid(format!(
                    "tableau '{name}' is implicit (row {j} has entries on or above the diagonal)"
                )));
            }
        }
        let sum: f64 = b.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "tableau '{name}' is inconsistent: weights sum to {sum}"
            )));
        }
        let a = a
            .into_iter()
            .enumerate()
            .map(|(j, row)| row[..j].to_vec())
            .collect();
        Ok(RkTableau {
            name: name.to_string(),
            a,
            b,
            c,
        })
    }

    pub fn euler() -> Self {
        Self::new("euler", vec![vec![0.0]], vec![1.0], vec![0.0]).unwrap()
    }

    pub fn rk4() -> Self {
        Self::new(
            "rk4",
            vec![
                vec![0.0, 0.0, 0.0, 0.0],
                vec![0.5, 0.0, 0.0, 0.0],
                vec![0.0, 0.5, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
            ],
            vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            vec![0.0, 0.5, 0.5, 1.0],
        )
        .unwrap()
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "euler" => Ok(Self::euler()),
            "rk4" => Ok(Self::rk4()),
            other => Err(Error::config(format!(
                "unknown tableau '{other}', expected \"euler\" or \"rk4\""
            ))),
        }
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.b
    }

    pub fn nodes(&self) -> &[f64] {
        &self.c
    }

    /// Coefficient `a[j][l]` for `l < j`; zero otherwise.
    pub fn coefficient(&self, j: usize, l: usize) -> f64 {
        self.a.get(j).and_then(|row| row.get(l)).copied().unwrap_or(0.0)
    }

    /// One step `x + h * sum_j b_j k_j` written into `out`. No finiteness check.
    #[inline]
    pub fn step_into(
        &self,
        system: &SystemSpec,
        x: &[f64],
        h: f64,
        ws: &mut RkWorkspace,
        out: &mut [f64],
    ) {
        let d = x.len();
        for j in 0..self.b.len() {
            ws.tmp.copy_from_slice(x);
            for (l, &alpha) in self.a[j].iter().enumerate() {
                if alpha != 0.0 {
                    let kl = &ws.k[l * d..(l + 1) * d];
                    for (t, &kv) in ws.tmp.iter_mut().zip(kl) {
                        *t += h * alpha * kv;
                    }
                }
            }
            let (_, rest) = ws.k.split_at_mut(j * d);
            system.eval_into(&ws.tmp, &mut rest[..d]);
        }
        out.copy_from_slice(x);
        for (j, &bj) in self.b.iter().enumerate() {
            if bj != 0.0 {
                let kj = &ws.k[j * d..(j + 1) * d];
                for (o, &kv) in out.iter_mut().zip(kj) {
                    *o += h * bj * kv;
                }
            }
        }
    }
}

/// Stage scratch space for [`RkTableau::step_into`].
#[derive(Debug, Clone)]
pub struct RkWorkspace {
    k: Vec<f64>,
    tmp: Vec<f64>,
}

impl RkWorkspace {
    pub fn new(tab: &RkTableau, dim: usize) -> Self {
        RkWorkspace {
            k: vec![0.0; tab.stages() * dim],
            tmp: vec![0.0; dim],
        }
    }
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!("step size must be positive, got {h}")));
    }
    Ok(())
}

/// A single Runge-Kutta step of size `h` from `x`.
pub fn rk_step(tab: &RkTableau, system: &SystemSpec, x: &[f64], h: f64) -> Result<Vec<f64>> {
    system.check_dim(x)?;
    check_step(h)?;
    let mut ws = RkWorkspace::new(tab, system.dim);
    let mut out = vec![0.0; system.dim];
    tab.step_into(system, x, h, &mut ws, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::diverged(format!("{} step", tab.name), 1));
    }
    Ok(out)
}

/// `n` steps from `x0`; the returned trajectory holds `n + 1` states.
pub fn rollout_rk(
    tab: &RkTableau,
    system: &SystemSpec,
    x0: &[f64],
    h: f64,
    n: usize,
) -> Result<Trajectory> {
    system.check_dim(x0)?;
    let x0 = ArrayView2::from_shape((1, x0.len()), x0).expect("row view");
    let states = rollout_rk_flat(tab, system, x0, h, n)?;
    let d = system.dim;
    Trajectory::new(0.0, h, d, states.into_raw_vec_and_offset().0)
}

/// Row-wise [`rollout_rk`] over a batch of initial states (one per row).
pub fn rollout_rk_batch(
    tab: &RkTableau,
    system: &SystemSpec,
    x0: ArrayView2<f64>,
    h: f64,
    n: usize,
) -> Result<Vec<Trajectory>> {
    let states = rollout_rk_flat(tab, system, x0, h, n)?;
    let d = system.dim;
    (0..x0.nrows())
        .map(|r| {
            let flat: Vec<f64> = states
                .outer_iter()
                .flat_map(|step| step.row(r).to_vec())
                .collect();
            Trajectory::new(0.0, h, d, flat)
        })
        .collect()
}

/// Time-major batched rollout: output shape is `(n + 1, rows, dim)`.
///
/// Every row goes through the same per-row kernel as [`rollout_rk`], so each
/// row is bitwise identical to its serial rollout.
pub fn rollout_rk_flat(
    tab: &RkTableau,
    system: &SystemSpec,
    x0: ArrayView2<f64>,
    h: f64,
    n: usize,
) -> Result<Array3<f64>> {
    check_step(h)?;
    if n == 0 {
        return Err(Error::invalid("rollout needs at least one step"));
    }
    let (rows, d) = x0.dim();
    if d != system.dim {
        return Err(Error::invalid(format!(
            "batch has {d} columns, system '{}' has dimension {}",
            system.name, system.dim
        )));
    }
    let mut out = Array3::<f64>::zeros((n + 1, rows, d));
    out.index_axis_mut(ndarray::Axis(0), 0).assign(&x0);
    let buf = out.as_slice_mut().expect("standard layout");
    let stride = rows * d;
    let mut ws = RkWorkspace::new(tab, d);
    for step in 1..=n {
        let (done, rest) = buf.split_at_mut(step * stride);
        let prev = &done[(step - 1) * stride..];
        let next = &mut rest[..stride];
        for r in 0..rows {
            let span = r * d..(r + 1) * d;
            tab.step_into(system, &prev[span.clone()], h, &mut ws, &mut next[span.clone()]);
            if next[span].iter().any(|v| !v.is_finite()) {
                return Err(Error::diverged(
                    format!("{} rollout of '{}' (batch row {r})", tab.name, system.name),
                    step,
                ));
            }
        }
    }
    Ok(out)
}
