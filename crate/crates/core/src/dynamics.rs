//! Benchmark vector fields and ground-truth trajectories.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::Trajectory;
use crate::integrators::{RkTableau, RkWorkspace};
use crate::{Error, Result};

/// Substeps per output interval used by [`reference_trajectory`].
pub const REFERENCE_SUBSTEPS: usize = 100;

/// Relative disagreement between the base and halved substep that triggers
/// the refined result.
const SELF_CONSISTENCY_TOL: f64 = 1e-10;

pub type FieldFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
enum Field {
    Harmonic,
    Hyperbolic { mu: f64, lambda: f64 },
    Cubic,
    VanDerPol { mu: f64 },
    Hopf,
    Lorenz { sigma: f64, rho: f64, beta: f64 },
    /// `dx/dt = A x` with `A` row-major.
    Linear(Arc<[f64]>),
    Custom(Arc<FieldFn>),
}

/// Axis-aligned sampling box, optionally intersected with a ball around the
/// origin. An interval with `lo == hi` pins that coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub bounds: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_radius: Option<f64>,
}

impl Region {
    pub fn new(bounds: Vec<(f64, f64)>) -> Self {
        Region {
            bounds,
            max_radius: None,
        }
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Region::new(vec![(lo, hi); dim])
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bounds.is_empty() {
            return Err(Error::invalid("region has no axes"));
        }
        for (i, &(lo, hi)) in self.bounds.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::invalid(format!(
                    "region axis {i} is degenerate: [{lo}, {hi}]"
                )));
            }
        }
        if let Some(r) = self.max_radius {
            if !(r > 0.0) {
                return Err(Error::invalid(format!("max_radius must be positive, got {r}")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.bounds.len()
            && x.iter().zip(&self.bounds).all(|(&v, &(lo, hi))| v >= lo && v <= hi)
            && self
                .max_radius
                .is_none_or(|r| x.iter().map(|v| v * v).sum::<f64>() <= r * r)
    }
}

/// A named autonomous vector field `dx/dt = f(x)`.
#[derive(Clone)]
pub struct SystemSpec {
    pub name: String,
    pub dim: usize,
    pub default_region: Region,
    /// Length of the validation/test horizon used by the benchmark presets.
    pub characteristic_horizon: f64,
    field: Field,
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("default_region", &self.default_region)
            .field("characteristic_horizon", &self.characteristic_horizon)
            .finish_non_exhaustive()
    }
}

pub const BUILTIN_SYSTEMS: [&str; 6] = [
    "harmonic",
    "hyperbolic",
    "cubic",
    "van_der_pol",
    "hopf",
    "lorenz",
];

impl SystemSpec {
    /// Look up a built-in system by its config name.
    pub fn builtin(name: &str) -> Result<Self> {
        let sys = match name {
            "harmonic" => Self::harmonic(),
            "hyperbolic" => Self::hyperbolic(),
            "cubic" => Self::cubic(),
            "van_der_pol" => Self::van_der_pol(),
            "hopf" => Self::hopf(),
            "lorenz" => Self::lorenz(),
            other => {
                return Err(Error::config(format!(
                    "unknown system '{other}', expected one of {BUILTIN_SYSTEMS:?}"
                )))
            }
        };
        Ok(sys)
    }

    fn new(name: &str, dim: usize, region: Region, horizon: f64, field: Field) -> Self {
        SystemSpec {
            name: name.to_string(),
            dim,
            default_region: region,
            characteristic_horizon: horizon,
            field,
        }
    }

    /// `x' = y, y' = -x`.
    pub fn harmonic() -> Self {
        let mut region = Region::cube(2, -1.0, 1.0);
        region.max_radius = Some(1.0);
        Self::new("harmonic", 2, region, 51.2, Field::Harmonic)
    }

    /// `x' = mu x, y' = lambda (y - x^2)` with `mu = -0.05`, `lambda = -1`.
    pub fn hyperbolic() -> Self {
        Self::new(
            "hyperbolic",
            2,
            Region::cube(2, -1.0, 1.0),
            51.2,
            Field::Hyperbolic {
                mu: -0.05,
                lambda: -1.0,
            },
        )
    }

    /// Damped cubic oscillator `x' = -0.1x^3 + 2y^3, y' = -2x^3 - 0.1y^3`.
    pub fn cubic() -> Self {
        Self::new("cubic", 2, Region::cube(2, -1.0, 1.0), 51.2, Field::Cubic)
    }

    /// `x' = y, y' = mu (1 - x^2) y - x` with `mu = 2`.
    pub fn van_der_pol() -> Self {
        Self::new(
            "van_der_pol",
            2,
            Region::new(vec![(-2.0, 2.0), (-4.0, 4.0)]),
            51.2,
            Field::VanDerPol { mu: 2.0 },
        )
    }

    /// Hopf normal form with the bifurcation parameter carried as state 0.
    pub fn hopf() -> Self {
        Self::new(
            "hopf",
            3,
            Region::new(vec![(-0.2, 0.6), (-1.0, 2.0), (-1.0, 1.0)]),
            51.2,
            Field::Hopf,
        )
    }

    /// Lorenz system with `sigma = 10, rho = 28, beta = 8/3`.
    pub fn lorenz() -> Self {
        Self::new(
            "lorenz",
            3,
            Region::cube(3, -0.1, 0.1),
            2.56,
            Field::Lorenz {
                sigma: 10.0,
                rho: 28.0,
                beta: 8.0 / 3.0,
            },
        )
    }

    /// Linear field `dx/dt = A x`; `a` is row-major `dim x dim`.
    pub fn linear(name: &str, dim: usize, a: Vec<f64>) -> Result<Self> {
        if dim == 0 || a.len() != dim * dim {
            return Err(Error::invalid(format!(
                "linear field needs {dim}x{dim} coefficients, got {}",
                a.len()
            )));
        }
        Ok(Self::new(
            name,
            dim,
            Region::cube(dim, -1.0, 1.0),
            1.0,
            Field::Linear(a.into()),
        ))
    }

    /// Arbitrary field given as a closure writing `f(x)` into its second argument.
    pub fn custom(
        name: &str,
        dim: usize,
        region: Region,
        f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self::new(name, dim, region, 1.0, Field::Custom(Arc::new(f)))
    }

    /// Writes `f(x)` into `out`. Callers guarantee both slices have length `dim`.
    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.field {
            Field::Harmonic => {
                out[0] = x[1];
                out[1] = -x[0];
            }
            Field::Hyperbolic { mu, lambda } => {
                out[0] = mu * x[0];
                out[1] = lambda * (x[1] - x[0] * x[0]);
            }
            Field::Cubic => {
                let (x3, y3) = (x[0] * x[0] * x[0], x[1] * x[1] * x[1]);
                out[0] = -0.1 * x3 + 2.0 * y3;
                out[1] = -2.0 * x3 - 0.1 * y3;
            }
            Field::VanDerPol { mu } => {
                out[0] = x[1];
                out[1] = mu * (1.0 - x[0] * x[0]) * x[1] - x[0];
            }
            Field::Hopf => {
                let (mu, a, b) = (x[0], x[1], x[2]);
                let r2 = a * a + b * b;
                out[0] = 0.0;
                out[1] = mu * a + b - a * r2;
                out[2] = -a + mu * b - b * r2;
            }
            Field::Lorenz { sigma, rho, beta } => {
                out[0] = sigma * (x[1] - x[0]);
                out[1] = x[0] * (rho - x[2]) - x[1];
                out[2] = x[0] * x[1] - beta * x[2];
            }
            Field::Linear(a) => {
                let d = self.dim;
                for (i, o) in out.iter_mut().enumerate() {
                    *o = a[i * d..(i + 1) * d]
                        .iter()
                        .zip(x)
                        .map(|(aij, xj)| aij * xj)
                        .sum();
                }
            }
            Field::Custom(f) => f(x, out),
        }
    }

    /// Evaluate the vector field at `x`.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, &mut out);
        Ok(out)
    }

    pub(crate) fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "system '{}' has dimension {}, got state of length {}",
                self.name,
                self.dim,
                x.len()
            )));
        }
        Ok(())
    }
}

/// High-accuracy trajectory of `p + 1` states spaced `dt` apart, starting at `x0`.
///
/// Each output interval is integrated with classic RK4 using
/// [`REFERENCE_SUBSTEPS`] substeps and again with twice as many; the halved
/// result is kept whenever the two disagree by more than a relative `1e-10`.
pub fn reference_trajectory(system: &SystemSpec, x0: &[f64], dt: f64, p: usize) -> Result<Trajectory> {
    reference_trajectory_with_substeps(system, x0, dt, p, REFERENCE_SUBSTEPS)
}

/// [`reference_trajectory`] with an explicit base substep count per interval.
pub fn reference_trajectory_with_substeps(
    system: &SystemSpec,
    x0: &[f64],
    dt: f64,
    p: usize,
    substeps: usize,
) -> Result<Trajectory> {
    system.check_dim(x0)?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    if p == 0 {
        return Err(Error::invalid("reference trajectory needs p >= 1"));
    }
    if substeps == 0 {
        return Err(Error::invalid("substeps must be positive"));
    }
    let d = system.dim;
    let tab = RkTableau::rk4();
    let mut ws = RkWorkspace::new(&tab, d);
    let mut states = Vec::with_capacity((p + 1) * d);
    states.extend_from_slice(x0);

    let mut cur = x0.to_vec();
    let mut coarse = vec![0.0; d];
    let mut fine = vec![0.0; d];
    for step in 1..=p {
        integrate_interval(&tab, system, &cur, dt, substeps, &mut ws, &mut coarse);
        integrate_interval(&tab, system, &cur, dt, 2 * substeps, &mut ws, &mut fine);
        let scale = fine.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let gap = coarse
            .iter()
            .zip(&fine)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        let accepted = if gap <= SELF_CONSISTENCY_TOL * scale {
            &coarse
        } else {
            &fine
        };
        if accepted.iter().any(|v| !v.is_finite()) {
            return Err(Error::diverged(
                format!("reference trajectory of '{}'", system.name),
                step,
            ));
        }
        cur.copy_from_slice(accepted);
        states.extend_from_slice(&cur);
    }
    Trajectory::new(0.0, dt, d, states)
}

fn integrate_interval(
    tab: &RkTableau,
    system: &SystemSpec,
    x: &[f64],
    dt: f64,
    substeps: usize,
    ws: &mut RkWorkspace,
    out: &mut [f64],
) {
    let h = dt / substeps as f64;
    out.copy_from_slice(x);
    let mut next = vec![0.0; x.len()];
    for _ in 0..substeps {
        tab.step_into(system, out, h, ws, &mut next);
        out.copy_from_slice(&next);
    }
}
