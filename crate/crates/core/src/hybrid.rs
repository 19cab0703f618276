//! Coarse neural anchors with classical Runge-Kutta fill-in.
//!
//! The coarse hierarchy produces anchors on its finest grid exactly as
//! [`multiscale_rollout_batch`](crate::multiscale::multiscale_rollout_batch)
//! would. Then every anchor before the horizon (all batch members at once) is
//! advanced `K - 1` Runge-Kutta steps of size `h`, where `K = dt_{q-1} / h`.
//! The state at the next anchor always comes from the network.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::dynamics::SystemSpec;
use crate::integrators::{rollout_rk_flat, RkTableau};
use crate::multiscale::{anchor_rollout, integral, plan_coupling, Hierarchy, Provenance, RolloutResult};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct HybridScheme {
    /// `None` means pure Runge-Kutta (`q = 0`).
    pub coarse: Option<Hierarchy>,
    pub tableau: RkTableau,
    pub fine_step: f64,
    pub system: SystemSpec,
}

impl HybridScheme {
    pub fn new(coarse: Option<Hierarchy>, tableau: RkTableau, fine_step: f64, system: SystemSpec) -> Result<Self> {
        if !(fine_step > 0.0) || !fine_step.is_finite() {
            return Err(Error::config(format!("fine step must be positive, got {fine_step}")));
        }
        if let Some(h) = &coarse {
            if h.dim() != system.dim {
                return Err(Error::config(format!(
                    "coarse models have dim {}, system '{}' has dim {}",
                    h.dim(),
                    system.name,
                    system.dim
                )));
            }
            match integral(h.finest_dt() / fine_step) {
                Some(k) if k >= 1 => {}
                _ => {
                    return Err(Error::config(format!(
                        "coarse step {} is not a multiple of the fine step {fine_step}",
                        h.finest_dt()
                    )))
                }
            }
        }
        Ok(HybridScheme {
            coarse,
            tableau,
            fine_step,
            system,
        })
    }

    /// Number of coarse models.
    pub fn q(&self) -> usize {
        self.coarse.as_ref().map_or(0, Hierarchy::len)
    }

    /// Fine steps per coarse step of the finest coarse model.
    pub fn fine_per_anchor(&self) -> Option<u64> {
        self.coarse
            .as_ref()
            .and_then(|h| integral(h.finest_dt() / self.fine_step))
    }
}

/// Roll out every row of `x0` to `horizon` on the fine grid.
pub fn hybrid_rollout(s: &HybridScheme, x0: ArrayView2<f64>, horizon: f64) -> Result<RolloutResult> {
    let h = s.fine_step;
    let n = integral(horizon / h)
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::config(format!("horizon {horizon} is not a positive multiple of {h}")))?
        as usize;
    let (batch, dim) = x0.dim();

    let Some(coarse) = &s.coarse else {
        let states = rollout_rk_flat(&s.tableau, &s.system, x0, h, n).map_err(rk_stage)?;
        let mut out = RolloutResult::empty(h, n + 1, batch, dim);
        out.states = states;
        out.provenance = vec![Provenance::Rk; n + 1];
        out.provenance[0] = Provenance::Initial;
        return Ok(out);
    };

    let plan = plan_coupling(&coarse.dts(), horizon)?;
    let anchors = anchor_rollout(coarse, &plan, x0)?;
    let k = s.fine_per_anchor().expect("validated in HybridScheme::new") as usize;
    let mut out = RolloutResult::empty(h, n + 1, batch, dim);
    out.forward_calls = anchors.forward_calls.clone();
    for (i, prov) in anchors.provenance.iter().enumerate() {
        out.states
            .index_axis_mut(Axis(0), i * k)
            .assign(&anchors.states.index_axis(Axis(0), i));
        out.provenance[i * k] = match *prov {
            Provenance::Level(l) => Provenance::NnLevel(l),
            p => p,
        };
    }
    if k < 2 {
        return Ok(out);
    }

    let starts = anchors.len() - 1;
    let mut stack = Array2::<f64>::zeros((starts * batch, dim));
    for a in 0..starts {
        stack
            .slice_mut(s![a * batch..(a + 1) * batch, ..])
            .assign(&anchors.states.index_axis(Axis(0), a));
    }
    let fine = rollout_rk_flat(&s.tableau, &s.system, stack.view(), h, k - 1).map_err(rk_stage)?;
    for a in 0..starts {
        for j in 1..k {
            out.states
                .index_axis_mut(Axis(0), a * k + j)
                .assign(&fine.slice(s![j, a * batch..(a + 1) * batch, ..]));
            out.provenance[a * k + j] = Provenance::Rk;
        }
    }
    Ok(out)
}

/// [`hybrid_rollout`] of a single initial state.
pub fn hybrid_rollout_single(s: &HybridScheme, x0: &[f64], horizon: f64) -> Result<RolloutResult> {
    let x0 = ArrayView2::from_shape((1, x0.len()), x0).expect("row view");
    hybrid_rollout(s, x0, horizon)
}

fn rk_stage(e: Error) -> Error {
    match e {
        Error::Divergence { context, step } => Error::Divergence {
            context: format!("runge-kutta fill-in: {context}"),
            step,
        },
        other => other,
    }
}
