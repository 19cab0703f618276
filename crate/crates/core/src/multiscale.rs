//! Coupling flow maps across time scales.
//!
//! Models are ordered by decreasing step size. Level 0 takes `K_0 = floor(T /
//! dt_0)` serial steps from the initial state; every later level `i` stacks
//! all states generated so far and advances the whole stack `K_i = dt_{i-1} /
//! dt_i - 1` steps at once. The anchor times this produces are exactly the
//! mixed-radix numbers `sum_i a_i dt_i` with `0 <= a_i <= K_i`, i.e. every
//! multiple of the finest step, each reached once.
//!
//! Times are tracked as integer multiples ("ticks") of the finest step so the
//! bookkeeping is exact.

use std::fmt;
use std::io::Write;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::bench::metrics::integrated_l2;
use crate::dataset::Dataset;
use crate::flowmap::{compose_forward, forward, FlowMapModel};
use crate::{Error, Result};

const RATIO_TOL: f64 = 1e-9;

/// Round `x` to the nearest integer if it is within a relative `1e-9` of it.
pub(crate) fn integral(x: f64) -> Option<u64> {
    let r = x.round();
    ((x - r).abs() <= RATIO_TOL * r.abs().max(1.0) && r >= 0.0).then_some(r as u64)
}

/// Which stage produced an entry of a [`RolloutResult`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Initial,
    /// Computed by hierarchy level `i` (0 is the coarsest).
    Level(usize),
    Interpolated,
    /// Coarse anchor of a hybrid rollout, computed by neural level `i`.
    NnLevel(usize),
    /// Filled in by a Runge-Kutta step.
    Rk,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Initial => write!(f, "-1"),
            Provenance::Level(i) => write!(f, "{i}"),
            Provenance::Interpolated => write!(f, "interp"),
            Provenance::NnLevel(i) => write!(f, "nn-level-{i}"),
            Provenance::Rk => write!(f, "rk"),
        }
    }
}

/// Flow-map models sorted by strictly decreasing step size with integer ratios.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    models: Vec<FlowMapModel>,
    ratios: Vec<u64>,
}

impl Hierarchy {
    /// Sorts `models` by decreasing `dt` and validates the step-size ratios.
    pub fn new(mut models: Vec<FlowMapModel>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::config("hierarchy needs at least one model"));
        }
        models.sort_by(|a, b| b.dt.total_cmp(&a.dt));
        let dim = models[0].dim();
        if let Some(m) = models.iter().find(|m| m.dim() != dim || m.system != models[0].system) {
            return Err(Error::config(format!(
                "model dt={} ({}, dim {}) does not match ({}, dim {dim})",
                m.dt,
                m.system,
                m.dim(),
                models[0].system
            )));
        }
        let dts: Vec<f64> = models.iter().map(|m| m.dt).collect();
        let ratios = step_ratios(&dts)?;
        Ok(Hierarchy { models, ratios })
    }

    pub fn models(&self) -> &[FlowMapModel] {
        &self.models
    }

    /// `ratios[i - 1] = dt_{i-1} / dt_i`.
    pub fn ratios(&self) -> &[u64] {
        &self.ratios
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.models[0].dim()
    }

    pub fn dts(&self) -> Vec<f64> {
        self.models.iter().map(|m| m.dt).collect()
    }

    pub fn finest_dt(&self) -> f64 {
        self.models[self.models.len() - 1].dt
    }

    pub fn coarsest_dt(&self) -> f64 {
        self.models[0].dt
    }
}

/// Integer ratios of consecutive step sizes, which must be in decreasing order.
fn step_ratios(dts: &[f64]) -> Result<Vec<u64>> {
    dts.windows(2)
        .map(|w| {
            if !(w[1] > 0.0) {
                return Err(Error::config(format!("step sizes must be positive, got {}", w[1])));
            }
            let ratio = w[0] / w[1];
            match integral(ratio) {
                Some(1) | Some(0) => Err(Error::config(format!(
                    "duplicate or unsorted step sizes {} and {}",
                    w[0], w[1]
                ))),
                Some(r) => Ok(r),
                None => Err(Error::config(format!(
                    "step sizes {} and {} have non-integer ratio {ratio}",
                    w[0], w[1]
                ))),
            }
        })
        .collect()
}

/// Step counts and tick bookkeeping for one hierarchical rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPlan {
    pub horizon: f64,
    /// Finest step size; one tick.
    pub tick: f64,
    /// Step size of each level in ticks, coarsest first.
    pub level_ticks: Vec<u64>,
    /// `K_i`: number of forward applications at level `i`.
    pub steps: Vec<u64>,
    pub horizon_ticks: u64,
}

impl CouplingPlan {
    /// Anchor times in ticks, enumerated from their mixed-radix digits and
    /// truncated to the horizon. Sorted, duplicates kept (there are none).
    pub fn anchor_ticks(&self) -> Vec<u64> {
        let mut ticks = vec![0u64];
        for (&size, &k) in self.level_ticks.iter().zip(&self.steps) {
            let mut next = Vec::with_capacity(ticks.len() * (k as usize + 1));
            for &t in &ticks {
                next.extend((0..=k).map(|a| t + a * size));
            }
            ticks = next;
        }
        ticks.retain(|&t| t <= self.horizon_ticks);
        ticks.sort_unstable();
        ticks
    }

    pub fn anchor_times(&self) -> Vec<f64> {
        self.anchor_ticks()
            .into_iter()
            .map(|t| t as f64 * self.tick)
            .collect()
    }

    /// Mixed-radix digits `a_i` of an anchor tick.
    pub fn digits(&self, tick: u64) -> Vec<u64> {
        let mut rest = tick;
        self.level_ticks
            .iter()
            .map(|&size| {
                let a = rest / size;
                rest %= size;
                a
            })
            .collect()
    }
}

/// Plan the rollout of step sizes `dts` (any order) over horizon `horizon`.
pub fn plan_coupling(dts: &[f64], horizon: f64) -> Result<CouplingPlan> {
    if dts.is_empty() {
        return Err(Error::config("no step sizes to couple"));
    }
    let mut sorted = dts.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let ratios = step_ratios(&sorted)?;
    let tick = sorted[sorted.len() - 1];
    if !(tick > 0.0) || !tick.is_finite() {
        return Err(Error::config(format!("step sizes must be positive, got {tick}")));
    }
    let horizon_ticks = integral(horizon / tick).ok_or_else(|| {
        Error::config(format!(
            "horizon {horizon} is not a multiple of the finest step {tick}"
        ))
    })?;
    let mut level_ticks = vec![1u64; sorted.len()];
    for i in (0..ratios.len()).rev() {
        level_ticks[i] = level_ticks[i + 1] * ratios[i];
    }
    if horizon_ticks < level_ticks[0] {
        return Err(Error::config(format!(
            "horizon {horizon} is shorter than the coarsest step {}",
            sorted[0]
        )));
    }
    let mut steps = vec![horizon_ticks / level_ticks[0]];
    steps.extend(ratios.iter().map(|r| r - 1));
    Ok(CouplingPlan {
        horizon,
        tick,
        level_ticks,
        steps,
        horizon_ticks,
    })
}

/// States on a uniform time grid for a batch of initial conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// Grid spacing; `times[i] = i * dt`.
    pub dt: f64,
    pub times: Vec<f64>,
    pub provenance: Vec<Provenance>,
    /// Shape `(times, batch, dim)`.
    pub states: Array3<f64>,
    /// Batched network evaluations performed per hierarchy level.
    pub forward_calls: Vec<usize>,
}

impl RolloutResult {
    pub(crate) fn empty(dt: f64, len: usize, batch: usize, dim: usize) -> Self {
        RolloutResult {
            dt,
            times: (0..len).map(|i| i as f64 * dt).collect(),
            provenance: vec![Provenance::Interpolated; len],
            states: Array3::zeros((len, batch, dim)),
            forward_calls: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.states.len_of(Axis(1))
    }

    pub fn dim(&self) -> usize {
        self.states.len_of(Axis(2))
    }

    /// States of batch member `b`, one row per time.
    pub fn trajectory(&self, b: usize) -> Array2<f64> {
        self.states.slice(s![.., b, ..]).to_owned()
    }

    /// Resample onto the finer grid `dt / factor`, filling new points by
    /// linear interpolation.
    pub fn refined(self, factor: u64) -> RolloutResult {
        if factor <= 1 {
            return self;
        }
        let f = factor as usize;
        let len = (self.len() - 1) * f + 1;
        let mut out = RolloutResult::empty(self.dt / factor as f64, len, self.batch(), self.dim());
        out.forward_calls = self.forward_calls.clone();
        for i in 0..self.len() {
            out.states.index_axis_mut(Axis(0), i * f).assign(&self.states.index_axis(Axis(0), i));
            out.provenance[i * f] = self.provenance[i];
            if i + 1 == self.len() {
                break;
            }
            let a = self.states.index_axis(Axis(0), i);
            let b = self.states.index_axis(Axis(0), i + 1);
            for j in 1..f {
                let w = j as f64 / factor as f64;
                let mut slot = out.states.index_axis_mut(Axis(0), i * f + j);
                ndarray::Zip::from(&mut slot).and(&a).and(&b).for_each(|o, &x, &y| {
                    *o = x + w * (y - x);
                });
            }
        }
        out
    }

    /// CSV with columns `time,level,x0,...` for batch member `b`.
    pub fn write_csv(&self, mut w: impl Write, b: usize) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.dim()).map(|k| format!("x{k}")).collect();
        writeln!(w, "time,level,{}", header.join(","))?;
        for (i, (t, p)) in self.times.iter().zip(&self.provenance).enumerate() {
            write!(w, "{t},{p}")?;
            for v in self.states.slice(s![i, b, ..]) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Vectorized hierarchical rollout of a single initial state.
pub fn multiscale_rollout(h: &Hierarchy, x0: &[f64], horizon: f64, dt_out: f64) -> Result<RolloutResult> {
    let x0 = ArrayView2::from_shape((1, x0.len()), x0).expect("row view");
    multiscale_rollout_batch(h, x0, horizon, dt_out)
}

/// Vectorized hierarchical rollout; every row of `x0` is an independent
/// initial state and all of them travel through the levels together.
///
/// `dt_out` must equal the finest step or divide it; intermediate grid points
/// are linearly interpolated.
pub fn multiscale_rollout_batch(
    h: &Hierarchy,
    x0: ArrayView2<f64>,
    horizon: f64,
    dt_out: f64,
) -> Result<RolloutResult> {
    let plan = plan_coupling(&h.dts(), horizon)?;
    let refine = output_factor(plan.tick, dt_out)?;
    let anchors = anchor_rollout(h, &plan, x0)?;
    Ok(anchors.refined(refine))
}

pub(crate) fn output_factor(finest: f64, dt_out: f64) -> Result<u64> {
    if !(dt_out > 0.0) {
        return Err(Error::invalid(format!("output step must be positive, got {dt_out}")));
    }
    match integral(finest / dt_out) {
        Some(q) if q >= 1 => Ok(q),
        _ => Err(Error::invalid(format!(
            "output step {dt_out} does not divide the finest model step {finest}"
        ))),
    }
}

/// Anchor states on the finest-step grid, following the planned levels.
pub(crate) fn anchor_rollout(h: &Hierarchy, plan: &CouplingPlan, x0: ArrayView2<f64>) -> Result<RolloutResult> {
    let (batch, dim) = x0.dim();
    if dim != h.dim() {
        return Err(Error::invalid(format!(
            "initial states have {dim} columns, models expect {}",
            h.dim()
        )));
    }
    let len = plan.horizon_ticks as usize + 1;
    let mut out = RolloutResult::empty(plan.tick, len, batch, dim);
    out.states.index_axis_mut(Axis(0), 0).assign(&x0);
    out.provenance[0] = Provenance::Initial;
    let mut filled: Vec<u64> = vec![0];

    for (level, model) in h.models().iter().enumerate() {
        let k = plan.steps[level] as usize;
        let size = plan.level_ticks[level];
        if k == 0 {
            out.forward_calls.push(0);
            continue;
        }
        let parents: Vec<u64> = filled
            .iter()
            .copied()
            .filter(|&t| t < plan.horizon_ticks)
            .collect();
        let mut stack = Array2::<f64>::zeros((parents.len() * batch, dim));
        for (j, &t) in parents.iter().enumerate() {
            stack
                .slice_mut(s![j * batch..(j + 1) * batch, ..])
                .assign(&out.states.index_axis(Axis(0), t as usize));
        }
        let steps = compose_forward(model, stack.view(), k).map_err(|e| match e {
            Error::Divergence { context, step } => Error::Divergence {
                context: format!("{context} (hierarchy level {level})"),
                step,
            },
            other => other,
        })?;
        out.forward_calls.push(steps.len());
        let mut born = Vec::new();
        for (a, block) in steps.iter().enumerate() {
            let offset = (a as u64 + 1) * size;
            for (j, &t) in parents.iter().enumerate() {
                let tick = t + offset;
                if tick > plan.horizon_ticks {
                    continue;
                }
                out.states
                    .index_axis_mut(Axis(0), tick as usize)
                    .assign(&block.slice(s![j * batch..(j + 1) * batch, ..]));
                out.provenance[tick as usize] = Provenance::Level(level);
                born.push(tick);
            }
        }
        filled.extend(born);
    }
    debug_assert_eq!(filled.len(), len);
    Ok(out)
}

/// Test oracle: every anchor computed independently by explicit nested
/// composition `F_{m-1}^{a_{m-1}}(... F_0^{a_0}(x0))`, without batching.
pub fn serial_oracle_rollout(h: &Hierarchy, x0: ArrayView2<f64>, horizon: f64) -> Result<RolloutResult> {
    let plan = plan_coupling(&h.dts(), horizon)?;
    let (batch, dim) = x0.dim();
    let len = plan.horizon_ticks as usize + 1;
    let mut out = RolloutResult::empty(plan.tick, len, batch, dim);
    for tick in 0..=plan.horizon_ticks {
        let digits = plan.digits(tick);
        let mut x = x0.to_owned();
        let mut prov = Provenance::Initial;
        for (level, &a) in digits.iter().enumerate() {
            for _ in 0..a {
                x = forward(&h.models()[level], x.view())?;
                prov = Provenance::Level(level);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::diverged("serial oracle rollout", tick as usize));
        }
        out.states.index_axis_mut(Axis(0), tick as usize).assign(&x);
        out.provenance[tick as usize] = prov;
    }
    Ok(out)
}

/// Piecewise-linear interpolation of `states` (one row per knot) at `queries`.
pub fn interpolate_states(times: &[f64], states: ArrayView2<f64>, queries: &[f64]) -> Result<Array2<f64>> {
    if times.len() != states.nrows() || times.is_empty() {
        return Err(Error::invalid("interpolation needs one state row per knot"));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("knot times must be strictly increasing"));
    }
    let (lo, hi) = (times[0], times[times.len() - 1]);
    let mut out = Array2::zeros((queries.len(), states.ncols()));
    for (row, &q) in out.outer_iter_mut().zip(queries) {
        if !(q >= lo && q <= hi) {
            return Err(Error::Extrapolation { query: q, lo, hi });
        }
        let i = times.partition_point(|&t| t <= q) - 1;
        let mut row = row;
        if times[i] == q {
            row.assign(&states.row(i));
            continue;
        }
        let w = (q - times[i]) / (times[i + 1] - times[i]);
        let (a, b) = (states.row(i), states.row(i + 1));
        ndarray::Zip::from(&mut row).and(&a).and(&b).for_each(|o, &x, &y| {
            *o = x + w * (y - x);
        });
    }
    Ok(out)
}

/// Outcome of [`cross_validate`]: the chosen contiguous index range
/// (ascending-`dt` indexing, inclusive) and every candidate scored.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub lower: usize,
    pub upper: usize,
    /// `(lower, upper, validation error)` for each candidate that could be evaluated.
    pub examined: Vec<(usize, usize, f64)>,
}

/// Validation error of the coupled rollout of `models` (any order).
pub fn ensemble_error(models: &[FlowMapModel], validation: &Dataset, horizon: f64) -> Result<f64> {
    let h = Hierarchy::new(models.to_vec())?;
    let pred = multiscale_rollout_batch(&h, validation.initial_states().view(), horizon, validation.dt())?;
    integrated_l2(&pred, &validation.trajectories)
}

/// Two-pass greedy choice of the best contiguous set of models.
///
/// `models` must be sorted by ascending `dt`. First `u` minimizes the error of
/// `{0..=u}`, then `l <= u` minimizes the error of `{l..=u}`. Ties go to the
/// smaller ensemble. Candidates that cannot be coupled or that diverge are
/// skipped with a warning.
pub fn cross_validate(models: &[FlowMapModel], validation: &Dataset, horizon: f64) -> Result<Selection> {
    if models.is_empty() {
        return Err(Error::config("cross-validation needs at least one model"));
    }
    if models.windows(2).any(|w| !(w[0].dt < w[1].dt)) {
        return Err(Error::config("cross-validation expects models sorted by ascending dt"));
    }
    let mut examined = Vec::new();
    let mut score = |l: usize, u: usize| -> Option<f64> {
        if let Some(&(_, _, e)) = examined.iter().find(|&&(a, b, _)| a == l && b == u) {
            return Some(e);
        }
        match ensemble_error(&models[l..=u], validation, horizon) {
            Ok(e) => {
                examined.push((l, u, e));
                Some(e)
            }
            Err(err) => {
                log::warn!("skipping ensemble {l}..={u}: {err}");
                None
            }
        }
    };

    let mut best_upper: Option<(usize, f64)> = None;
    for u in 0..models.len() {
        if let Some(e) = score(0, u) {
            if best_upper.is_none_or(|(_, b)| e < b) {
                best_upper = Some((u, e));
            }
        }
    }
    let (upper, upper_err) =
        best_upper.ok_or_else(|| Error::config("no candidate ensemble could be evaluated"))?;

    let mut best = (0, upper_err);
    for l in 1..=upper {
        if let Some(e) = score(l, upper) {
            if e <= best.1 {
                best = (l, e);
            }
        }
    }
    Ok(Selection {
        lower: best.0,
        upper,
        examined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Domain};
    use ndarray::array;

    fn random_model(dt: f64, seed: u64) -> FlowMapModel {
        let mut rng = substream(seed, Domain::WeightInit, 0);
        let mut m = FlowMapModel::random("t", dt, vec![2, 8, 2], &mut rng).unwrap();
        for w in m.params.weights.iter_mut() {
            *w *= 0.3;
        }
        m
    }

    #[test]
    fn plan_examples() {
        let plan = plan_coupling(&[4.0, 1.0], 10.0).unwrap();
        assert_eq!(plan.steps, vec![2, 3]);
        assert_eq!(plan.anchor_ticks(), (0..=10).collect::<Vec<_>>());

        let single = plan_coupling(&[0.5], 5.0).unwrap();
        assert_eq!(single.steps, vec![10]);
        let times = single.anchor_times();
        assert_eq!(times.len(), 11);
        assert!(times.iter().enumerate().all(|(i, &t)| (t - 0.5 * i as f64).abs() < 1e-12));

        assert!(matches!(plan_coupling(&[4.0, 3.0], 12.0), Err(Error::Config(_))));
        assert!(plan_coupling(&[1.0, 1.0], 4.0).is_err());
        assert!(plan_coupling(&[4.0, 1.0], 3.0).is_err());
        assert!(plan_coupling(&[4.0, 1.0], 10.5).is_err());
    }

    #[test]
    fn plan_handles_decimal_steps() {
        let dts = [0.016, 0.064, 0.256, 1.024];
        let plan = plan_coupling(&dts, 25.6).unwrap();
        assert_eq!(plan.horizon_ticks, 1600);
        assert_eq!(plan.steps, vec![25, 3, 3, 3]);
        assert_eq!(plan.anchor_ticks().len(), 1601);
    }

    #[test]
    fn single_model_matches_compose_forward() {
        let m = random_model(0.5, 1);
        let h = Hierarchy::new(vec![m.clone()]).unwrap();
        let x0 = [0.3, -0.4];
        let res = multiscale_rollout(&h, &x0, 5.0, 0.5).unwrap();
        let composed = compose_forward(&m, array![[0.3, -0.4]].view(), 10).unwrap();
        assert_eq!(res.len(), 11);
        for (k, c) in composed.iter().enumerate() {
            assert_eq!(res.states.slice(s![k + 1, .., ..]), c.view());
        }
        assert_eq!(res.forward_calls, vec![10]);
    }

    #[test]
    fn two_level_anchor_is_nested_composition() {
        let coarse = random_model(4.0, 2);
        let fine = random_model(1.0, 3);
        let h = Hierarchy::new(vec![fine.clone(), coarse.clone()]).unwrap();
        let x0 = array![[0.2, 0.9]];
        let res = multiscale_rollout(&h, &[0.2, 0.9], 8.0, 1.0).unwrap();
        let expected = forward(&fine, forward(&coarse, x0.view()).unwrap().view()).unwrap();
        for k in 0..2 {
            assert!((res.states[[5, 0, k]] - expected[[0, k]]).abs() < 1e-12);
        }
        assert_eq!(res.provenance[5], Provenance::Level(1));
        assert_eq!(res.provenance[4], Provenance::Level(0));
        assert_eq!(res.provenance[0], Provenance::Initial);
        assert_eq!(res.forward_calls, vec![2, 3]);
    }

    #[test]
    fn identity_models_keep_initial_state() {
        let h = Hierarchy::new(vec![
            FlowMapModel::zeros("t", 0.1, vec![2, 4, 2]).unwrap(),
            FlowMapModel::zeros("t", 0.4, vec![2, 4, 2]).unwrap(),
        ])
        .unwrap();
        let res = multiscale_rollout(&h, &[1.5, -2.5], 2.0, 0.05).unwrap();
        assert_eq!(res.len(), 41);
        for i in 0..res.len() {
            assert_eq!(res.states.slice(s![i, 0, ..]).to_vec(), vec![1.5, -2.5]);
        }
        assert_eq!(res.provenance[1], Provenance::Interpolated);
        assert_eq!(res.provenance[2], Provenance::Level(1));
    }

    #[test]
    fn oracle_agrees_with_vectorized_rollout() {
        let h = Hierarchy::new(vec![random_model(0.1, 4), random_model(0.3, 5), random_model(1.2, 6)]).unwrap();
        let x0 = array![[0.1, 0.2], [-0.7, 0.4]];
        let fast = multiscale_rollout_batch(&h, x0.view(), 3.0, 0.1).unwrap();
        let slow = serial_oracle_rollout(&h, x0.view(), 3.0).unwrap();
        assert_eq!(fast.provenance, slow.provenance);
        for (a, b) in fast.states.iter().zip(slow.states.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let single = Hierarchy::new(vec![random_model(0.2, 7)]).unwrap();
        let composed = compose_forward(&single.models()[0], x0.view(), 5).unwrap();
        let oracle = serial_oracle_rollout(&single, x0.view(), 1.0).unwrap();
        assert_eq!(oracle.states.index_axis(Axis(0), 5), composed[4].view());
    }

    #[test]
    fn hierarchy_rejects_mismatches() {
        assert!(Hierarchy::new(vec![]).is_err());
        assert!(Hierarchy::new(vec![random_model(4.0, 1), random_model(3.0, 1)]).is_err());
        let three = FlowMapModel::zeros("t", 1.0, vec![3, 4, 3]).unwrap();
        assert!(Hierarchy::new(vec![random_model(2.0, 1), three]).is_err());
        let h = Hierarchy::new(vec![random_model(1.0, 1)]).unwrap();
        assert!(multiscale_rollout(&h, &[0.0, 0.0], 4.0, 0.3).is_err());
        assert!(multiscale_rollout(&h, &[0.0, 0.0], 4.0, 2.0).is_err());
    }

    #[test]
    fn interpolation() {
        let times = [0.0, 1.0, 3.0];
        let states = array![[0.0, 2.0], [1.0, 4.0], [5.0, -4.0]];
        let out = interpolate_states(&times, states.view(), &[0.5, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![0.5, 3.0]);
        assert_eq!(out.row(1), states.row(1));
        assert_eq!(out.row(2).to_vec(), vec![3.0, 0.0]);
        assert_eq!(out.row(3), states.row(2));
        assert!(matches!(
            interpolate_states(&times, states.view(), &[3.5]),
            Err(Error::Extrapolation { .. })
        ));
        assert!(interpolate_states(&[0.0, 0.0], states.slice(s![..2, ..]), &[0.0]).is_err());
    }

    #[test]
    fn interpolation_reproduces_lines() {
        let v = [0.7, -1.3];
        let times: Vec<f64> = (0..6).map(|i| i as f64 * 0.4).collect();
        let states = Array2::from_shape_fn((6, 2), |(i, k)| times[i] * v[k]);
        let queries = [0.13, 0.4, 1.77, 1.999];
        let out = interpolate_states(&times, states.view(), &queries).unwrap();
        for (r, &q) in queries.iter().enumerate() {
            for k in 0..2 {
                assert!((out[[r, k]] - q * v[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_export() {
        let h = Hierarchy::new(vec![FlowMapModel::zeros("t", 1.0, vec![2, 2, 2]).unwrap()]).unwrap();
        let res = multiscale_rollout(&h, &[1.0, 2.0], 2.0, 0.5).unwrap();
        let mut buf = Vec::new();
        res.write_csv(&mut buf, 0).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "time,level,x0,x1");
        assert_eq!(lines[1], "0,-1,1,2");
        assert_eq!(lines[2], "0.5,interp,1,2");
        assert_eq!(lines[3], "1,0,1,2");
        assert_eq!(lines.len(), 6);
    }
}
