use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{FlowMapModel, Params};
use crate::dataset::{Dataset, Trajectory};
use crate::rng::{substream, Domain};
use crate::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

/// Full-batch training up to this many trajectories under [`BatchPolicy::Auto`].
const AUTO_FULL_BATCH_LIMIT: usize = 4096;
const AUTO_MINIBATCH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BatchPolicy {
    /// Full batch up to 4096 trajectories, otherwise shuffled minibatches of 1024.
    #[default]
    Auto,
    Full,
    Minibatch(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Every layer uniform on `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    #[default]
    Uniform,
    /// As `Uniform`, but the output layer starts at zero so the untrained
    /// model is the identity map.
    UniformZeroOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Training stops once the one-step MSE drops below this value.
    pub stop_threshold: f64,
    /// Number of composed steps in the loss.
    pub p_steps: usize,
    pub seed: u64,
    pub batch_policy: BatchPolicy,
    pub init: InitScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 100_000,
            stop_threshold: 1e-8,
            p_steps: 5,
            seed: 0,
            batch_policy: BatchPolicy::Auto,
            init: InitScheme::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be positive"));
        }
        if !(self.stop_threshold > 0.0) {
            return Err(Error::config("stop_threshold must be positive"));
        }
        if self.p_steps == 0 {
            return Err(Error::config("p_steps must be at least 1"));
        }
        if self.batch_policy == BatchPolicy::Minibatch(0) {
            return Err(Error::config("minibatch size must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub t: u64,
}

impl AdamState {
    pub fn new(like: &Params) -> Self {
        AdamState {
            m: Params::zeros_like(like),
            v: Params::zeros_like(like),
            t: 0,
        }
    }
}

/// One Adam step (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`, bias-corrected).
pub fn adam_update(params: &mut Params, grads: &Params, st: &mut AdamState, lr: f64) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&st.m) || !params.same_shape(&st.v) {
        return Err(Error::invalid("adam_update: parameter, gradient and moment shapes differ"));
    }
    st.t += 1;
    let c1 = 1.0 - BETA1.powi(st.t as i32);
    let c2 = 1.0 - BETA2.powi(st.t as i32);
    let moments = st.m.iter_mut().zip(st.v.iter_mut());
    for ((p, &g), (m, v)) in params.iter_mut().zip(grads.iter()).zip(moments) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}

/// Per-step target batches: `targets[k]` stacks state `k` of every trajectory.
fn stack_targets(trajs: &[&Trajectory], p: usize) -> Result<Vec<Array2<f64>>> {
    let d = trajs
        .first()
        .map(|t| t.dim())
        .ok_or_else(|| Error::invalid("no trajectories"))?;
    if let Some(i) = trajs.iter().position(|t| t.len() < p + 1) {
        return Err(Error::invalid(format!(
            "trajectory {i} has {} states, loss with p={p} needs {}",
            trajs[i].len(),
            p + 1
        )));
    }
    Ok((0..=p)
        .map(|k| {
            let mut y = Array2::zeros((trajs.len(), d));
            for (row, t) in y.outer_iter_mut().zip(trajs) {
                row.into_slice().unwrap().copy_from_slice(t.state(k));
            }
            y
        })
        .collect())
}

pub(crate) struct LossEval {
    pub loss: f64,
    pub one_step: f64,
    pub grad: Params,
}

/// Multi-step loss `1/(n p) sum_i sum_k |xhat_k - x_k|^2` and its exact
/// gradient, back-propagated through all `p` composed steps.
pub(crate) fn eval_loss(m: &FlowMapModel, targets: &[Array2<f64>]) -> LossEval {
    let p = targets.len() - 1;
    let n = targets[0].nrows();
    let scale = 1.0 / (n as f64 * p as f64);

    let mut caches = Vec::with_capacity(p);
    let mut preds = Vec::with_capacity(p);
    let mut x = targets[0].clone();
    for _ in 0..p {
        let (mut inc, cache) = m.increment_cached(x.view());
        inc += &x;
        caches.push(cache);
        preds.push(inc.clone());
        x = inc;
    }

    let mut loss = 0.0;
    let mut one_step = 0.0;
    let mut residuals = Vec::with_capacity(p);
    for (k, pred) in preds.iter().enumerate() {
        let r = pred - &targets[k + 1];
        let sq: f64 = r.iter().map(|v| v * v).sum();
        loss += sq;
        if k == 0 {
            one_step = sq / n as f64;
        }
        residuals.push(r);
    }
    loss *= scale;

    let mut grad = Params::zeros_like(&m.params);
    let mut g = Array2::<f64>::zeros(targets[0].raw_dim());
    for k in (0..p).rev() {
        g.scaled_add(2.0 * scale, &residuals[k]);
        let dx = m.backward(&caches[k], &g, &mut grad);
        g += &dx;
    }
    LossEval { loss, one_step, grad }
}

/// Loss and parameter gradient over the first `p + 1` states of each trajectory.
pub fn loss_and_grad(m: &FlowMapModel, trajectories: &[Trajectory], p: usize) -> Result<(f64, Params)> {
    if p == 0 {
        return Err(Error::invalid("loss needs p >= 1"));
    }
    let refs: Vec<&Trajectory> = trajectories.iter().collect();
    let targets = stack_targets(&refs, p)?;
    if targets[0].ncols() != m.dim() {
        return Err(Error::invalid("trajectory dimension does not match model"));
    }
    let eval = eval_loss(m, &targets);
    Ok((eval.loss, eval.grad))
}

/// Mean squared one-step prediction error `1/n sum_i |xhat_1 - x_1|^2`.
pub fn one_step_mse(m: &FlowMapModel, trajectories: &[Trajectory]) -> Result<f64> {
    let refs: Vec<&Trajectory> = trajectories.iter().collect();
    let targets = stack_targets(&refs, 1)?;
    let pred = super::model::forward(m, targets[0].view())?;
    let sq: f64 = (&pred - &targets[1]).iter().map(|v| v * v).sum();
    Ok(sq / targets[0].nrows() as f64)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    /// Training loss per epoch.
    pub losses: Vec<f64>,
    /// One-step MSE per epoch, measured before that epoch's update.
    pub one_step: Vec<f64>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.losses.len()
    }
}

/// Train a flow map of the given architecture on `dataset` with Adam.
///
/// Each epoch evaluates the loss before updating; training stops when the
/// one-step MSE of the current parameters falls below `cfg.stop_threshold`
/// (the returned model is the one that met it) or after `cfg.max_epochs`.
pub fn train(
    dataset: &Dataset,
    layer_dims: &[usize],
    dt: f64,
    cfg: &TrainConfig,
) -> Result<(FlowMapModel, TrainHistory)> {
    cfg.validate()?;
    if (dataset.dt() - dt).abs() > 1e-9 * dt {
        return Err(Error::invalid(format!(
            "dataset dt {} does not match model dt {dt}",
            dataset.dt()
        )));
    }
    if dataset.steps() < cfg.p_steps {
        return Err(Error::invalid(format!(
            "dataset has {} steps per trajectory, p_steps is {}",
            dataset.steps(),
            cfg.p_steps
        )));
    }
    if layer_dims.first() != Some(&dataset.dim()) {
        return Err(Error::Inconsistent(format!(
            "architecture {layer_dims:?} does not match state dimension {}",
            dataset.dim()
        )));
    }

    let mut init_rng = substream(cfg.seed, Domain::WeightInit, 0);
    let mut model = FlowMapModel::random(&dataset.system, dt, layer_dims.to_vec(), &mut init_rng)?;
    if cfg.init == InitScheme::UniformZeroOutput {
        model.params.weights.last_mut().unwrap().fill(0.0);
        model.params.biases.last_mut().unwrap().fill(0.0);
    }
    model.train_config_digest = Some(cfg.digest());

    let n = dataset.len();
    let batch = match cfg.batch_policy {
        BatchPolicy::Full => n,
        BatchPolicy::Minibatch(b) => b.min(n),
        BatchPolicy::Auto if n <= AUTO_FULL_BATCH_LIMIT => n,
        BatchPolicy::Auto => AUTO_MINIBATCH,
    };
    let refs: Vec<&Trajectory> = dataset.trajectories.iter().collect();
    let all_targets = stack_targets(&refs, cfg.p_steps)?;

    let mut adam = AdamState::new(&model.params);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.max_epochs {
        let (loss, one_step) = if batch == n {
            let eval = eval_loss(&model, &all_targets);
            check_finite(epoch, eval.loss)?;
            if eval.one_step < cfg.stop_threshold {
                history.losses.push(eval.loss);
                history.one_step.push(eval.one_step);
                history.stopped_early = true;
                break;
            }
            adam_update(&mut model.params, &eval.grad, &mut adam, cfg.learning_rate)?;
            (eval.loss, eval.one_step)
        } else {
            // The stop check uses the whole set before any update this epoch.
            let whole = eval_loss(&model, &all_targets[..2]);
            check_finite(epoch, whole.loss)?;
            if whole.one_step < cfg.stop_threshold {
                history.losses.push(whole.loss);
                history.one_step.push(whole.one_step);
                history.stopped_early = true;
                break;
            }
            order.shuffle(&mut substream(cfg.seed, Domain::Shuffle, epoch as u64));
            let mut total = 0.0;
            for chunk in order.chunks(batch) {
                let targets: Vec<Array2<f64>> = all_targets
                    .iter()
                    .map(|t| t.select(Axis(0), chunk))
                    .collect();
                let eval = eval_loss(&model, &targets);
                check_finite(epoch, eval.loss)?;
                total += eval.loss * chunk.len() as f64;
                adam_update(&mut model.params, &eval.grad, &mut adam, cfg.learning_rate)?;
            }
            (total / n as f64, whole.one_step)
        };
        history.losses.push(loss);
        history.one_step.push(one_step);
        if epoch % 1000 == 0 {
            log::debug!("dt={dt} epoch {epoch}: loss {loss:.3e}, one-step {one_step:.3e}");
        }
    }
    if !model.params.is_finite() {
        return Err(Error::TrainingFailure {
            epoch: history.epochs(),
            reason: "parameters became non-finite".into(),
        });
    }
    Ok((model, history))
}

fn check_finite(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingFailure {
            epoch,
            reason: format!("loss is {loss}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, Split};
    use crate::dynamics::{Region, SystemSpec};
    use ndarray::array;

    fn rollout_as_data(m: &FlowMapModel, x0: &[Vec<f64>], p: usize) -> Vec<Trajectory> {
        x0.iter()
            .map(|x| {
                let start = Array2::from_shape_vec((1, x.len()), x.clone()).unwrap();
                let steps = super::super::compose_forward(m, start.view(), p).unwrap();
                let mut flat = x.clone();
                for s in steps {
                    flat.extend(s.iter());
                }
                Trajectory::new(0.0, m.dt, x.len(), flat).unwrap()
            })
            .collect()
    }

    #[test]
    fn perfect_model_has_zero_loss_and_gradient() {
        let mut rng = substream(3, Domain::WeightInit, 0);
        let m = FlowMapModel::random("t", 0.1, vec![2, 8, 2], &mut rng).unwrap();
        let data = rollout_as_data(&m, &[vec![0.1, 0.2], vec![-0.5, 0.3]], 3);
        let (loss, grad) = loss_and_grad(&m, &data, 3).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn identity_on_constant_data() {
        let m = FlowMapModel::zeros("t", 0.1, vec![2, 4, 2]).unwrap();
        let data = vec![Trajectory::new(0.0, 0.1, 2, vec![0.5, -1.0].repeat(4)).unwrap()];
        assert_eq!(loss_and_grad(&m, &data, 3).unwrap().0, 0.0);
        assert!(loss_and_grad(&m, &data, 4).is_err());
    }

    #[test]
    fn loss_matches_hand_computation() {
        // zero model predicts x0 at every step
        let m = FlowMapModel::zeros("t", 1.0, vec![1, 2, 1]).unwrap();
        let data = vec![
            Trajectory::new(0.0, 1.0, 1, vec![0.0, 1.0, 2.0]).unwrap(),
            Trajectory::new(0.0, 1.0, 1, vec![1.0, 1.0, 3.0]).unwrap(),
        ];
        let (loss, _) = loss_and_grad(&m, &data, 2).unwrap();
        // squared errors: 1 + 4 + 0 + 4, over n * p = 4
        assert!((loss - 9.0 / 4.0).abs() < 1e-15);
        assert!((one_step_mse(&m, &data).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut params = Params {
            weights: vec![array![[1.0, -2.0]]],
            biases: vec![array![0.5, 0.0]],
        };
        let before = params.clone();
        let zero = Params::zeros_like(&params);
        let mut st = AdamState::new(&params);
        adam_update(&mut params, &zero, &mut st, 1e-3).unwrap();
        assert_eq!(params, before);
        assert_eq!(st.t, 1);

        let mut grads = Params::zeros_like(&params);
        for (i, g) in grads.iter_mut().enumerate() {
            *g = if i % 2 == 0 { 0.37 } else { -4.2 };
        }
        let mut st = AdamState::new(&params);
        adam_update(&mut params, &grads, &mut st, 1e-3).unwrap();
        for ((p, b), g) in params.iter().zip(before.iter()).zip(grads.iter()) {
            assert!(((p - b) + 1e-3 * g.signum()).abs() < 1e-3 * 1e-4);
        }
        let wrong = Params::zeros(&[3, 1]);
        assert!(adam_update(&mut params, &wrong, &mut st, 1e-3).is_err());
    }

    #[test]
    fn adam_steps_compose() {
        let start = Params {
            weights: vec![array![[0.2]]],
            biases: vec![array![-0.1]],
        };
        let g1 = Params {
            weights: vec![array![[1.5]]],
            biases: vec![array![-0.3]],
        };
        let g2 = Params {
            weights: vec![array![[0.4]]],
            biases: vec![array![2.0]],
        };
        let mut a = start.clone();
        let mut sa = AdamState::new(&a);
        adam_update(&mut a, &g1, &mut sa, 0.01).unwrap();
        adam_update(&mut a, &g2, &mut sa, 0.01).unwrap();

        // the recurrence written out for the weight entry
        let (w0, ga, gb) = (0.2f64, 1.5f64, 0.4f64);
        let m1 = 0.1 * ga;
        let v1 = 0.001 * ga * ga;
        let w1 = w0 - 0.01 * (m1 / 0.1) / ((v1 / 0.001).sqrt() + 1e-8);
        let m2 = 0.9 * m1 + 0.1 * gb;
        let v2 = 0.999 * v1 + 0.001 * gb * gb;
        let w2 = w1 - 0.01 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((a.weights[0][[0, 0]] - w2).abs() < 1e-15);
        assert_eq!(sa.t, 2);
    }

    #[test]
    fn constant_data_stops_immediately() {
        let sys = SystemSpec::custom("still", 2, Region::cube(2, -1.0, 1.0), |_, o| o.fill(0.0));
        let ds = build_dataset(&sys, &sys.default_region, 0.1, 5, 20, 1).unwrap();
        let cfg = TrainConfig {
            init: InitScheme::UniformZeroOutput,
            ..Default::default()
        };
        let (m, hist) = train(&ds, &[2, 8, 2], 0.1, &cfg).unwrap();
        assert_eq!(hist.epochs(), 1);
        assert!(hist.stopped_early);
        assert_eq!(hist.one_step[0], 0.0);
        assert!(m.params.weights[1].iter().all(|&w| w == 0.0));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let sys = SystemSpec::harmonic();
        let ds = build_dataset(&sys, &Region::cube(2, -1.0, 1.0), 0.1, 5, 32, 4).unwrap();
        let cfg = TrainConfig {
            max_epochs: 200,
            seed: 9,
            ..Default::default()
        };
        let (m1, h1) = train(&ds, &[2, 16, 2], 0.1, &cfg).unwrap();
        let (m2, h2) = train(&ds, &[2, 16, 2], 0.1, &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert!(h1.losses.last().unwrap() < &h1.losses[0]);

        let mini = TrainConfig {
            batch_policy: BatchPolicy::Minibatch(10),
            max_epochs: 20,
            ..cfg.clone()
        };
        let (a, _) = train(&ds, &[2, 16, 2], 0.1, &mini).unwrap();
        let (b, _) = train(&ds, &[2, 16, 2], 0.1, &mini).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let sys = SystemSpec::harmonic();
        let mut ds = build_dataset(&sys, &Region::cube(2, -1.0, 1.0), 0.1, 3, 4, 4).unwrap();
        ds.split = Split::Train;
        let cfg = TrainConfig::default();
        assert!(train(&ds, &[2, 8, 2], 0.1, &cfg).is_err()); // p_steps 5 > 3
        let cfg3 = TrainConfig { p_steps: 3, ..cfg.clone() };
        assert!(train(&ds, &[2, 8, 2], 0.2, &cfg3).is_err());
        assert!(train(&ds, &[3, 8, 3], 0.1, &cfg3).is_err());
        let zero_p = TrainConfig { p_steps: 0, ..cfg };
        assert!(matches!(zero_p.validate(), Err(Error::Config(_))));
    }
}
