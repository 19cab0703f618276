//! Shared helpers for the integration and acceptance tests.
#![allow(dead_code)]

use hits::dataset::Trajectory;
use hits::flowmap::{loss_and_grad, FlowMapModel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random residual MLP with weights uniform in `(-scale/sqrt(fan_in), scale/sqrt(fan_in))`.
pub fn random_model(rng: &mut impl Rng, dim: usize, hidden: &[usize], dt: f64, scale: f64) -> FlowMapModel {
    let dims: Vec<usize> = std::iter::once(dim)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(dim))
        .collect();
    let mut m = FlowMapModel::zeros("test", dt, dims.clone()).unwrap();
    for (l, w) in m.params.weights.iter_mut().enumerate() {
        let bound = scale / (dims[l] as f64).sqrt();
        w.mapv_inplace(|_| rng.random_range(-bound..bound));
    }
    for b in m.params.biases.iter_mut() {
        b.mapv_inplace(|_| rng.random_range(-0.5 * scale..0.5 * scale));
    }
    m
}

/// Scalar-loop forward pass, independent of the library's matrix code.
/// Appends the sign pattern of every hidden pre-activation to `mask`.
pub fn oracle_forward(m: &FlowMapModel, x: &[f64], mask: &mut Vec<bool>) -> Vec<f64> {
    let layers = m.params.weights.len();
    let mut a = x.to_vec();
    for l in 0..layers {
        let w = &m.params.weights[l];
        let b = &m.params.biases[l];
        let (fan_in, fan_out) = w.dim();
        let mut z = vec![0.0; fan_out];
        for j in 0..fan_out {
            let mut s = b[j];
            for i in 0..fan_in {
                s += a[i] * w[[i, j]];
            }
            z[j] = s;
        }
        if l + 1 < layers {
            for v in z.iter_mut() {
                mask.push(*v > 0.0);
                *v = v.max(0.0);
            }
        }
        a = z;
    }
    x.iter().zip(&a).map(|(x, d)| x + d).collect()
}

/// Multi-step loss computed with [`oracle_forward`], plus the ReLU masks seen
/// along every composed step.
pub fn oracle_loss(m: &FlowMapModel, trajs: &[Trajectory], p: usize) -> (f64, Vec<bool>) {
    let mut mask = Vec::new();
    let mut total = 0.0;
    for tr in trajs {
        let mut x = tr.state(0).to_vec();
        for k in 1..=p {
            x = oracle_forward(m, &x, &mut mask);
            total += x.iter().zip(tr.state(k)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    (total / (trajs.len() * p) as f64, mask)
}

/// Random target trajectories (not necessarily dynamics) of `p` steps.
pub fn random_trajectories(rng: &mut impl Rng, n: usize, dim: usize, p: usize, dt: f64) -> Vec<Trajectory> {
    (0..n)
        .map(|_| {
            let states = (0..(p + 1) * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            Trajectory::new(0.0, dt, dim, states).unwrap()
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub failures: Vec<String>,
    /// Largest `|a - fd| / max(|a|, |fd|, floor)` seen.
    pub worst: f64,
    /// `|loss - oracle loss|`.
    pub loss_error: f64,
}

/// Compare analytic gradients against central differences with step `h`.
///
/// Entries where a `±h` perturbation flips any ReLU along the composed
/// rollout are skipped: the loss is not differentiable across the kink.
pub fn gradient_check(m: &FlowMapModel, trajs: &[Trajectory], p: usize, h: f64, rel: f64, floor: f64) -> GradCheck {
    let (loss, grad) = loss_and_grad(m, trajs, p).unwrap();
    let (oracle, base_mask) = oracle_loss(m, trajs, p);
    let mut out = GradCheck {
        loss_error: (loss - oracle).abs(),
        ..Default::default()
    };
    let analytic: Vec<f64> = grad.iter().copied().collect();
    for (k, &a) in analytic.iter().enumerate() {
        let shifted = |delta: f64| {
            let mut mm = m.clone();
            *mm.params.iter_mut().nth(k).unwrap() += delta;
            let (_, mask) = oracle_loss(&mm, trajs, p);
            (loss_and_grad(&mm, trajs, p).unwrap().0, mask)
        };
        let (lp, mp) = shifted(h);
        let (lm, mm) = shifted(-h);
        if mp != base_mask || mm != base_mask {
            out.skipped_kinks += 1;
            continue;
        }
        let fd = (lp - lm) / (2.0 * h);
        let scale = a.abs().max(fd.abs()).max(floor);
        let r = (a - fd).abs() / scale;
        out.worst = out.worst.max(r);
        out.checked += 1;
        if r > rel {
            out.failures.push(format!("param {k}: analytic {a:e}, fd {fd:e}"));
        }
    }
    out
}
