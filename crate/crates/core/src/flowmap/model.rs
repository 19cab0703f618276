use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Weights and biases of an MLP, or anything shaped like them (gradients,
/// optimizer moments). Weight `l` has shape `(fan_in, fan_out)` and maps a
/// batch of row vectors by right-multiplication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Params {
    pub fn zeros(layer_dims: &[usize]) -> Self {
        Params {
            weights: layer_dims
                .windows(2)
                .map(|w| Array2::zeros((w[0], w[1])))
                .collect(),
            biases: layer_dims[1..].iter().map(|&n| Array1::zeros(n)).collect(),
        }
    }

    pub fn zeros_like(other: &Params) -> Self {
        Params {
            weights: other.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: other.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.weights.len() == other.weights.len()
            && self.biases.len() == other.biases.len()
            && self.weights.iter().zip(&other.weights).all(|(a, b)| a.dim() == b.dim())
            && self.biases.iter().zip(&other.biases).all(|(a, b)| a.dim() == b.dim())
    }

    /// All scalars, weights first then biases, layer by layer.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .flat_map(|w| w.iter_mut())
            .chain(self.biases.iter_mut().flat_map(|b| b.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// A residual network approximating the flow map over one step of size `dt`.
///
/// Hidden layers use ReLU (derivative 0 at exactly 0), the output layer is
/// linear, and the input is added back to the output.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMapModel {
    pub system: String,
    pub dt: f64,
    layer_dims: Vec<usize>,
    pub params: Params,
    /// Digest of the training configuration, when the model was trained here.
    pub train_config_digest: Option<String>,
}

impl FlowMapModel {
    pub fn from_params(system: &str, dt: f64, layer_dims: Vec<usize>, params: Params) -> Result<Self> {
        check_layer_dims(&layer_dims)?;
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid(format!("model step size must be positive, got {dt}")));
        }
        let expected = Params::zeros(&layer_dims);
        if !expected.same_shape(&params) {
            return Err(Error::Inconsistent(format!(
                "parameter shapes do not match layer_dims {layer_dims:?}"
            )));
        }
        if !params.is_finite() {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(FlowMapModel {
            system: system.to_string(),
            dt,
            layer_dims,
            params,
            train_config_digest: None,
        })
    }

    /// All-zero parameters: the identity map.
    pub fn zeros(system: &str, dt: f64, layer_dims: Vec<usize>) -> Result<Self> {
        check_layer_dims(&layer_dims)?;
        let params = Params::zeros(&layer_dims);
        Self::from_params(system, dt, layer_dims, params)
    }

    /// Weights and biases uniform on `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn random(system: &str, dt: f64, layer_dims: Vec<usize>, rng: &mut impl Rng) -> Result<Self> {
        check_layer_dims(&layer_dims)?;
        let mut params = Params::zeros(&layer_dims);
        for (w, b) in params.weights.iter_mut().zip(params.biases.iter_mut()) {
            let bound = 1.0 / (w.nrows() as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-bound..bound));
            b.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Self::from_params(system, dt, layer_dims, params)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// The learned increment `net(x)` for a batch of states.
    pub(crate) fn increment(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.num_layers() - 1;
        let mut a = x.to_owned();
        for (l, (w, b)) in self.params.weights.iter().zip(&self.params.biases).enumerate() {
            let mut z = a.dot(w);
            z += b;
            if l < last {
                z.mapv_inplace(relu);
            }
            a = z;
        }
        a
    }

    /// Forward pass keeping every layer input and hidden pre-activation.
    pub(crate) fn increment_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerCache) {
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(last);
        let mut a = x.to_owned();
        for (l, (w, b)) in self.params.weights.iter().zip(&self.params.biases).enumerate() {
            let mut z = a.dot(w);
            z += b;
            inputs.push(a);
            if l < last {
                pre.push(z.clone());
                z.mapv_inplace(relu);
            }
            a = z;
        }
        (a, LayerCache { inputs, pre })
    }

    /// Accumulate parameter gradients for upstream gradient `g_out` on the
    /// increment and return the gradient with respect to the network input.
    pub(crate) fn backward(&self, cache: &LayerCache, g_out: &Array2<f64>, grad: &mut Params) -> Array2<f64> {
        let mut dz = g_out.clone();
        for l in (0..self.num_layers()).rev() {
            let w = &self.params.weights[l];
            grad.weights[l] += &cache.inputs[l].t().dot(&dz);
            grad.biases[l] += &dz.sum_axis(Axis(0));
            let mut da = dz.dot(&w.t());
            if l > 0 {
                Zip::from(&mut da)
                    .and(&cache.pre[l - 1])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0
                        }
                    });
            }
            dz = da;
        }
        dz
    }
}

pub(crate) struct LayerCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl LayerCache {
    /// Hidden pre-activations, one matrix per hidden layer.
    #[allow(dead_code)]
    pub(crate) fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn check_layer_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::invalid(format!(
            "layer_dims must have at least two positive entries, got {dims:?}"
        )));
    }
    if dims[0] != dims[dims.len() - 1] {
        return Err(Error::Inconsistent(format!(
            "residual network needs equal input and output widths, got {dims:?}"
        )));
    }
    Ok(())
}

/// One step of the flow map for a batch of states (rows).
pub fn forward(m: &FlowMapModel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != m.dim() {
        return Err(Error::invalid(format!(
            "batch has {} columns, model expects {}",
            x.ncols(),
            m.dim()
        )));
    }
    let mut out = m.increment(x);
    out += &x;
    Ok(out)
}

/// `k` repeated applications of [`forward`]; returns every intermediate batch.
pub fn compose_forward(m: &FlowMapModel, x: ArrayView2<f64>, k: usize) -> Result<Vec<Array2<f64>>> {
    if k == 0 {
        return Err(Error::invalid("compose_forward needs k >= 1"));
    }
    let mut out: Vec<Array2<f64>> = Vec::with_capacity(k);
    for step in 1..=k {
        let next = match out.last() {
            Some(prev) => forward(m, prev.view())?,
            None => forward(m, x)?,
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::diverged(format!("flow map dt={}", m.dt), step));
        }
        out.push(next);
    }
    Ok(out)
}
