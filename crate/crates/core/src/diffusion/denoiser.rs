//! A small fully connected noise-prediction network with hand-written
//! reverse-mode gradients.
//!
//! Input features are `[t/T, sin(pi 2^k t/T), cos(pi 2^k t/T) (k < F), x_t, c]`.
//! Hidden layers use a smooth activation that vanishes at zero; the output
//! layer is affine. Parameters are one flat vector, laid out layer by layer
//! as a row-major weight matrix `[out x in]` followed by the bias `[out]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DiffusionError, LatentSample, PromptCondition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let th = z.tanh();
                1.0 - th * th
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub data_dim: usize,
    pub cond_dim: usize,
    /// Number of diffusion steps used to normalise the timestep input.
    pub time_scale: usize,
    /// Number of sinusoidal frequencies in the timestep encoding.
    pub time_frequencies: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    /// Two hidden layers of width 64, SiLU, four timestep frequencies.
    pub fn desk_default(data_dim: usize, cond_dim: usize, time_scale: usize) -> Self {
        Self {
            data_dim,
            cond_dim,
            time_scale,
            time_frequencies: 4,
            hidden: vec![64, 64],
            activation: Activation::Silu,
        }
    }

    pub fn time_features(&self) -> usize {
        1 + 2 * self.time_frequencies
    }

    pub fn input_dim(&self) -> usize {
        self.time_features() + self.data_dim + self.cond_dim
    }

    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_dim());
        widths.extend(&self.hidden);
        widths.push(self.data_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Intermediate values of one forward pass, consumed by
/// [`DenoiserModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the feature vector.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre_activations: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserModel {
    architecture: Architecture,
    params: Vec<f64>,
}

impl DenoiserModel {
    pub fn from_params(architecture: Architecture, params: Vec<f64>) -> Result<Self, DiffusionError> {
        let expected = architecture.num_params();
        if params.len() != expected {
            return Err(DiffusionError::ArchitectureMismatch(format!(
                "architecture needs {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            architecture,
            params,
        })
    }

    pub fn zeros(architecture: Architecture) -> Self {
        let n = architecture.num_params();
        Self {
            architecture,
            params: vec![0.0; n],
        }
    }

    /// Per-layer uniform initialisation in `+-1/sqrt(fan_in)`.
    pub fn init(architecture: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(architecture.num_params());
        for (fan_in, fan_out) in architecture.layer_shapes() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..(fan_in * fan_out + fan_out) {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Self {
            architecture,
            params,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn same_architecture(&self, other: &DenoiserModel) -> bool {
        self.architecture == other.architecture
    }

    fn features(&self, t: usize, x: &[f64], cond: &[f64]) -> Vec<f64> {
        let arch = &self.architecture;
        let mut f = Vec::with_capacity(arch.input_dim());
        let tau = t as f64 / arch.time_scale.max(1) as f64;
        f.push(tau);
        for k in 0..arch.time_frequencies {
            let w = std::f64::consts::PI * (1u64 << k) as f64 * tau;
            f.push(w.sin());
            f.push(w.cos());
        }
        f.extend_from_slice(x);
        f.extend_from_slice(cond);
        f
    }

    fn validate(&self, xt: &LatentSample, c: &PromptCondition) -> Result<(), DiffusionError> {
        let arch = &self.architecture;
        if xt.dim() != arch.data_dim {
            return Err(DiffusionError::DimensionMismatch {
                expected: arch.data_dim,
                actual: xt.dim(),
            });
        }
        if c.embedding.len() != arch.cond_dim {
            return Err(DiffusionError::DimensionMismatch {
                expected: arch.cond_dim,
                actual: c.embedding.len(),
            });
        }
        Ok(())
    }

    /// Predicted noise for `x_t` under condition `c`.
    pub fn predict(&self, xt: &LatentSample, c: &PromptCondition) -> Result<Vec<f64>, DiffusionError> {
        Ok(self.forward_cached(xt, c)?.output)
    }

    pub fn forward_cached(
        &self,
        xt: &LatentSample,
        c: &PromptCondition,
    ) -> Result<ForwardCache, DiffusionError> {
        self.validate(xt, c)?;
        Ok(self.forward_raw(xt.timestep, &xt.values, &c.embedding))
    }

    pub(crate) fn forward_raw(&self, t: usize, x: &[f64], cond: &[f64]) -> ForwardCache {
        let shapes = self.architecture.layer_shapes();
        let act = self.architecture.activation;
        let last = shapes.len() - 1;
        let mut inputs = Vec::with_capacity(shapes.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut current = self.features(t, x, cond);
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    b[o] + row.iter().zip(&current).map(|(a, v)| a * v).sum::<f64>()
                })
                .collect();
            let next = if l == last {
                z.clone()
            } else {
                z.iter().map(|&v| act.apply(v)).collect()
            };
            inputs.push(std::mem::replace(&mut current, next));
            if l != last {
                pre_activations.push(z);
            }
        }
        ForwardCache {
            inputs,
            pre_activations,
            output: current,
        }
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given `d(loss)/d(output)`.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let shapes = self.architecture.layer_shapes();
        let act = self.architecture.activation;
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut acc = 0;
        for &(i, o) in &shapes {
            offsets.push(acc);
            acc += i * o + o;
        }
        let mut delta = grad_output.to_vec();
        for l in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[l];
            let off = offsets[l];
            let input = &cache.inputs[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let gw = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (g, v) in gw.iter_mut().zip(input) {
                    *g += d * v;
                }
                grad[off + fan_in * fan_out + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + fan_in * fan_out];
            let mut upstream = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (u, a) in upstream.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *u += d * a;
                }
            }
            let z = &cache.pre_activations[l - 1];
            for (u, &zv) in upstream.iter_mut().zip(z) {
                *u *= act.derivative(zv);
            }
            delta = upstream;
        }
    }
}
