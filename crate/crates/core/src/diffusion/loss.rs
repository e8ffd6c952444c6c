use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use super::{
    forward_marginal, standard_normal, DenoiserModel, DiffusionError, LatentSample, NoiseSchedule,
    PromptCondition,
};

/// Loss weighting `omega(lambda_t)` as a function of the signal-to-noise ratio.
#[derive(Clone, Default)]
pub enum WeightFn {
    #[default]
    Unit,
    Snr,
    /// `min(lambda, cap)`.
    TruncatedSnr(f64),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl WeightFn {
    pub fn weight(&self, lambda: f64) -> f64 {
        match self {
            WeightFn::Unit => 1.0,
            WeightFn::Snr => lambda,
            WeightFn::TruncatedSnr(cap) => lambda.min(*cap),
            WeightFn::Custom(f) => f(lambda),
        }
    }
}

impl fmt::Debug for WeightFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightFn::Unit => f.write_str("Unit"),
            WeightFn::Snr => f.write_str("Snr"),
            WeightFn::TruncatedSnr(cap) => write!(f, "TruncatedSnr({cap})"),
            WeightFn::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Noise-prediction loss `mean_i omega(lambda_t) ||eps - eps_theta(t, x_t, c)||^2`
/// and its exact gradient for the realised draws.
///
/// For each batch item, in order, draws `t ~ U{1..T}` and then
/// `eps ~ N(0, I)` from `rng`.
pub fn elbo_loss<R: Rng + ?Sized>(
    model: &DenoiserModel,
    batch: &[(LatentSample, PromptCondition)],
    schedule: &NoiseSchedule,
    weight_fn: &WeightFn,
    rng: &mut R,
) -> Result<LossAndGrad, DiffusionError> {
    if batch.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    let d = model.architecture().data_dim;
    let mut draws = Vec::with_capacity(batch.len());
    for (x0, _) in batch {
        let t = rng.random_range(1..=schedule.steps());
        let eps = standard_normal(rng, d);
        let xt = forward_marginal(schedule, x0, t, &eps)?;
        draws.push((xt, eps));
    }
    let scale = 1.0 / batch.len() as f64;
    let terms: Vec<Result<(f64, Vec<f64>), DiffusionError>> = draws
        .par_iter()
        .zip(batch.par_iter())
        .map(|((xt, eps), (_, c))| {
            let cache = model.forward_cached(xt, c)?;
            let w = weight_fn.weight(schedule.lambda(xt.timestep));
            let mut sq = 0.0;
            let mut grad_out = vec![0.0; d];
            for i in 0..d {
                let r = eps[i] - cache.output[i];
                sq += r * r;
                grad_out[i] = -2.0 * w * r * scale;
            }
            let mut grad = vec![0.0; model.num_params()];
            model.backward(&cache, &grad_out, &mut grad);
            Ok((w * sq * scale, grad))
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; model.num_params()];
    for term in terms {
        let (l, g) = term?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(DiffusionError::NonFinite("noise-prediction loss"));
    }
    Ok(LossAndGrad { loss, grad })
}
