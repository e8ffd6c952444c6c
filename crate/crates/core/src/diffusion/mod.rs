//! Forward diffusion, the conditional noise-prediction network, the
//! noise-prediction training loss and ancestral sampling.

mod checkpoint;
mod denoiser;
mod loss;
mod sampler;
mod schedule;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use denoiser::{Activation, Architecture, DenoiserModel, ForwardCache};
pub use loss::{elbo_loss, LossAndGrad, WeightFn};
pub use sampler::{sample_ancestral, sample_ancestral_from};
pub use schedule::{
    make_schedule, NoiseSchedule, ScheduleDescriptor, ScheduleKind, ScheduleParams,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("schedule needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("invalid schedule parameters: {0}")]
    InvalidParams(String),
    #[error("timestep {t} outside [0, {steps}]")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("transition requires s < t, got s={s}, t={t}")]
    NonIncreasingTimesteps { s: usize, t: usize },
    #[error("negative transition variance {variance} for s={s}, t={t}")]
    NegativeVariance { s: usize, t: usize, variance: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("sample is at timestep {actual}, expected {expected}")]
    WrongTimestep { expected: usize, actual: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// A point of the data space at some diffusion timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub values: Vec<f64>,
    pub timestep: usize,
}

impl LatentSample {
    pub fn clean(values: Vec<f64>) -> Self {
        Self {
            values,
            timestep: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// The conditioning input: which prompt a sample should depict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCondition {
    pub condition_id: usize,
    pub prompt_text: String,
    pub embedding: Vec<f64>,
}

impl PromptCondition {
    /// One-hot embedding over `num_conditions` ids.
    pub fn one_hot(condition_id: usize, num_conditions: usize, prompt_text: impl Into<String>) -> Self {
        assert!(
            condition_id < num_conditions,
            "condition id {condition_id} out of range for {num_conditions} conditions"
        );
        let mut embedding = vec![0.0; num_conditions];
        embedding[condition_id] = 1.0;
        Self {
            condition_id,
            prompt_text: prompt_text.into(),
            embedding,
        }
    }
}

/// Draws a standard normal vector of length `dim`.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `x_t = alpha[t] x_0 + sigma[t] eps`.
pub fn forward_marginal(
    schedule: &NoiseSchedule,
    x0: &LatentSample,
    t: usize,
    eps: &[f64],
) -> Result<LatentSample, DiffusionError> {
    if x0.timestep != 0 {
        return Err(DiffusionError::WrongTimestep {
            expected: 0,
            actual: x0.timestep,
        });
    }
    if eps.len() != x0.dim() {
        return Err(DiffusionError::DimensionMismatch {
            expected: x0.dim(),
            actual: eps.len(),
        });
    }
    schedule.check_timestep(t)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok(LatentSample {
        values: x0.values.iter().zip(eps).map(|(x, e)| a * x + s * e).collect(),
        timestep: t,
    })
}

/// Samples `q(x_t | x_s) = N((alpha_t / alpha_s) x_s, (sigma_t^2 - (alpha_t^2/alpha_s^2) sigma_s^2) I)`.
pub fn forward_transition<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    xs: &LatentSample,
    s: usize,
    t: usize,
    rng: &mut R,
) -> Result<LatentSample, DiffusionError> {
    if xs.timestep != s {
        return Err(DiffusionError::WrongTimestep {
            expected: s,
            actual: xs.timestep,
        });
    }
    let var = schedule.transition_variance(s, t)?;
    let ratio = schedule.alpha(t) / schedule.alpha(s);
    let std = var.sqrt();
    let values = xs
        .values
        .iter()
        .map(|x| ratio * x + std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(LatentSample { values, timestep: t })
}
