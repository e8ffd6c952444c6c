//! The vector world: a desk-scale stand-in for text-to-image generation.
//!
//! Every condition owns a Gaussian-mixture target. "Images" are points in
//! `R^d`; the base generator scatters points around the target modes and
//! rewards measure closeness to them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{standard_normal, LatentSample, PromptCondition};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WorldError {
    #[error("unknown condition {0}")]
    UnknownCondition(usize),
    #[error("unknown prompt {0:?}")]
    UnknownPrompt(String),
    #[error("sample has dimension {actual}, world has {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("invalid world: {0}")]
    Invalid(String),
    #[error("scorer failed: {0}")]
    Scorer(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VectorWorld {
    pub num_conditions: usize,
    pub dim: usize,
    /// Target mixture per condition.
    pub targets: Vec<Vec<MixtureComponent>>,
    /// Spread of the base generator around a target mode.
    pub data_std: f64,
    /// Editor step length `eta`.
    pub edit_step: f64,
    pub edit_noise: f64,
    /// Per-coordinate deviation the critic still calls "ok".
    pub ok_tolerance: f64,
    /// Component standard deviation of the mixture log-density reward.
    pub reward_bandwidth: f64,
    pub seed: u64,
}

impl Default for VectorWorld {
    /// Four conditions in the plane, one target each on a circle of radius 3.
    fn default() -> Self {
        Self::on_circle(4, 3.0)
    }
}

impl VectorWorld {
    pub fn on_circle(num_conditions: usize, radius: f64) -> Self {
        let targets = (0..num_conditions)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / num_conditions as f64;
                vec![MixtureComponent {
                    mean: vec![radius * angle.cos(), radius * angle.sin()],
                    weight: 1.0,
                }]
            })
            .collect();
        Self {
            num_conditions,
            dim: 2,
            targets,
            data_std: 0.27,
            edit_step: 0.5,
            edit_noise: 0.15,
            ok_tolerance: 0.25,
            reward_bandwidth: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.num_conditions < 2 {
            return Err(WorldError::Invalid("need at least 2 conditions".into()));
        }
        if self.targets.len() != self.num_conditions {
            return Err(WorldError::Invalid("one target mixture per condition".into()));
        }
        for (k, mix) in self.targets.iter().enumerate() {
            if mix.is_empty() {
                return Err(WorldError::Invalid(format!("condition {k} has no modes")));
            }
            let total: f64 = mix.iter().map(|c| c.weight).sum();
            if mix.iter().any(|c| c.weight.is_nan() || c.weight <= 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(WorldError::Invalid(format!(
                    "condition {k} weights must be positive and sum to 1"
                )));
            }
            if mix.iter().any(|c| c.mean.len() != self.dim) {
                return Err(WorldError::Invalid(format!("condition {k} mode has wrong dimension")));
            }
        }
        if !(self.edit_step >= 0.0 && self.edit_noise >= 0.0 && self.data_std >= 0.0) {
            return Err(WorldError::Invalid("edit step, noise and spread must be nonnegative".into()));
        }
        if !(self.reward_bandwidth > 0.0 && self.ok_tolerance >= 0.0) {
            return Err(WorldError::Invalid("bandwidth must be positive, tolerance nonnegative".into()));
        }
        Ok(())
    }

    pub fn prompt_text(&self, k: usize) -> String {
        format!("a point near target {k}")
    }

    pub fn condition(&self, k: usize) -> Result<PromptCondition, WorldError> {
        if k >= self.num_conditions {
            return Err(WorldError::UnknownCondition(k));
        }
        Ok(PromptCondition::one_hot(k, self.num_conditions, self.prompt_text(k)))
    }

    pub fn conditions(&self) -> Vec<PromptCondition> {
        (0..self.num_conditions)
            .map(|k| self.condition(k).expect("in range"))
            .collect()
    }

    pub fn condition_for_prompt(&self, prompt: &str) -> Result<usize, WorldError> {
        (0..self.num_conditions)
            .find(|&k| self.prompt_text(k) == prompt)
            .ok_or_else(|| WorldError::UnknownPrompt(prompt.to_string()))
    }

    pub fn modes(&self, k: usize) -> Result<&[MixtureComponent], WorldError> {
        self.targets
            .get(k)
            .map(Vec::as_slice)
            .ok_or(WorldError::UnknownCondition(k))
    }

    /// Index of the target mode of condition `k` closest to `x`, and `|x - mu|^2`.
    pub fn nearest_mode(&self, k: usize, x: &[f64]) -> Result<(usize, f64), WorldError> {
        self.check_dim(x)?;
        let modes = self.modes(k)?;
        let mut best = (0, f64::INFINITY);
        for (j, m) in modes.iter().enumerate() {
            let d2 = sq_dist(x, &m.mean);
            if d2 < best.1 {
                best = (j, d2);
            }
        }
        Ok(best)
    }

    pub(crate) fn check_dim(&self, x: &[f64]) -> Result<(), WorldError> {
        if x.len() != self.dim {
            return Err(WorldError::Dimension {
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// One draw of the base generator for condition `k`: a weighted mode plus
    /// isotropic noise of scale `data_std`.
    pub fn sample_original<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<LatentSample, WorldError> {
        let modes = self.modes(k)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = modes.len() - 1;
        for (j, m) in modes.iter().enumerate() {
            acc += m.weight;
            if u < acc {
                pick = j;
                break;
            }
        }
        let z = standard_normal(rng, self.dim);
        let mean = &modes[pick].mean;
        Ok(LatentSample::clean(
            mean.iter().zip(&z).map(|(m, e)| m + self.data_std * e).collect(),
        ))
    }

    /// Training batch for pretraining: uniform condition, then a base draw.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<(LatentSample, PromptCondition)> {
        (0..n)
            .map(|_| {
                let k = rng.random_range(0..self.num_conditions);
                let x = self.sample_original(k, rng).expect("condition in range");
                (x, self.condition(k).expect("condition in range"))
            })
            .collect()
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Anything that can score a sample under a condition; higher is better.
pub trait RewardFunction: Send + Sync {
    fn name(&self) -> String;
    fn score(&self, condition: &PromptCondition, x: &[f64]) -> Result<f64, WorldError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    NegSqDistanceToNearestMode,
    MixtureLogDensity,
}

#[derive(Debug, Clone)]
pub struct SyntheticReward {
    pub kind: RewardKind,
    pub world: std::sync::Arc<VectorWorld>,
}

impl SyntheticReward {
    pub fn new(kind: RewardKind, world: std::sync::Arc<VectorWorld>) -> Self {
        Self { kind, world }
    }
}

/// `synth_reward`: `-min_mu |x - mu|^2` or `log sum_j w_j N(x; mu_j, h^2 I)`.
pub fn synth_reward(world: &VectorWorld, kind: RewardKind, c: &PromptCondition, x: &LatentSample) -> Result<f64, WorldError> {
    if x.timestep != 0 {
        return Err(WorldError::Invalid(format!("reward needs a clean sample, got t={}", x.timestep)));
    }
    score_vector(world, kind, c.condition_id, &x.values)
}

pub(crate) fn score_vector(world: &VectorWorld, kind: RewardKind, k: usize, x: &[f64]) -> Result<f64, WorldError> {
    world.check_dim(x)?;
    let modes = world.modes(k)?;
    match kind {
        RewardKind::NegSqDistanceToNearestMode => Ok(-world.nearest_mode(k, x)?.1),
        RewardKind::MixtureLogDensity => {
            let h2 = world.reward_bandwidth * world.reward_bandwidth;
            let logs: Vec<f64> = modes
                .iter()
                .map(|m| m.weight.ln() - sq_dist(x, &m.mean) / (2.0 * h2))
                .collect();
            let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            Ok(lse - 0.5 * world.dim as f64 * (2.0 * std::f64::consts::PI * h2).ln())
        }
    }
}

impl RewardFunction for SyntheticReward {
    fn name(&self) -> String {
        match self.kind {
            RewardKind::NegSqDistanceToNearestMode => "neg_sq_distance".into(),
            RewardKind::MixtureLogDensity => "mixture_log_density".into(),
        }
    }

    fn score(&self, condition: &PromptCondition, x: &[f64]) -> Result<f64, WorldError> {
        score_vector(&self.world, self.kind, condition.condition_id, x)
    }
}
