//! Preference fine-tuning (Diffusion-DPO) and noise-prediction pretraining loops.

mod dpo;
mod optimizer;

pub use dpo::{
    dpo_loss, dpo_loss_with_draws, implicit_reward_accuracy, neg_log_sigmoid, DpoDraw, DpoLossOutput,
    PreferencePair, Provenance,
};
pub use optimizer::{AdamW, AdamWConfig};

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    elbo_loss, DenoiserModel, DiffusionError, LatentSample, NoiseSchedule, PromptCondition, WeightFn,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("theta and reference architectures differ")]
    ArchitectureMismatch,
    #[error("empty batch or dataset")]
    EmptyBatch,
    #[error("non-finite loss or gradient")]
    NonFinite,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("step {step} outside [0, {total})")]
    StepOutOfRange { step: usize, total: usize },
    #[error("training diverged at step {step}")]
    Diverged { step: usize, report: Box<TrainReport> },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Learning rate prescribed for SD-scale Diffusion-DPO: `(2000 / beta) * 2.048e-8`.
pub fn large_model_learning_rate(beta: f64) -> f64 {
    2000.0 / beta * 2.048e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for DpoConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            beta: 1.0,
            learning_rate: 1e-3,
            warmup_fraction: 0.25,
            total_steps: 2000,
            batch_size: 512,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl DpoConfig {
    /// SD-scale settings: `beta = 5000`, the matching learning rate, 25%
    /// warmup and a batch of 2048.
    pub fn large_model() -> Self {
        let beta = 5000.0;
        Self {
            beta,
            learning_rate: large_model_learning_rate(beta),
            batch_size: 2048,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("beta must be positive, got {}", self.beta)));
        }
        validate_schedule(self.learning_rate, self.warmup_fraction, self.total_steps)?;
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at_step(&self, step: usize) -> Result<f64, TrainError> {
        lr_at_step(self.learning_rate, self.warmup_fraction, self.total_steps, step)
    }
}

fn validate_schedule(lr: f64, warmup_fraction: f64, total_steps: usize) -> Result<(), TrainError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(TrainError::InvalidConfig(format!("learning_rate must be positive, got {lr}")));
    }
    if !(0.0..=1.0).contains(&warmup_fraction) {
        return Err(TrainError::InvalidConfig(format!(
            "warmup_fraction must lie in [0, 1], got {warmup_fraction}"
        )));
    }
    if total_steps > 0 && warmup_fraction > 0.0 && warmup_fraction * (total_steps as f64) < 1.0 {
        return Err(TrainError::InvalidConfig(
            "warmup_fraction * total_steps must be at least 1".into(),
        ));
    }
    Ok(())
}

fn warmup_steps(warmup_fraction: f64, total_steps: usize) -> usize {
    (warmup_fraction * total_steps as f64).ceil() as usize
}

/// Linear warmup over the first `W = ceil(warmup_fraction * total_steps)`
/// steps (one-indexed: `lr * (step + 1) / W`), constant afterwards.
pub fn lr_at_step(
    learning_rate: f64,
    warmup_fraction: f64,
    total_steps: usize,
    step: usize,
) -> Result<f64, TrainError> {
    if step >= total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let w = warmup_steps(warmup_fraction, total_steps);
    if step < w {
        Ok(learning_rate * (step + 1) as f64 / w as f64)
    } else {
        Ok(learning_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub final_params: Vec<f64>,
    pub wall_clock_secs: f64,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl TrainReport {
    /// One `{"step":..,"lr":..,"loss":..}` object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in &self.steps {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Fine-tunes a copy of `reference` on `data` with the DPO objective.
/// Each epoch visits the pairs in a seeded shuffled order.
pub fn train_dpo(
    config: &DpoConfig,
    data: &[PreferencePair],
    reference: &DenoiserModel,
    schedule: &NoiseSchedule,
    weight_fn: &WeightFn,
) -> Result<(DenoiserModel, TrainReport), TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let started = Instant::now();
    let mut theta = reference.clone();
    let mut opt = AdamW::new(config.optimizer, theta.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut steps = Vec::with_capacity(config.total_steps);
    let config_echo = serde_json::to_value(config).expect("config serialises");

    for step in 0..config.total_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }
        let lr = config.lr_at_step(step)?;
        let out = match dpo_loss(&theta, reference, schedule, &batch, config.beta, weight_fn, &mut rng) {
            Ok(out) => out,
            Err(TrainError::NonFinite) => {
                return Err(TrainError::Diverged {
                    step,
                    report: Box::new(TrainReport {
                        steps,
                        final_params: theta.params().to_vec(),
                        wall_clock_secs: started.elapsed().as_secs_f64(),
                        seed: config.seed,
                        config: config_echo,
                    }),
                })
            }
            Err(e) => return Err(e),
        };
        opt.step(theta.params_mut(), &out.grad, lr);
        steps.push(StepRecord {
            step,
            lr,
            loss: out.loss,
        });
    }
    let report = TrainReport {
        steps,
        final_params: theta.params().to_vec(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        seed: config.seed,
        config: config_echo,
    };
    Ok((theta, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElboConfig {
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for ElboConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            warmup_fraction: 0.05,
            total_steps: 5000,
            batch_size: 128,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

/// Pretrains `model` with the noise-prediction loss on batches drawn from
/// `sample_batch(rng, batch_size)`.
pub fn train_elbo<F>(
    config: &ElboConfig,
    mut model: DenoiserModel,
    schedule: &NoiseSchedule,
    weight_fn: &WeightFn,
    mut sample_batch: F,
) -> Result<(DenoiserModel, TrainReport), TrainError>
where
    F: FnMut(&mut ChaCha8Rng, usize) -> Vec<(LatentSample, PromptCondition)>,
{
    validate_schedule(config.learning_rate, config.warmup_fraction, config.total_steps)?;
    if config.batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
    }
    let started = Instant::now();
    let mut opt = AdamW::new(config.optimizer, model.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut steps = Vec::with_capacity(config.total_steps);
    for step in 0..config.total_steps {
        let batch = sample_batch(&mut rng, config.batch_size);
        let lr = lr_at_step(config.learning_rate, config.warmup_fraction, config.total_steps, step)?;
        let out = elbo_loss(&model, &batch, schedule, weight_fn, &mut rng)?;
        opt.step(model.params_mut(), &out.grad, lr);
        steps.push(StepRecord {
            step,
            lr,
            loss: out.loss,
        });
    }
    let report = TrainReport {
        steps,
        final_params: model.params().to_vec(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        seed: config.seed,
        config: serde_json::to_value(config).expect("config serialises"),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{Architecture, ScheduleDescriptor};

    #[test]
    fn warmup_ramp_is_one_indexed() {
        let cfg = DpoConfig {
            total_steps: 100,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at_step(0).unwrap(), 1e-3 / 25.0);
        assert_eq!(cfg.lr_at_step(24).unwrap(), 1e-3);
        assert_eq!(cfg.lr_at_step(25).unwrap(), 1e-3);
        assert_eq!(cfg.lr_at_step(99).unwrap(), 1e-3);
        assert!(matches!(cfg.lr_at_step(100), Err(TrainError::StepOutOfRange { .. })));
    }

    #[test]
    fn ramp_end_hits_learning_rate_exactly() {
        for total in [1usize, 3, 7, 10, 101, 2000] {
            let cfg = DpoConfig {
                total_steps: total,
                warmup_fraction: if total < 4 { 1.0 } else { 0.25 },
                ..Default::default()
            };
            let w = (cfg.warmup_fraction * total as f64).ceil() as usize;
            if w < total {
                assert_eq!(cfg.lr_at_step(w).unwrap(), cfg.learning_rate);
            }
            assert_eq!(cfg.lr_at_step(w - 1).unwrap(), cfg.learning_rate);
        }
    }

    #[test]
    fn large_model_learning_rate_at_default_beta() {
        let cfg = DpoConfig::large_model();
        assert_eq!(cfg.beta, 5000.0);
        assert!((cfg.learning_rate - 8.192e-9).abs() < 1e-22);
        assert_eq!(cfg.batch_size, 2048);
        assert_eq!(cfg.warmup_fraction, 0.25);
    }

    #[test]
    fn warmup_must_cover_a_step() {
        let cfg = DpoConfig {
            total_steps: 3,
            warmup_fraction: 0.25,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
    }

    fn tiny_pairs() -> Vec<PreferencePair> {
        (0..8)
            .map(|i| PreferencePair {
                condition: PromptCondition::one_hot(i % 2, 2, "p"),
                winner: LatentSample::clean(vec![0.1 * i as f64, 1.0]),
                loser: LatentSample::clean(vec![-1.0, 0.2 * i as f64]),
                provenance: Provenance::Synthetic,
                flipped: false,
            })
            .collect()
    }

    #[test]
    fn zero_steps_returns_reference() {
        let schedule = ScheduleDescriptor::default().build().unwrap();
        let reference = DenoiserModel::init(Architecture::desk_default(2, 2, 50), 2);
        let cfg = DpoConfig {
            total_steps: 0,
            ..Default::default()
        };
        let (theta, report) = train_dpo(&cfg, &tiny_pairs(), &reference, &schedule, &WeightFn::Unit).unwrap();
        assert_eq!(theta, reference);
        assert!(report.steps.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_leaves_reference_alone() {
        let schedule = ScheduleDescriptor::default().build().unwrap();
        let reference = DenoiserModel::init(Architecture::desk_default(2, 2, 50), 2);
        let before = reference.clone();
        let cfg = DpoConfig {
            total_steps: 12,
            batch_size: 4,
            ..Default::default()
        };
        let (a, ra) = train_dpo(&cfg, &tiny_pairs(), &reference, &schedule, &WeightFn::Unit).unwrap();
        let (b, rb) = train_dpo(&cfg, &tiny_pairs(), &reference, &schedule, &WeightFn::Unit).unwrap();
        assert_eq!(ra.losses(), rb.losses());
        assert_eq!(a, b);
        assert_eq!(ra.steps.len(), 12);
        assert!(ra.losses().iter().all(|l| l.is_finite()));
        assert_eq!(reference, before);
        assert_ne!(a, reference);

        let mut lines = Vec::new();
        ra.write_jsonl(&mut lines).unwrap();
        let text = String::from_utf8(lines).unwrap();
        assert_eq!(text.lines().count(), 12);
        assert!(text.starts_with("{\"step\":0,\"lr\":"));
    }
}
