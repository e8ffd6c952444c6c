//! Per-timestep Diffusion-DPO estimator.
//!
//! For a pair `(c, x0_w, x0_l)`, one draw `(t, eps_w, eps_l)` gives
//!
//! ```text
//! m = -beta * T * omega(lambda_t) * [ (|eps_w - e_theta(x_t^w)|^2 - |eps_w - e_ref(x_t^w)|^2)
//!                                   - (|eps_l - e_theta(x_t^l)|^2 - |eps_l - e_ref(x_t^l)|^2) ]
//! loss = mean over pairs of -log sigmoid(m)
//! ```
//!
//! The reference model only enters through constants; it never receives a
//! gradient.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    forward_marginal, standard_normal, DenoiserModel, LatentSample, NoiseSchedule, PromptCondition,
    WeightFn,
};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Curated,
    RelabeledOffline,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub condition: PromptCondition,
    pub winner: LatentSample,
    pub loser: LatentSample,
    pub provenance: Provenance,
    /// The edited item lost and the original became the winner.
    pub flipped: bool,
}

impl PreferencePair {
    pub fn swapped(&self) -> Self {
        Self {
            condition: self.condition.clone(),
            winner: self.loser.clone(),
            loser: self.winner.clone(),
            provenance: self.provenance,
            flipped: !self.flipped,
        }
    }
}

/// Randomness consumed by one pair: a timestep and one noise vector per item.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoDraw {
    pub t: usize,
    pub eps_winner: Vec<f64>,
    pub eps_loser: Vec<f64>,
}

impl DpoDraw {
    /// Draws `t ~ U{1..T}`, then `eps_w`, then `eps_l`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, steps: usize, dim: usize) -> Self {
        let t = rng.random_range(1..=steps);
        let eps_winner = standard_normal(rng, dim);
        let eps_loser = standard_normal(rng, dim);
        Self {
            t,
            eps_winner,
            eps_loser,
        }
    }

    /// The draw matching [`PreferencePair::swapped`]: noise follows the item.
    pub fn swapped(&self) -> Self {
        Self {
            t: self.t,
            eps_winner: self.eps_loser.clone(),
            eps_loser: self.eps_winner.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoLossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Realised per-pair margins `m`.
    pub margins: Vec<f64>,
}

/// `-log sigmoid(m)`, stable for large `|m|`.
pub fn neg_log_sigmoid(m: f64) -> f64 {
    // softplus(-m)
    let x = -m;
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_models(theta: &DenoiserModel, reference: &DenoiserModel) -> Result<(), TrainError> {
    if !theta.same_architecture(reference) {
        return Err(TrainError::ArchitectureMismatch);
    }
    Ok(())
}

/// Draws one [`DpoDraw`] per pair from `rng` and evaluates the loss.
#[allow(clippy::too_many_arguments)]
pub fn dpo_loss<R: Rng + ?Sized>(
    theta: &DenoiserModel,
    reference: &DenoiserModel,
    schedule: &NoiseSchedule,
    pairs: &[PreferencePair],
    beta: f64,
    weight_fn: &WeightFn,
    rng: &mut R,
) -> Result<DpoLossOutput, TrainError> {
    let d = theta.architecture().data_dim;
    let draws: Vec<DpoDraw> = pairs
        .iter()
        .map(|_| DpoDraw::sample(rng, schedule.steps(), d))
        .collect();
    dpo_loss_with_draws(theta, reference, schedule, pairs, &draws, beta, weight_fn)
}

struct PairTerm {
    margin: f64,
    grad: Option<Vec<f64>>,
}

fn squared_error(eps: &[f64], pred: &[f64]) -> f64 {
    eps.iter().zip(pred).map(|(e, p)| (e - p) * (e - p)).sum()
}

#[allow(clippy::too_many_arguments)]
fn pair_term(
    theta: &DenoiserModel,
    reference: &DenoiserModel,
    schedule: &NoiseSchedule,
    pair: &PreferencePair,
    draw: &DpoDraw,
    beta: f64,
    weight_fn: &WeightFn,
    grad_scale: Option<f64>,
) -> Result<PairTerm, TrainError> {
    let xw = forward_marginal(schedule, &pair.winner, draw.t, &draw.eps_winner)?;
    let xl = forward_marginal(schedule, &pair.loser, draw.t, &draw.eps_loser)?;
    let c = &pair.condition;
    let cache_w = theta.forward_cached(&xw, c)?;
    let cache_l = theta.forward_cached(&xl, c)?;
    let ref_w = reference.predict(&xw, c)?;
    let ref_l = reference.predict(&xl, c)?;

    let diff_w = squared_error(&draw.eps_winner, &cache_w.output) - squared_error(&draw.eps_winner, &ref_w);
    let diff_l = squared_error(&draw.eps_loser, &cache_l.output) - squared_error(&draw.eps_loser, &ref_l);
    let factor = beta * schedule.steps() as f64 * weight_fn.weight(schedule.lambda(draw.t));
    let margin = -(factor * (diff_w - diff_l));

    let grad = match grad_scale {
        None => None,
        Some(scale) => {
            // d(-log sigmoid(m))/dm = -sigmoid(-m)
            let dl_dm = -sigmoid(-margin) * scale;
            let gw: Vec<f64> = draw
                .eps_winner
                .iter()
                .zip(&cache_w.output)
                .map(|(e, p)| dl_dm * 2.0 * factor * (e - p))
                .collect();
            let gl: Vec<f64> = draw
                .eps_loser
                .iter()
                .zip(&cache_l.output)
                .map(|(e, p)| -dl_dm * 2.0 * factor * (e - p))
                .collect();
            let mut grad = vec![0.0; theta.num_params()];
            theta.backward(&cache_w, &gw, &mut grad);
            theta.backward(&cache_l, &gl, &mut grad);
            Some(grad)
        }
    };
    Ok(PairTerm { margin, grad })
}

/// Loss, exact gradient with respect to `theta` and realised margins for
/// explicit draws. Per-pair terms may be evaluated in parallel; the batch
/// reduction runs in index order.
#[allow(clippy::too_many_arguments)]
pub fn dpo_loss_with_draws(
    theta: &DenoiserModel,
    reference: &DenoiserModel,
    schedule: &NoiseSchedule,
    pairs: &[PreferencePair],
    draws: &[DpoDraw],
    beta: f64,
    weight_fn: &WeightFn,
) -> Result<DpoLossOutput, TrainError> {
    check_models(theta, reference)?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(TrainError::InvalidConfig(format!("beta must be positive, got {beta}")));
    }
    assert_eq!(pairs.len(), draws.len(), "one draw per pair");
    let scale = 1.0 / pairs.len() as f64;
    let terms: Vec<Result<PairTerm, TrainError>> = pairs
        .par_iter()
        .zip(draws.par_iter())
        .map(|(pair, draw)| {
            pair_term(theta, reference, schedule, pair, draw, beta, weight_fn, Some(scale))
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; theta.num_params()];
    let mut margins = Vec::with_capacity(pairs.len());
    for term in terms {
        let term = term?;
        loss += neg_log_sigmoid(term.margin) * scale;
        if let Some(g) = term.grad {
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        margins.push(term.margin);
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite);
    }
    Ok(DpoLossOutput { loss, grad, margins })
}

/// Fraction of pairs whose margin, averaged over `n_draws` seeded draws, is
/// positive. Margins with magnitude below `1e-12` count as one half. The
/// margin sign does not depend on `beta`, so unit `beta` is used.
///
/// Winner and loser share each draw's noise (common random numbers); the
/// expected margin is unchanged and identical items score an exact tie.
pub fn implicit_reward_accuracy<R: Rng + ?Sized>(
    theta: &DenoiserModel,
    reference: &DenoiserModel,
    schedule: &NoiseSchedule,
    heldout: &[PreferencePair],
    n_draws: usize,
    rng: &mut R,
) -> Result<f64, TrainError> {
    check_models(theta, reference)?;
    if heldout.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if n_draws == 0 {
        return Err(TrainError::InvalidConfig("n_draws must be at least 1".into()));
    }
    let d = theta.architecture().data_dim;
    let draws: Vec<Vec<DpoDraw>> = heldout
        .iter()
        .map(|_| {
            (0..n_draws)
                .map(|_| {
                    let t = rng.random_range(1..=schedule.steps());
                    let eps = standard_normal(rng, d);
                    DpoDraw {
                        t,
                        eps_winner: eps.clone(),
                        eps_loser: eps,
                    }
                })
                .collect()
        })
        .collect();
    let means: Vec<Result<f64, TrainError>> = heldout
        .par_iter()
        .zip(draws.par_iter())
        .map(|(pair, pair_draws)| {
            let mut total = 0.0;
            for draw in pair_draws {
                total += pair_term(theta, reference, schedule, pair, draw, 1.0, &WeightFn::Unit, None)?.margin;
            }
            Ok(total / n_draws as f64)
        })
        .collect();
    let mut score = 0.0;
    for m in means {
        let m = m?;
        score += if m.abs() < 1e-12 {
            0.5
        } else if m > 0.0 {
            1.0
        } else {
            0.0
        };
    }
    Ok(score / heldout.len() as f64)
}
