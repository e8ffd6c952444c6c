//! Numerical property checks shared by the integration tests and the
//! acceptance runner. Each returns a one-line summary on success and a
//! description of the first violation on failure.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpo::diffusion::{
    elbo_loss, forward_marginal, forward_transition, standard_normal, Activation, Architecture, DenoiserModel,
    LatentSample, NoiseSchedule, PromptCondition, ScheduleDescriptor, ScheduleKind, ScheduleParams, WeightFn,
};
use rpo::trainer::{dpo_loss, dpo_loss_with_draws, DpoDraw, PreferencePair, Provenance};

pub type Check = Result<String, String>;

pub fn random_schedule(rng: &mut ChaCha8Rng, max_steps: usize) -> NoiseSchedule {
    let steps = rng.random_range(2..=max_steps);
    let kind = if rng.random_bool(0.5) {
        ScheduleKind::VariancePreservingLinear
    } else {
        ScheduleKind::VariancePreservingCosine
    };
    let beta_min = rng.random_range(1e-5..1e-2);
    let beta_max = rng.random_range(0.05..0.3);
    ScheduleDescriptor {
        kind,
        steps,
        params: ScheduleParams {
            beta_min,
            beta_max,
            ..Default::default()
        },
    }
    .build()
    .expect("valid random schedule")
}

pub fn random_architecture(rng: &mut ChaCha8Rng, data_dim: usize, width: usize, steps: usize) -> Architecture {
    let depth = rng.random_range(1..=2);
    Architecture {
        data_dim,
        cond_dim: rng.random_range(1..=3),
        time_scale: steps,
        time_frequencies: rng.random_range(0..=3),
        hidden: vec![width; depth],
        activation: if rng.random_bool(0.5) { Activation::Silu } else { Activation::Tanh },
    }
}

pub fn random_condition(rng: &mut ChaCha8Rng, cond_dim: usize) -> PromptCondition {
    PromptCondition::one_hot(rng.random_range(0..cond_dim), cond_dim, "p")
}

pub fn random_pairs(rng: &mut ChaCha8Rng, n: usize, data_dim: usize, cond_dim: usize) -> Vec<PreferencePair> {
    (0..n)
        .map(|_| PreferencePair {
            condition: random_condition(rng, cond_dim),
            winner: LatentSample::clean(standard_normal(rng, data_dim)),
            loser: LatentSample::clean(standard_normal(rng, data_dim)),
            provenance: Provenance::Synthetic,
            flipped: false,
        })
        .collect()
}

/// `reference` with every parameter moved by up to `scale`.
pub fn perturbed(reference: &DenoiserModel, rng: &mut ChaCha8Rng, scale: f64) -> DenoiserModel {
    let mut m = reference.clone();
    for p in m.params_mut() {
        *p += rng.random_range(-scale..scale);
    }
    m
}

fn random_weight_fn(rng: &mut ChaCha8Rng) -> WeightFn {
    match rng.random_range(0..3) {
        0 => WeightFn::Unit,
        1 => WeightFn::Snr,
        _ => WeightFn::TruncatedSnr(5.0),
    }
}

/// Largest gradient error over all parameters: relative where either value
/// is at least `1e-8`, absolute otherwise.
fn gradient_error(analytic: &[f64], mut loss_at: impl FnMut(&[f64]) -> f64, params: &[f64]) -> (f64, f64) {
    let h = 1e-5;
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss_at(&p);
        p[i] = orig - h;
        let down = loss_at(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = analytic[i];
        let scale = a.abs().max(fd.abs());
        if scale < 1e-8 {
            worst_abs = worst_abs.max((a - fd).abs());
        } else {
            worst_rel = worst_rel.max((a - fd).abs() / scale);
        }
    }
    (worst_rel, worst_abs)
}

/// Analytic gradients of both losses against central differences on
/// `configs` random data-dimension-4, width-8 models.
pub fn gradient_suite(configs: u64) -> Check {
    let mut worst: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    for i in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let schedule = random_schedule(&mut rng, 30);
        let arch = random_architecture(&mut rng, 4, 8, schedule.steps());
        let weight_fn = random_weight_fn(&mut rng);
        let batch_size = rng.random_range(1..=4);
        let model = DenoiserModel::init(arch.clone(), rng.random());

        let batch: Vec<(LatentSample, PromptCondition)> = (0..batch_size)
            .map(|_| {
                (
                    LatentSample::clean(standard_normal(&mut rng, 4)),
                    random_condition(&mut rng, arch.cond_dim),
                )
            })
            .collect();
        let loss_seed: u64 = rng.random();
        let elbo = |m: &DenoiserModel| {
            elbo_loss(m, &batch, &schedule, &weight_fn, &mut ChaCha8Rng::seed_from_u64(loss_seed)).unwrap()
        };
        let analytic = elbo(&model).grad;
        let (rel, abs) = gradient_error(
            &analytic,
            |p| elbo(&DenoiserModel::from_params(arch.clone(), p.to_vec()).unwrap()).loss,
            model.params(),
        );
        if rel >= 1e-4 || abs >= 1e-8 {
            return Err(format!("elbo config {i}: relative error {rel:.3e}, absolute {abs:.3e}"));
        }
        worst = worst.max(rel);
        worst_abs = worst_abs.max(abs);

        let theta = perturbed(&model, &mut rng, 0.05);
        let pairs = random_pairs(&mut rng, batch_size, 4, arch.cond_dim);
        let draws: Vec<DpoDraw> = pairs.iter().map(|_| DpoDraw::sample(&mut rng, schedule.steps(), 4)).collect();
        let beta = rng.random_range(0.1..5.0);
        let dpo = |m: &DenoiserModel| dpo_loss_with_draws(m, &model, &schedule, &pairs, &draws, beta, &weight_fn).unwrap();
        let analytic = dpo(&theta).grad;
        let (rel, abs) = gradient_error(
            &analytic,
            |p| dpo(&DenoiserModel::from_params(arch.clone(), p.to_vec()).unwrap()).loss,
            theta.params(),
        );
        if rel >= 1e-4 || abs >= 1e-8 {
            return Err(format!("dpo config {i}: relative error {rel:.3e}, absolute {abs:.3e}"));
        }
        worst = worst.max(rel);
        worst_abs = worst_abs.max(abs);
    }
    Ok(format!(
        "{configs} configurations x 2 losses, max relative error {worst:.2e}, max absolute error on tiny entries {worst_abs:.2e}"
    ))
}

/// `dpo_loss` with `theta = ref` over `batches` random batches, schedules
/// and betas.
pub fn dpo_fixed_point(batches: u64) -> Check {
    let mut worst: f64 = 0.0;
    for i in 0..batches {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let schedule = random_schedule(&mut rng, 100);
        let d = rng.random_range(1..=4);
        let arch = random_architecture(&mut rng, d, 16, schedule.steps());
        let model = DenoiserModel::init(arch.clone(), rng.random());
        let n = rng.random_range(1..=16);
        let pairs = random_pairs(&mut rng, n, d, arch.cond_dim);
        let beta = 10f64.powf(rng.random_range(-2.0..4.0));
        let out = dpo_loss(&model, &model, &schedule, &pairs, beta, &WeightFn::Unit, &mut rng).map_err(|e| e.to_string())?;
        let err = (out.loss - std::f64::consts::LN_2).abs();
        if err >= 1e-9 {
            return Err(format!("batch {i}: loss {} differs from ln 2 by {err:.3e}", out.loss));
        }
        worst = worst.max(err);
    }
    Ok(format!("{batches} batches, max |loss - ln 2| = {worst:.2e}"))
}

struct Moments {
    mean: f64,
    mean_var: f64,
    second: f64,
    second_var: f64,
}

fn moments(values: &[f64]) -> Moments {
    let n = values.len() as f64;
    let stats = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, var / n)
    };
    let (mean, mean_var) = stats(&mut values.iter().copied());
    let (second, second_var) = stats(&mut values.iter().map(|x| x * x));
    Moments {
        mean,
        mean_var,
        second,
        second_var,
    }
}

/// Direct marginal against the chained transition `0 -> s -> t`: first and
/// second moments per coordinate, `draws` samples per path.
pub fn forward_consistency(draws: usize) -> Check {
    let schedule = ScheduleDescriptor::default().build().unwrap();
    let x0 = LatentSample::clean(vec![1.5, -0.7]);
    let mut worst: f64 = 0.0;
    for (k, &(s, t)) in [(1usize, 2usize), (3, 10), (10, 25), (20, 49), (5, 50)].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(77 + k as u64);
        let mut direct = [Vec::with_capacity(draws), Vec::with_capacity(draws)];
        let mut chained = [Vec::with_capacity(draws), Vec::with_capacity(draws)];
        for _ in 0..draws {
            let eps = standard_normal(&mut rng, 2);
            let xt = forward_marginal(&schedule, &x0, t, &eps).unwrap();
            let eps = standard_normal(&mut rng, 2);
            let xs = forward_marginal(&schedule, &x0, s, &eps).unwrap();
            let xt2 = forward_transition(&schedule, &xs, s, t, &mut rng).unwrap();
            for i in 0..2 {
                direct[i].push(xt.values[i]);
                chained[i].push(xt2.values[i]);
            }
        }
        for i in 0..2 {
            let (a, b) = (moments(&direct[i]), moments(&chained[i]));
            let z1 = (a.mean - b.mean).abs() / (a.mean_var + b.mean_var).sqrt();
            let z2 = (a.second - b.second).abs() / (a.second_var + b.second_var).sqrt();
            if z1 > 3.0 || z2 > 3.0 {
                return Err(format!("(s, t) = ({s}, {t}), coordinate {i}: z = {z1:.2} (mean), {z2:.2} (second moment)"));
            }
            worst = worst.max(z1).max(z2);
        }
    }
    Ok(format!("5 (s, t) pairs, {draws} draws per path, max |z| = {worst:.2}"))
}
