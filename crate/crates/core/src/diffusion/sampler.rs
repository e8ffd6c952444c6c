use rand::Rng;

use super::{standard_normal, DenoiserModel, DiffusionError, LatentSample, NoiseSchedule, PromptCondition};

/// Ancestral sampling: start from `x_T ~ N(0, I)` and repeatedly draw from
/// the Gaussian posterior `q(x_{t-1} | x_t, x0_hat)` where `x0_hat` is the
/// model's clean-data estimate. The final step returns `x0_hat` itself.
pub fn sample_ancestral<R: Rng + ?Sized>(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    c: &PromptCondition,
    rng: &mut R,
) -> Result<LatentSample, DiffusionError> {
    let d = model.architecture().data_dim;
    let x_t = LatentSample {
        values: standard_normal(rng, d),
        timestep: schedule.steps(),
    };
    sample_ancestral_from(model, schedule, c, x_t, rng)
}

/// Ancestral sampling from a given `x_T`.
pub fn sample_ancestral_from<R: Rng + ?Sized>(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    c: &PromptCondition,
    mut x: LatentSample,
    rng: &mut R,
) -> Result<LatentSample, DiffusionError> {
    if x.timestep != schedule.steps() {
        return Err(DiffusionError::WrongTimestep {
            expected: schedule.steps(),
            actual: x.timestep,
        });
    }
    let d = x.dim();
    for t in (1..=schedule.steps()).rev() {
        let eps_hat = model.predict(&x, c)?;
        let (a_t, s_t) = (schedule.alpha(t), schedule.sigma(t));
        let x0_hat: Vec<f64> = x
            .values
            .iter()
            .zip(&eps_hat)
            .map(|(xv, e)| (xv - s_t * e) / a_t)
            .collect();
        let s = t - 1;
        x = if s == 0 {
            LatentSample::clean(x0_hat)
        } else {
            let var_ts = schedule.transition_variance(s, t)?;
            let a_ts = a_t / schedule.alpha(s);
            let s2_s = schedule.sigma(s).powi(2);
            let s2_t = s_t * s_t;
            let coef_xt = a_ts * s2_s / s2_t;
            let coef_x0 = schedule.alpha(s) * var_ts / s2_t;
            let std = (var_ts * s2_s / s2_t).sqrt();
            let z = standard_normal(rng, d);
            LatentSample {
                values: (0..d)
                    .map(|i| coef_xt * x.values[i] + coef_x0 * x0_hat[i] + std * z[i])
                    .collect(),
                timestep: s,
            }
        };
        if !x.is_finite() {
            return Err(DiffusionError::NonFinite("ancestral sampling"));
        }
    }
    Ok(x)
}
