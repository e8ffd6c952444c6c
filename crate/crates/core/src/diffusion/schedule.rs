//! Discrete variance-preserving noise schedules.
//!
//! Index `t = 0` is clean data. For `t >= 1` the forward marginal is
//! `q(x_t | x_0) = N(alpha[t] x_0, sigma[t]^2 I)` with `alpha^2 + sigma^2 = 1`,
//! and the signal-to-noise ratio is `lambda[t] = alpha[t]^2 / sigma[t]^2`.

use serde::{Deserialize, Serialize};

use super::DiffusionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    VariancePreservingLinear,
    VariancePreservingCosine,
}

/// Parameters for [`make_schedule`]. Only the fields relevant to the chosen
/// kind are read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Offset `s` of the cosine schedule.
    pub cosine_offset: f64,
    /// Per-step beta clip for the cosine schedule; keeps `alpha[T] > 0`.
    pub cosine_max_beta: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            beta_min: 1e-4,
            beta_max: 0.2,
            cosine_offset: 0.008,
            cosine_max_beta: 0.999,
        }
    }
}

/// Everything needed to rebuild a schedule; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleDescriptor {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub params: ScheduleParams,
}

impl Default for ScheduleDescriptor {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::VariancePreservingLinear,
            steps: 50,
            params: ScheduleParams::default(),
        }
    }
}

impl ScheduleDescriptor {
    pub fn build(&self) -> Result<NoiseSchedule, DiffusionError> {
        make_schedule(self.kind, self.steps, self.params)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    lambda: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from cumulative products `alpha_bar[t] = prod_{i<=t} (1 - beta_i)`
    /// for `t = 1..=T`. Accepts `T = 1`, which [`make_schedule`] rejects; the
    /// result still satisfies every schedule invariant.
    pub fn from_alpha_bar(kind: ScheduleKind, alpha_bar: &[f64]) -> Result<Self, DiffusionError> {
        let steps = alpha_bar.len();
        if steps == 0 {
            return Err(DiffusionError::TooFewSteps(0));
        }
        let mut alpha = Vec::with_capacity(steps + 1);
        let mut sigma = Vec::with_capacity(steps + 1);
        let mut lambda = Vec::with_capacity(steps + 1);
        alpha.push(1.0);
        sigma.push(0.0);
        lambda.push(f64::INFINITY);
        for &ab in alpha_bar {
            if !(ab > 0.0 && ab < 1.0) {
                return Err(DiffusionError::InvalidParams(format!(
                    "cumulative alpha {ab} outside (0, 1)"
                )));
            }
            let a = ab.sqrt();
            let s = (1.0 - ab).sqrt();
            alpha.push(a);
            sigma.push(s);
            lambda.push(ab / (1.0 - ab));
        }
        for t in 1..=steps {
            if alpha[t] >= alpha[t - 1] {
                return Err(DiffusionError::InvalidParams(format!(
                    "alpha not strictly decreasing at t={t}"
                )));
            }
        }
        Ok(Self {
            kind,
            steps,
            alpha,
            sigma,
            lambda,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Signal-to-noise ratio; `+inf` at `t = 0`.
    pub fn lambda(&self, t: usize) -> f64 {
        self.lambda[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambda
    }

    /// Variance of `q(x_t | x_s)`: `sigma_t^2 - (alpha_t^2 / alpha_s^2) sigma_s^2`.
    pub fn transition_variance(&self, s: usize, t: usize) -> Result<f64, DiffusionError> {
        self.check_pair(s, t)?;
        let ratio = self.alpha[t] / self.alpha[s];
        let var = self.sigma[t].powi(2) - ratio * ratio * self.sigma[s].powi(2);
        if var < 0.0 {
            return Err(DiffusionError::NegativeVariance { s, t, variance: var });
        }
        Ok(var)
    }

    pub(crate) fn check_timestep(&self, t: usize) -> Result<(), DiffusionError> {
        if t > self.steps {
            return Err(DiffusionError::TimestepOutOfRange { t, steps: self.steps });
        }
        Ok(())
    }

    pub(crate) fn check_pair(&self, s: usize, t: usize) -> Result<(), DiffusionError> {
        if s >= t {
            return Err(DiffusionError::NonIncreasingTimesteps { s, t });
        }
        self.check_timestep(t)
    }
}

pub fn make_schedule(
    kind: ScheduleKind,
    steps: usize,
    params: ScheduleParams,
) -> Result<NoiseSchedule, DiffusionError> {
    if steps < 2 {
        return Err(DiffusionError::TooFewSteps(steps));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::VariancePreservingLinear => {
            let ScheduleParams {
                beta_min, beta_max, ..
            } = params;
            if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
                return Err(DiffusionError::InvalidParams(format!(
                    "linear schedule needs 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})"
                )));
            }
            let span = beta_max - beta_min;
            (0..steps)
                .map(|i| beta_min + span * i as f64 / (steps - 1) as f64)
                .collect()
        }
        ScheduleKind::VariancePreservingCosine => {
            let offset = params.cosine_offset;
            let max_beta = params.cosine_max_beta;
            if !(offset > 0.0 && offset.is_finite()) || !(max_beta > 0.0 && max_beta < 1.0) {
                return Err(DiffusionError::InvalidParams(format!(
                    "cosine schedule needs offset > 0 and max_beta in (0, 1), got ({offset}, {max_beta})"
                )));
            }
            let f = |t: usize| {
                let u = (t as f64 / steps as f64 + offset) / (1.0 + offset);
                (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t) / f(t - 1)).clamp(1e-12, max_beta))
                .collect()
        }
    };

    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for beta in betas {
        prod *= 1.0 - beta;
        alpha_bar.push(prod);
    }
    NoiseSchedule::from_alpha_bar(kind, &alpha_bar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule, DiffusionError> {
        make_schedule(
            ScheduleKind::VariancePreservingLinear,
            steps,
            ScheduleParams {
                beta_min,
                beta_max,
                ..Default::default()
            },
        )
    }

    fn check_invariants(s: &NoiseSchedule) {
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.sigma(0), 0.0);
        for t in 1..=s.steps() {
            assert!(s.alpha(t) < s.alpha(t - 1));
            assert!(s.alpha(t) > 0.0);
            if t >= 2 {
                assert!(s.sigma(t) > s.sigma(t - 1));
                assert!(s.lambda(t) < s.lambda(t - 1));
            }
            assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() <= 1e-12);
            let snr = s.alpha(t).powi(2) / s.sigma(t).powi(2);
            assert!((s.lambda(t) - snr).abs() <= 1e-12 * snr.max(1.0));
        }
        for t in 1..=s.steps() {
            for u in 0..t {
                assert!(s.transition_variance(u, t).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn clean_endpoint() {
        let s = linear(50, 1e-4, 0.2).unwrap();
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.sigma(0), 0.0);
        check_invariants(&s);
    }

    #[test]
    fn golden_linear_endpoint() {
        // Direct product over beta_i = 1e-4 + (0.2 - 1e-4) (i - 1) / 49, frozen.
        let s = linear(50, 1e-4, 0.2).unwrap();
        let mut prod = 1.0f64;
        for i in 0..50 {
            prod *= 1.0 - (1e-4 + (0.2 - 1e-4) * i as f64 / 49.0);
        }
        assert!((s.alpha(50) - prod.sqrt()).abs() < 1e-15);
        assert!((s.alpha(50) - 0.067_941_967_967_280_7).abs() < 1e-12);
        assert!((s.sigma(50) - 0.997_689_274_768_819_5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(matches!(linear(1, 1e-4, 0.2), Err(DiffusionError::TooFewSteps(1))));
        assert!(matches!(linear(10, 0.2, 0.1), Err(DiffusionError::InvalidParams(_))));
        assert!(matches!(linear(10, 0.0, 0.1), Err(DiffusionError::InvalidParams(_))));
        assert!(matches!(linear(10, 1e-4, 1.0), Err(DiffusionError::InvalidParams(_))));
    }

    #[test]
    fn cosine_schedule_is_valid() {
        let s = make_schedule(ScheduleKind::VariancePreservingCosine, 50, ScheduleParams::default())
            .unwrap();
        check_invariants(&s);
    }

    #[test]
    fn transition_rejects_non_increasing() {
        let s = linear(10, 1e-4, 0.2).unwrap();
        assert!(matches!(
            s.transition_variance(1, 1),
            Err(DiffusionError::NonIncreasingTimesteps { s: 1, t: 1 })
        ));
    }

    proptest! {
        #[test]
        fn random_valid_schedules_hold_invariants(
            steps in 2usize..80,
            lo in 1e-5f64..0.05,
            width in 1e-4f64..0.5,
            cosine in any::<bool>(),
        ) {
            let hi = (lo + width).min(0.9);
            let s = if cosine {
                make_schedule(ScheduleKind::VariancePreservingCosine, steps, ScheduleParams::default()).unwrap()
            } else {
                linear(steps, lo, hi).unwrap()
            };
            check_invariants(&s);
        }
    }
}
