//! Time discretization and noise-schedule scalars shared by samplers and
//! objectives.
//!
//! A [`Schedule`] is a strictly decreasing grid `1 = t_0 > t_1 > ... > t_N = 0`
//! together with a global noise level `a`. The SDE diffusion coefficient is
//! `sigma_t = a * sqrt(t / (1 - t))`, which diverges at `t = 1`; since the
//! grid starts exactly there, `t` is clamped to `t_clamp_max` before the
//! ratio is formed. With `a = 0` every per-step variance is zero and the SDE
//! sampler degenerates to the deterministic ODE sampler.

use serde::{Deserialize, Serialize};

use crate::error::{OpdError, Result};

/// Default clamp applied inside [`Schedule::sigma_t`] to keep the first grid
/// point finite.
pub const DEFAULT_T_CLAMP_MAX: f64 = 1.0 - 1e-3;

/// Discretized reverse-time grid with its noise level.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Grid times, length `n_steps + 1`, strictly decreasing from 1 to 0.
    times: Vec<f64>,
    /// Global noise level `a >= 0`.
    noise_level: f64,
    /// Clamp applied to `t` inside `sigma_t`.
    t_clamp_max: f64,
}

impl Schedule {
    /// Uniform grid `t_j = 1 - j/N` with the default clamp.
    pub fn uniform(n_steps: usize, noise_level: f64) -> Result<Self> {
        Self::uniform_with_clamp(n_steps, noise_level, DEFAULT_T_CLAMP_MAX)
    }

    /// Uniform grid with an explicit clamp value.
    pub fn uniform_with_clamp(n_steps: usize, noise_level: f64, t_clamp_max: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(OpdError::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        let n = n_steps as f64;
        let times = (0..=n_steps).map(|j| (n - j as f64) / n).collect();
        Self::from_times(times, noise_level, t_clamp_max)
    }

    /// Build from an explicit grid; validates every invariant.
    pub fn from_times(times: Vec<f64>, noise_level: f64, t_clamp_max: f64) -> Result<Self> {
        if times.len() < 2 {
            return Err(OpdError::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        if !(noise_level >= 0.0) {
            return Err(OpdError::InvalidArgument(format!(
                "noise level must be >= 0, got {noise_level}"
            )));
        }
        if !(t_clamp_max > 0.0 && t_clamp_max < 1.0) {
            return Err(OpdError::InvalidArgument(format!(
                "t_clamp_max must lie in (0, 1), got {t_clamp_max}"
            )));
        }
        if times[0] != 1.0 || *times.last().unwrap() != 0.0 {
            return Err(OpdError::InvalidArgument(
                "schedule must start at t = 1 and end at t = 0".into(),
            ));
        }
        if !times.windows(2).all(|w| w[1] < w[0]) {
            return Err(OpdError::InvalidArgument(
                "schedule times must be strictly decreasing".into(),
            ));
        }
        let dt_sum: f64 = times.windows(2).map(|w| w[1] - w[0]).sum();
        if (dt_sum + 1.0).abs() > 1e-9 {
            return Err(OpdError::InvalidArgument(format!(
                "schedule step sizes must sum to -1, got {dt_sum}"
            )));
        }
        Ok(Schedule {
            times,
            noise_level,
            t_clamp_max,
        })
    }

    /// Number of integration steps `N`.
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Grid time `t_j`, valid for `0 <= j <= N`.
    pub fn t(&self, j: usize) -> f64 {
        self.times[j]
    }

    /// Step size `delta_t_j = t_{j+1} - t_j < 0`, valid for `0 <= j < N`.
    pub fn dt(&self, j: usize) -> f64 {
        self.times[j + 1] - self.times[j]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn noise_level(&self) -> f64 {
        self.noise_level
    }

    pub fn t_clamp_max(&self) -> f64 {
        self.t_clamp_max
    }

    /// True when `a = 0`, i.e. the sampler is the deterministic ODE.
    pub fn is_deterministic(&self) -> bool {
        self.noise_level == 0.0
    }

    /// Diffusion coefficient `a * sqrt(t' / (1 - t'))` with
    /// `t' = min(t, t_clamp_max)`. Returns 0 when `a = 0`.
    pub fn sigma_t(&self, t: f64) -> f64 {
        if self.noise_level == 0.0 {
            return 0.0;
        }
        let t = t.min(self.t_clamp_max).max(0.0);
        self.noise_level * (t / (1.0 - t)).sqrt()
    }

    /// Per-step variance `sigma_{t_j}^2 * (-delta_t_j)`.
    pub fn step_variance(&self, j: usize) -> Result<f64> {
        if j >= self.n_steps() {
            return Err(OpdError::InvalidArgument(format!(
                "step index {j} out of range for {}-step schedule",
                self.n_steps()
            )));
        }
        let sigma = self.sigma_t(self.t(j));
        Ok(sigma * sigma * (-self.dt(j)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_grid_times() {
        let s = Schedule::uniform(4, 0.0).unwrap();
        assert_eq!(s.times(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(s.n_steps(), 4);
    }

    #[test]
    fn single_step_schedule() {
        let s = Schedule::uniform(1, 0.7).unwrap();
        assert_eq!(s.times(), &[1.0, 0.0]);
        assert_eq!(s.dt(0), -1.0);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(matches!(
            Schedule::uniform(0, 0.0),
            Err(OpdError::InvalidArgument(_))
        ));
    }

    #[test]
    fn all_step_variances_positive_with_noise() {
        let s = Schedule::uniform(10, 0.7).unwrap();
        for j in 0..s.n_steps() {
            assert!(s.step_variance(j).unwrap() > 0.0, "step {j}");
        }
    }

    #[test]
    fn sigma_at_symmetry_point() {
        let s = Schedule::uniform(4, 0.7).unwrap();
        assert!((s.sigma_t(0.5) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn sigma_zero_noise_level() {
        let s = Schedule::uniform(4, 0.0).unwrap();
        assert_eq!(s.sigma_t(0.8), 0.0);
    }

    #[test]
    fn sigma_hand_evaluated() {
        // sqrt(0.8 / 0.2) = 2 exactly, so sigma = 1.4.
        let s = Schedule::uniform(4, 0.7).unwrap();
        assert!((s.sigma_t(0.8) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn sigma_clamped_at_one() {
        let s = Schedule::uniform(4, 0.7).unwrap();
        let clamped = s.sigma_t(1.0);
        assert!(clamped.is_finite());
        assert_eq!(clamped, s.sigma_t(s.t_clamp_max()));
    }

    #[test]
    fn step_variance_hand_evaluated() {
        // t_j = 0.5, dt = -0.1: sigma^2 = 0.49, variance = 0.049.
        let s = Schedule::from_times(vec![1.0, 0.5, 0.4, 0.0], 0.7, DEFAULT_T_CLAMP_MAX).unwrap();
        assert!((s.step_variance(1).unwrap() - 0.049).abs() < 1e-12);
    }

    #[test]
    fn step_variance_hand_evaluated_t08() {
        // t_j = 0.8, dt = -0.1: sigma^2 = 0.49 * 4 = 1.96, variance = 0.196.
        let s = Schedule::from_times(vec![1.0, 0.8, 0.7, 0.0], 0.7, DEFAULT_T_CLAMP_MAX).unwrap();
        assert!((s.step_variance(1).unwrap() - 0.196).abs() < 1e-12);
    }

    #[test]
    fn step_variance_zero_noise() {
        let s = Schedule::uniform(6, 0.0).unwrap();
        for j in 0..6 {
            assert_eq!(s.step_variance(j).unwrap(), 0.0);
        }
    }

    #[test]
    fn step_variance_out_of_range() {
        let s = Schedule::uniform(3, 0.5).unwrap();
        assert!(s.step_variance(3).is_err());
    }

    #[test]
    fn serde_round_trip_is_bit_exact() {
        let s = Schedule::uniform(7, 0.3).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: Schedule = serde_json::from_str(&json).unwrap();
        assert_eq!(s.times().len(), back.times().len());
        for (a, b) in s.times().iter().zip(back.times()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(s.noise_level().to_bits(), back.noise_level().to_bits());
        assert_eq!(s.t_clamp_max().to_bits(), back.t_clamp_max().to_bits());
    }

    #[test]
    fn non_monotone_grid_rejected() {
        assert!(Schedule::from_times(vec![1.0, 0.5, 0.6, 0.0], 0.0, 0.999).is_err());
    }

    proptest! {
        #[test]
        fn invariants_hold_for_uniform(n in 1usize..200, a in 0.0f64..2.0) {
            let s = Schedule::uniform(n, a).unwrap();
            let dt_sum: f64 = (0..s.n_steps()).map(|j| s.dt(j)).sum();
            prop_assert!((dt_sum + 1.0).abs() < 1e-9);
            for j in 0..s.n_steps() {
                prop_assert!(s.dt(j) < 0.0);
                prop_assert!(s.t(j + 1) < s.t(j));
                let var = s.step_variance(j).unwrap();
                prop_assert!(var >= 0.0);
                // Exact defining identity.
                let sigma = s.sigma_t(s.t(j));
                prop_assert_eq!(var.to_bits(), (sigma * sigma * (-s.dt(j))).to_bits());
                if a == 0.0 {
                    prop_assert_eq!(var, 0.0);
                }
            }
        }
    }
}
