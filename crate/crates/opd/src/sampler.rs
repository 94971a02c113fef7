//! One-step transition kernels and full rollouts for the SDE and ODE
//! sampling regimes.
//!
//! The reverse-time update from `t_j` to `t_{j+1}` is
//!
//! ```text
//! x' = x + [v + sigma^2/(2t) * (x + (1-t) v)] * dt + sigma * sqrt(-dt) * eps
//! ```
//!
//! whose deterministic part is an affine map of `(x, v)`; [`step_coeffs`]
//! exposes the two coefficients so objectives can rebuild the transition
//! mean differentiably. With noise level zero the coefficients collapse to
//! the plain Euler step `x + v * dt`, bit-for-bit.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde_json::json;

use crate::error::{OpdError, Result};
use crate::net::VelocityField;
use crate::rng::standard_normal_vec;
use crate::schedule::Schedule;

/// Affine coefficients of the one-step transition:
/// `mean = mean_x * x + mean_v * v`, kernel variance `var` (isotropic).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoeffs {
    pub mean_x: f64,
    pub mean_v: f64,
    pub var: f64,
}

/// Transition coefficients for step `j` of `sched`.
pub fn step_coeffs(sched: &Schedule, j: usize) -> Result<StepCoeffs> {
    let var = sched.step_variance(j)?;
    let t = sched.t(j);
    let dt = sched.dt(j);
    let sigma = sched.sigma_t(t);
    let sig2 = sigma * sigma;
    Ok(StepCoeffs {
        mean_x: 1.0 + sig2 * dt / (2.0 * t),
        mean_v: (1.0 + sig2 * (1.0 - t) / (2.0 * t)) * dt,
        var,
    })
}

/// Deterministic part of the transition kernel at state `x`, step `j`.
pub fn transition_mean(
    vf: &VelocityField,
    x: &[f64],
    j: usize,
    sched: &Schedule,
    c: usize,
) -> Result<Vec<f64>> {
    let coeffs = step_coeffs(sched, j)?;
    let v = vf.forward(x, sched.t(j), c)?;
    Ok(x.iter()
        .zip(&v)
        .map(|(xi, vi)| coeffs.mean_x * xi + coeffs.mean_v * vi)
        .collect())
}

/// One stochastic step: `transition_mean + sqrt(step_variance) * eps`.
pub fn sde_step(
    vf: &VelocityField,
    x: &[f64],
    j: usize,
    sched: &Schedule,
    c: usize,
    eps: &[f64],
) -> Result<Vec<f64>> {
    let std = sched.step_variance(j)?.sqrt();
    let mut next = transition_mean(vf, x, j, sched, c)?;
    for (n, e) in next.iter_mut().zip(eps) {
        *n += std * e;
    }
    Ok(next)
}

/// Dedicated deterministic Euler step `x + v * dt`.
pub fn ode_step(
    vf: &VelocityField,
    x: &[f64],
    j: usize,
    sched: &Schedule,
    c: usize,
) -> Result<Vec<f64>> {
    let dt = sched.dt(j);
    let v = vf.forward(x, sched.t(j), c)?;
    Ok(x.iter().zip(&v).map(|(xi, vi)| xi + vi * dt).collect())
}

/// Isotropic Gaussian log-density
/// `-(d/2) ln(2 pi var) - |a - mu|^2 / (2 var)`.
///
/// ODE kernels (`var = 0`) have no density and are rejected.
pub fn log_transition_density(mu: &[f64], var: f64, a_next: &[f64]) -> Result<f64> {
    if !(var > 0.0) {
        return Err(OpdError::InvalidArgument(format!(
            "transition density needs var > 0, got {var} (deterministic kernels have none)"
        )));
    }
    if mu.len() != a_next.len() {
        return Err(OpdError::InvalidArgument(
            "mean and sample dimensions differ".into(),
        ));
    }
    let d = mu.len() as f64;
    let sq: f64 = mu
        .iter()
        .zip(a_next)
        .map(|(m, a)| (a - m) * (a - m))
        .sum();
    Ok(-0.5 * d * (std::f64::consts::TAU * var).ln() - sq / (2.0 * var))
}

/// Same Gaussian log-density as [`log_transition_density`], but evaluated
/// with the exact operation order that the loss tape uses. Surrogate losses
/// compute the snapshot side with this helper so the importance ratio is
/// exactly 1 when the parameters coincide; the two functions agree to
/// floating-point rounding otherwise.
pub fn matched_log_density(mu: &[f64], var: f64, a_next: &[f64]) -> f64 {
    let d = mu.len() as f64;
    let norm_const = -0.5 * d * (std::f64::consts::TAU * var).ln();
    let inv_neg_two_var = -1.0 / (2.0 * var);
    let sq: f64 = a_next
        .iter()
        .zip(mu)
        .map(|(a, m)| {
            let diff = a + (-1.0) * m;
            diff * diff
        })
        .sum();
    sq * inv_neg_two_var + norm_const
}

/// A recorded on-policy rollout.
///
/// For recorded SDE rollouts `states.len() == N + 1` and
/// `noises.len() == N`; ODE rollouts store no noises. Replaying the stored
/// noises through [`sde_step`] reproduces the states bit-exactly.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub noises: Vec<Vec<f64>>,
    pub cond: usize,
    pub schedule: Arc<Schedule>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has states")
    }

    /// Debug dump: one JSON object per step with state and injected noise.
    pub fn dump_jsonl(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| OpdError::io(path, e))?;
        for (j, state) in self.states.iter().enumerate() {
            let noise = if j < self.noises.len() {
                json!(self.noises[j])
            } else {
                json!(null)
            };
            let line = json!({ "j": j, "state": state, "noise": noise });
            writeln!(file, "{line}").map_err(|e| OpdError::io(path, e))?;
        }
        Ok(())
    }
}

/// Roll out the field from `x_{t_0} ~ N(0, I)` down to `t_N = 0`.
///
/// No parameter-gradient information is retained. With `record` unset only
/// the initial and terminal states are kept (and no noises); use that mode
/// for evaluation sampling.
pub fn rollout<R: Rng + ?Sized>(
    vf: &VelocityField,
    sched: &Arc<Schedule>,
    c: usize,
    rng: &mut R,
    record: bool,
) -> Result<Trajectory> {
    let d = vf.arch().data_dim;
    let n = sched.n_steps();
    let stochastic = !sched.is_deterministic();
    let mut states = Vec::with_capacity(if record { n + 1 } else { 2 });
    let mut noises = Vec::with_capacity(if record && stochastic { n } else { 0 });
    let mut x = standard_normal_vec(rng, d);
    states.push(x.clone());
    for j in 0..n {
        x = if stochastic {
            let eps = standard_normal_vec(rng, d);
            let next = sde_step(vf, &x, j, sched, c, &eps)?;
            if record {
                noises.push(eps);
            }
            next
        } else {
            ode_step(vf, &x, j, sched, c)?
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(OpdError::Numeric(format!(
                "rollout state became non-finite at step {j}"
            )));
        }
        if record || j + 1 == n {
            states.push(x.clone());
        }
    }
    Ok(Trajectory {
        states,
        noises,
        cond: c,
        schedule: Arc::clone(sched),
    })
}

/// Recorded stochastic rollout that also returns each step's transition
/// log-density under the rollout parameters (the surrogate snapshot term),
/// at no extra network cost.
pub fn rollout_with_logp<R: Rng + ?Sized>(
    vf: &VelocityField,
    sched: &Arc<Schedule>,
    c: usize,
    rng: &mut R,
) -> Result<(Trajectory, Vec<f64>)> {
    if sched.is_deterministic() {
        return Err(OpdError::InvalidArgument(
            "rollout_with_logp needs a stochastic sampler".into(),
        ));
    }
    let d = vf.arch().data_dim;
    let n = sched.n_steps();
    let mut states = Vec::with_capacity(n + 1);
    let mut noises = Vec::with_capacity(n);
    let mut log_probs = Vec::with_capacity(n);
    let mut x = standard_normal_vec(rng, d);
    states.push(x.clone());
    for j in 0..n {
        let var = sched.step_variance(j)?;
        let std = var.sqrt();
        let mean = transition_mean(vf, &x, j, sched, c)?;
        let eps = standard_normal_vec(rng, d);
        let next: Vec<f64> = mean
            .iter()
            .zip(&eps)
            .map(|(m, e)| m + std * e)
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(OpdError::Numeric(format!(
                "rollout state became non-finite at step {j}"
            )));
        }
        log_probs.push(matched_log_density(&mean, var, &next));
        noises.push(eps);
        states.push(next.clone());
        x = next;
    }
    Ok((
        Trajectory {
            states,
            noises,
            cond: c,
            schedule: Arc::clone(sched),
        },
        log_probs,
    ))
}
