//! Distillation and policy-gradient objectives.
//!
//! Student and teacher one-step transition kernels share the same isotropic
//! covariance, so their reverse KL has the closed form
//! `|mu_S - mu_T|^2 / (2 var)`. Summed along an on-policy trajectory this is
//! the stochastic-sampler distillation loss; with zero noise the kernels are
//! deterministic and the objective becomes plain squared-L2 transition
//! matching. The PPO-style surrogate optimizes the same quantity through an
//! importance ratio and the negative KL as a dense per-step advantage; its
//! gradient decomposes into the pathwise term plus a zero-mean
//! score-function term, so the two estimators agree in expectation while the
//! surrogate carries extra variance. Teachers are always evaluated without
//! gradients.
//!
//! Per-step KL terms are computed in f64 throughout: late steps have small
//! variances and the quotient is the loss-defining quantity.

use rand::Rng;

use crate::error::{OpdError, Result};
use crate::net::{ParamGradient, VelocityField};
use crate::rng::standard_normal_vec;
use crate::sampler::{
    log_transition_density, matched_log_density, step_coeffs, transition_mean, Trajectory,
};
use crate::schedule::Schedule;
use crate::tape::{ScalarId, Tape};

/// How per-step terms are reduced into a trajectory loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepReduction {
    /// Plain sum over steps (the defining form).
    Sum,
    /// Sum divided by the number of steps.
    Mean,
}

impl StepReduction {
    fn apply(self, tape: &mut Tape, total: ScalarId, n_steps: usize) -> ScalarId {
        match self {
            StepReduction::Sum => total,
            StepReduction::Mean => tape.mul_const(total, 1.0 / n_steps as f64),
        }
    }
}

/// Options shared by the trajectory losses.
#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    pub step_reduction: StepReduction,
    /// Record per-step terms for the metrics stream.
    pub record_terms: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            step_reduction: StepReduction::Sum,
            record_terms: false,
        }
    }
}

/// One step's contribution to a trajectory loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLossTerm {
    pub j: usize,
    /// KL (or L2) value of this step; never negative.
    pub kl: f64,
    /// Importance ratio, surrogate losses only. Exactly 1 at the rollout
    /// parameters.
    pub ratio: Option<f64>,
    /// Advantage, surrogate losses only.
    pub advantage: Option<f64>,
}

/// Evaluated loss: value, exact parameter gradient, optional per-step trace,
/// and how many student-network forwards the evaluation consumed.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub grad: ParamGradient,
    pub terms: Option<Vec<StepLossTerm>>,
    pub student_forwards: u64,
}

/// Closed-form reverse KL between same-covariance isotropic Gaussians:
/// `|mu1 - mu2|^2 / (2 var)`.
pub fn gaussian_kl_same_cov(mu1: &[f64], mu2: &[f64], var: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(OpdError::InvalidArgument(format!(
            "gaussian KL needs var > 0, got {var}"
        )));
    }
    if mu1.len() != mu2.len() {
        return Err(OpdError::InvalidArgument("mean dimensions differ".into()));
    }
    let sq: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / (2.0 * var))
}

/// Monte-Carlo estimate of the same KL: draw `x ~ N(mu1, var I)`, average
/// `log p1(x) - log p2(x)`. Returns `(estimate, standard error)`.
pub fn mc_kl_oracle<R: Rng + ?Sized>(
    mu1: &[f64],
    mu2: &[f64],
    var: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if n_samples < 1000 {
        return Err(OpdError::InvalidArgument(format!(
            "mc_kl_oracle needs at least 1000 samples, got {n_samples}"
        )));
    }
    if !(var > 0.0) {
        return Err(OpdError::InvalidArgument(format!(
            "mc_kl_oracle needs var > 0, got {var}"
        )));
    }
    let d = mu1.len();
    let std = var.sqrt();
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 0..n_samples {
        let eps = standard_normal_vec(rng, d);
        let x: Vec<f64> = mu1.iter().zip(&eps).map(|(m, e)| m + std * e).collect();
        let w = log_transition_density(mu1, var, &x)? - log_transition_density(mu2, var, &x)?;
        let delta = w - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (w - mean);
    }
    let sample_var = m2 / (n_samples - 1) as f64;
    Ok((mean, (sample_var / n_samples as f64).sqrt()))
}

/// Student and teacher transition means at one recorded state. The student
/// mean is a differentiable tape node; the teacher is a constant.
struct StepMeans {
    mu_s: crate::tape::VecId,
    mu_t: Vec<f64>,
    var: f64,
}

fn step_means(
    tape: &mut Tape,
    teacher: &VelocityField,
    x: &[f64],
    j: usize,
    sched: &Schedule,
    c: usize,
) -> Result<StepMeans> {
    let coeffs = step_coeffs(sched, j)?;
    let t = sched.t(j);
    let v_s = tape.forward(x, t, c)?;
    let bias: Vec<f64> = x.iter().map(|xi| coeffs.mean_x * xi).collect();
    let mu_s = tape.affine(&[(coeffs.mean_v, v_s)], &bias);
    let mu_t = transition_mean(teacher, x, j, sched, c)?;
    Ok(StepMeans {
        mu_s,
        mu_t,
        var: coeffs.var,
    })
}

/// Per-step mean mismatch `|mu_S - mu_T|^2` scaled by `scale`.
fn scaled_mismatch_term(
    tape: &mut Tape,
    means: &StepMeans,
    scale: f64,
) -> ScalarId {
    let neg_mu_t: Vec<f64> = means.mu_t.iter().map(|v| -v).collect();
    let diff = tape.affine(&[(1.0, means.mu_s)], &neg_mu_t);
    let sq = tape.norm_sq(diff);
    tape.mul_const(sq, scale)
}

/// Per-step KL of the current policy against a frozen reference transition,
/// `|mu_theta - mu_ref|^2 / (2 var)`. Used as the optional trust-region
/// penalty in the RL trainers.
pub(crate) fn kl_to_reference_term(
    tape: &mut Tape,
    reference: &VelocityField,
    x: &[f64],
    j: usize,
    sched: &Schedule,
    c: usize,
) -> Result<ScalarId> {
    let means = step_means(tape, reference, x, j, sched, c)?;
    Ok(scaled_mismatch_term(tape, &means, 1.0 / (2.0 * means.var)))
}

/// Per-step PPO surrogate `-min(ratio * A, clip(ratio) * A)` with
/// `A = -KL(mu_S || mu_T)`; the gradient flows through both the ratio and
/// the KL. Returns the loss node plus the step trace.
#[allow(clippy::too_many_arguments)]
fn ppo_step_term(
    tape: &mut Tape,
    snapshot: &VelocityField,
    teacher: &VelocityField,
    x: &[f64],
    action: &[f64],
    j: usize,
    sched: &Schedule,
    c: usize,
    clip_eps: f64,
) -> Result<(ScalarId, StepLossTerm)> {
    let means = step_means(tape, teacher, x, j, sched, c)?;
    let var = means.var;
    if !(var > 0.0) {
        return Err(OpdError::InvalidArgument(
            "PPO surrogate needs a stochastic sampler (step variance is zero)".into(),
        ));
    }

    // KL advantage.
    let kl = scaled_mismatch_term(tape, &means, 1.0 / (2.0 * var));
    let advantage = tape.neg(kl);

    // Importance ratio under current vs snapshot parameters. The snapshot
    // side mirrors the tape arithmetic operation for operation, so when the
    // parameters coincide the log-densities are bitwise equal and the ratio
    // is exactly 1.
    let d = x.len() as f64;
    let norm_const = -0.5 * d * (std::f64::consts::TAU * var).ln();
    let inv_neg_two_var = -1.0 / (2.0 * var);
    let diff_a = tape.affine(&[(-1.0, means.mu_s)], action);
    let sq_a = tape.norm_sq(diff_a);
    let core = tape.mul_const(sq_a, inv_neg_two_var);
    let logp = tape.add_const(core, norm_const);
    let mu_old = transition_mean(snapshot, x, j, sched, c)?;
    let logp_old = matched_log_density(&mu_old, var, action);
    let delta_logp = tape.add_const(logp, -logp_old);
    let ratio = tape.exp(delta_logp);

    let unclipped = tape.mul(ratio, advantage);
    let clipped_ratio = tape.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    let clipped = tape.mul(clipped_ratio, advantage);
    let objective = tape.min(unclipped, clipped);
    let loss = tape.neg(objective);
    let term = StepLossTerm {
        j,
        kl: tape.value(kl),
        ratio: Some(tape.value(ratio)),
        advantage: Some(tape.value(advantage)),
    };
    Ok((loss, term))
}

fn check_recorded(traj: &Trajectory) -> Result<()> {
    let n = traj.schedule.n_steps();
    if traj.states.len() != n + 1 {
        return Err(OpdError::InvalidArgument(format!(
            "trajectory must record all {} states, found {}",
            n + 1,
            traj.states.len()
        )));
    }
    Ok(())
}

/// Stochastic-sampler distillation loss: per-step closed-form KL summed
/// along the trajectory. The teacher is frozen; only the student forward
/// inside `mu_S` carries gradients.
pub fn opd_sde_loss(
    student: &VelocityField,
    teacher: &VelocityField,
    traj: &Trajectory,
    opts: LossOptions,
) -> Result<LossEval> {
    let sched = &traj.schedule;
    if sched.is_deterministic() {
        return Err(OpdError::InvalidArgument(
            "schedule has zero noise; use opd_ode_loss for the deterministic regime".into(),
        ));
    }
    check_recorded(traj)?;
    let mut tape = Tape::new(student);
    let mut terms = opts.record_terms.then(Vec::new);
    let mut total = tape.constant(0.0);
    for j in 0..sched.n_steps() {
        let means = step_means(&mut tape, teacher, &traj.states[j], j, sched, traj.cond)?;
        let term = scaled_mismatch_term(&mut tape, &means, 1.0 / (2.0 * means.var));
        if let Some(ts) = terms.as_mut() {
            ts.push(StepLossTerm {
                j,
                kl: tape.value(term),
                ratio: None,
                advantage: None,
            });
        }
        total = tape.add(total, term);
    }
    let loss = opts.step_reduction.apply(&mut tape, total, sched.n_steps());
    let forwards = tape.n_forwards();
    let (value, grad) = tape.backward(loss)?;
    Ok(LossEval {
        value,
        grad,
        terms,
        student_forwards: forwards,
    })
}

/// Deterministic-sampler distillation loss: per-step squared-L2 transition
/// matching `0.5 |mu_S - mu_T|^2` with `mu = x + v dt`.
pub fn opd_ode_loss(
    student: &VelocityField,
    teacher: &VelocityField,
    traj: &Trajectory,
    opts: LossOptions,
) -> Result<LossEval> {
    let sched = &traj.schedule;
    if !sched.is_deterministic() {
        return Err(OpdError::InvalidArgument(
            "schedule has nonzero noise; use opd_sde_loss for the stochastic regime".into(),
        ));
    }
    check_recorded(traj)?;
    let mut tape = Tape::new(student);
    let mut terms = opts.record_terms.then(Vec::new);
    let mut total = tape.constant(0.0);
    for j in 0..sched.n_steps() {
        let means = step_means(&mut tape, teacher, &traj.states[j], j, sched, traj.cond)?;
        let term = scaled_mismatch_term(&mut tape, &means, 0.5);
        if let Some(ts) = terms.as_mut() {
            ts.push(StepLossTerm {
                j,
                kl: tape.value(term),
                ratio: None,
                advantage: None,
            });
        }
        total = tape.add(total, term);
    }
    let loss = opts.step_reduction.apply(&mut tape, total, sched.n_steps());
    let forwards = tape.n_forwards();
    let (value, grad) = tape.backward(loss)?;
    Ok(LossEval {
        value,
        grad,
        terms,
        student_forwards: forwards,
    })
}

/// PPO-style surrogate over a recorded trajectory; the actions are the
/// recorded next states.
pub fn ppo_surrogate_loss(
    student: &VelocityField,
    snapshot: &VelocityField,
    teacher: &VelocityField,
    traj: &Trajectory,
    clip_eps: f64,
    opts: LossOptions,
) -> Result<LossEval> {
    check_recorded(traj)?;
    let actions: Vec<&[f64]> = traj.states[1..].iter().map(|s| s.as_slice()).collect();
    ppo_surrogate_loss_with_actions(
        student,
        snapshot,
        teacher,
        &traj.states[..traj.states.len() - 1],
        &actions,
        &traj.schedule,
        traj.cond,
        clip_eps,
        opts,
    )
}

/// PPO surrogate over explicit `(state, action)` pairs. Used directly by the
/// estimator studies, which resample actions at fixed states.
#[allow(clippy::too_many_arguments)]
pub fn ppo_surrogate_loss_with_actions(
    student: &VelocityField,
    snapshot: &VelocityField,
    teacher: &VelocityField,
    states: &[Vec<f64>],
    actions: &[&[f64]],
    sched: &Schedule,
    c: usize,
    clip_eps: f64,
    opts: LossOptions,
) -> Result<LossEval> {
    if !(clip_eps > 0.0) {
        return Err(OpdError::InvalidArgument(format!(
            "clip_eps must be positive, got {clip_eps}"
        )));
    }
    if sched.is_deterministic() {
        return Err(OpdError::InvalidArgument(
            "PPO surrogate needs a stochastic sampler (noise level is zero)".into(),
        ));
    }
    if states.len() != actions.len() || states.len() != sched.n_steps() {
        return Err(OpdError::InvalidArgument(
            "need one (state, action) pair per schedule step".into(),
        ));
    }
    let mut tape = Tape::new(student);
    let mut terms = opts.record_terms.then(Vec::new);
    let mut total = tape.constant(0.0);
    let mut snapshot_forwards = 0u64;
    for j in 0..sched.n_steps() {
        let (loss_j, term) = ppo_step_term(
            &mut tape, snapshot, teacher, &states[j], actions[j], j, sched, c, clip_eps,
        )?;
        snapshot_forwards += 1;
        if let Some(ts) = terms.as_mut() {
            ts.push(term);
        }
        total = tape.add(total, loss_j);
    }
    let loss = opts.step_reduction.apply(&mut tape, total, sched.n_steps());
    let forwards = tape.n_forwards() + snapshot_forwards;
    let (value, grad) = tape.backward(loss)?;
    Ok(LossEval {
        value,
        grad,
        terms,
        student_forwards: forwards,
    })
}

/// The extra stochastic term of the surrogate gradient at step `j`:
/// `KL_j * (eps_j^T grad mu_S) / sigma_j`, with the KL treated as a
/// constant. Zero-mean over the injected noise.
pub fn score_function_term(
    student: &VelocityField,
    teacher: &VelocityField,
    traj: &Trajectory,
    j: usize,
) -> Result<ParamGradient> {
    let sched = &traj.schedule;
    if sched.is_deterministic() {
        return Err(OpdError::InvalidArgument(
            "score-function term needs a stochastic sampler".into(),
        ));
    }
    if j >= traj.noises.len() {
        return Err(OpdError::InvalidArgument(format!(
            "no recorded noise for step {j}"
        )));
    }
    let x = &traj.states[j];
    let eps = &traj.noises[j];
    let var = sched.step_variance(j)?;
    let mu_s = transition_mean(student, x, j, sched, traj.cond)?;
    let mu_t = transition_mean(teacher, x, j, sched, traj.cond)?;
    let kl = gaussian_kl_same_cov(&mu_s, &mu_t, var)?;
    let scale = kl / var.sqrt();

    let mut tape = Tape::new(student);
    let means = step_means(&mut tape, teacher, x, j, sched, traj.cond)?;
    let dot = tape.dot_const(eps, means.mu_s);
    let scaled = tape.mul_const(dot, scale);
    let (_, grad) = tape.backward(scaled)?;
    Ok(grad)
}
