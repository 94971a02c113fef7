//! Stage-1 reinforcement-learning teachers: a group-relative clipped policy
//! gradient on the per-step Gaussian transition policy.
//!
//! Each iteration samples groups of stochastic rollouts per task, scores the
//! terminal states with the task reward, normalizes rewards within each
//! group, and broadcasts the normalized advantage to every step of the
//! rollout. The update maximizes the clipped surrogate over per-step
//! transition log-densities. One optimizer step per rollout batch keeps the
//! rollout policy equal to the update policy, so the importance ratios are
//! exactly 1 and clipping never activates under the default configuration.
//!
//! The same round engine drives joint multi-task RL and cascade RL in
//! [`crate::opd_trainer`]; a single task is the teacher special case.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OpdError, Result};
use crate::net::{ParamGradient, VelocityField};
use crate::objectives::kl_to_reference_term;
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::Seeder;
use crate::sampler::{rollout_with_logp, step_coeffs, Trajectory};
use crate::schedule::{Schedule, DEFAULT_T_CLAMP_MAX};
use crate::tape::Tape;
use crate::tasks::Task;

/// Configuration of the RL trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    /// Rollouts per advantage-normalization group; at least 2.
    pub group_size: usize,
    /// Groups collected per task per iteration.
    pub groups_per_iter: usize,
    pub iterations: usize,
    pub lr: f64,
    pub clip_eps: f64,
    /// Sampler noise level; must be positive (the policy needs a density).
    pub noise_level: f64,
    pub n_steps: usize,
    #[serde(default = "default_clamp")]
    pub t_clamp_max: f64,
    /// Weight of the KL-to-reference trust-region penalty; 0 disables it.
    #[serde(default)]
    pub kl_beta: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
}

fn default_clamp() -> f64 {
    DEFAULT_T_CLAMP_MAX
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            group_size: 16,
            groups_per_iter: 4,
            iterations: 300,
            lr: 3e-4,
            clip_eps: 0.2,
            noise_level: 0.7,
            n_steps: 16,
            t_clamp_max: DEFAULT_T_CLAMP_MAX,
            kl_beta: 0.0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(OpdError::Config(
                "rl group_size must be at least 2 (group normalization)".into(),
            ));
        }
        if !(self.noise_level > 0.0) {
            return Err(OpdError::Config(
                "rl noise_level must be positive (the policy gradient needs a stochastic policy)"
                    .into(),
            ));
        }
        if self.groups_per_iter == 0 || self.iterations == 0 || self.n_steps == 0 {
            return Err(OpdError::Config(
                "rl groups_per_iter, iterations and n_steps must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.clip_eps > 0.0) {
            return Err(OpdError::Config(
                "rl lr and clip_eps must be positive".into(),
            ));
        }
        if self.kl_beta < 0.0 {
            return Err(OpdError::Config("rl kl_beta must be >= 0".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::uniform_with_clamp(self.n_steps, self.noise_level, self.t_clamp_max)
    }

    pub fn rollouts_per_iter(&self) -> usize {
        self.group_size * self.groups_per_iter
    }
}

/// Group-relative advantage: `(r - mean) / max(std, 1e-6)` with the
/// population standard deviation.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(OpdError::InvalidArgument(
            "group_advantage needs at least 2 rewards".into(),
        ));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt().max(1e-6);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// One per-iteration, per-task metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct RlRow {
    pub iter: usize,
    pub task_id: usize,
    /// Mean terminal reward of this iteration's training rollouts.
    pub mean_reward: f64,
    /// Surrogate loss value for this task.
    pub loss: f64,
    pub wallclock_s: f64,
}

/// Result of an RL run.
#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub field: VelocityField,
    pub rows: Vec<RlRow>,
    /// Student-network forward evaluations consumed by training.
    pub fwd_evals: u64,
    /// Largest observed `|ratio - 1|` across all surrogate evaluations;
    /// exactly 0 in the one-update-per-batch regime.
    pub max_ratio_deviation: f64,
    /// L2 norm of each applied parameter update.
    pub update_norms: Vec<f64>,
}

/// Surrogate loss and gradient for one rollout with a constant advantage.
fn surrogate_rollout_loss(
    student: &VelocityField,
    traj: &Trajectory,
    logp_old: &[f64],
    advantage: f64,
    clip_eps: f64,
    kl_beta: f64,
    reference: Option<&VelocityField>,
) -> Result<(f64, ParamGradient, f64, u64)> {
    let sched = &traj.schedule;
    let mut tape = Tape::new(student);
    let mut total = tape.constant(0.0);
    let mut max_ratio_dev = 0.0f64;
    for j in 0..sched.n_steps() {
        let x = &traj.states[j];
        let action = &traj.states[j + 1];
        let coeffs = step_coeffs(sched, j)?;
        let var = coeffs.var;
        let d = x.len() as f64;
        let v = tape.forward(x, sched.t(j), traj.cond)?;
        let bias: Vec<f64> = x.iter().map(|xi| coeffs.mean_x * xi).collect();
        let mu = tape.affine(&[(coeffs.mean_v, v)], &bias);
        let diff = tape.affine(&[(-1.0, mu)], action);
        let sq = tape.norm_sq(diff);
        let core = tape.mul_const(sq, -1.0 / (2.0 * var));
        let logp = tape.add_const(core, -0.5 * d * (std::f64::consts::TAU * var).ln());
        let delta_logp = tape.add_const(logp, -logp_old[j]);
        let ratio = tape.exp(delta_logp);
        max_ratio_dev = max_ratio_dev.max((tape.value(ratio) - 1.0).abs());
        let unclipped = tape.mul_const(ratio, advantage);
        let clipped_ratio = tape.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
        let clipped = tape.mul_const(clipped_ratio, advantage);
        let objective = tape.min(unclipped, clipped);
        let step_loss = tape.neg(objective);
        total = tape.add(total, step_loss);
        if kl_beta > 0.0 {
            if let Some(reference) = reference {
                let penalty = kl_to_reference_term(&mut tape, reference, x, j, sched, traj.cond)?;
                let weighted = tape.mul_const(penalty, kl_beta);
                total = tape.add(total, weighted);
            }
        }
    }
    let forwards = tape.n_forwards();
    let (value, grad) = tape.backward(total)?;
    Ok((value, grad, max_ratio_dev, forwards))
}

/// Round-robin clipped-surrogate RL over a task list: per round, collect
/// grouped rollouts for every task, accumulate the per-task batch gradients,
/// and apply a single optimizer step on the task average.
///
/// `prefix` names the random substreams, so two runs with the same seeder,
/// prefix, and inputs coincide bit-for-bit. On numeric divergence the last
/// finite parameters are written to `rescue` (if given) before the error is
/// returned.
pub fn rl_rounds(
    init: &VelocityField,
    tasks: &[Task],
    cfg: &RlConfig,
    seeder: &Seeder,
    prefix: &str,
    rescue: Option<&Path>,
) -> Result<RlOutcome> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(OpdError::Config("rl needs at least one task".into()));
    }
    let sched = Arc::new(cfg.schedule()?);
    let reference = (cfg.kl_beta > 0.0).then(|| init.clone());
    let mut student = init.clone();
    let n_params = student.params().len();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, n_params);
    let batch = cfg.rollouts_per_iter();
    let started = Instant::now();

    let mut rows = Vec::with_capacity(cfg.iterations * tasks.len());
    let mut fwd_evals = 0u64;
    let mut max_ratio_deviation = 0.0f64;
    let mut update_norms = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let mut total_grad = vec![0.0; n_params];
        for task in tasks {
            let rollouts: Vec<(Trajectory, Vec<f64>)> = (0..batch)
                .into_par_iter()
                .map(|i| {
                    let name =
                        format!("{prefix}/iter{iter}/task{}/rollout{i}", task.id);
                    let mut rng = seeder.stream(&name);
                    rollout_with_logp(&student, &sched, task.id, &mut rng)
                })
                .collect::<Result<_>>()?;
            fwd_evals += (batch * cfg.n_steps) as u64;

            let rewards: Vec<f64> = rollouts
                .iter()
                .map(|(traj, _)| task.reward.eval(traj.terminal()))
                .collect();
            let mut advantages = Vec::with_capacity(batch);
            for group in rewards.chunks(cfg.group_size) {
                advantages.extend(group_advantage(group)?);
            }

            let evals: Vec<(f64, ParamGradient, f64, u64)> = rollouts
                .par_iter()
                .zip(advantages.par_iter())
                .map(|((traj, logp_old), &adv)| {
                    surrogate_rollout_loss(
                        &student,
                        traj,
                        logp_old,
                        adv,
                        cfg.clip_eps,
                        cfg.kl_beta,
                        reference.as_ref(),
                    )
                })
                .collect::<std::result::Result<_, _>>()
                .map_err(|err| {
                    if let Some(path) = rescue {
                        let _ = student.save(path);
                    }
                    err
                })?;

            let mut task_loss = 0.0;
            for (value, grad, ratio_dev, fwds) in &evals {
                task_loss += value;
                max_ratio_deviation = max_ratio_deviation.max(*ratio_dev);
                fwd_evals += fwds;
                for (acc, g) in total_grad.iter_mut().zip(&grad.grad) {
                    // Mean over the batch, then over tasks.
                    *acc += g / (batch as f64 * tasks.len() as f64);
                }
            }
            task_loss /= batch as f64;
            let mean_reward = rewards.iter().sum::<f64>() / batch as f64;
            rows.push(RlRow {
                iter,
                task_id: task.id,
                mean_reward,
                loss: task_loss,
                wallclock_s: started.elapsed().as_secs_f64(),
            });
        }
        let norm = optimizer.step(student.params_mut(), &total_grad);
        update_norms.push(norm);
    }

    Ok(RlOutcome {
        field: student,
        rows,
        fwd_evals,
        max_ratio_deviation,
        update_norms,
    })
}

/// Train a single-task teacher from the pretrained base model.
pub fn train_teacher(
    base: &VelocityField,
    task: &Task,
    cfg: &RlConfig,
    seeder: &Seeder,
    prefix: &str,
    rescue: Option<&Path>,
) -> Result<RlOutcome> {
    rl_rounds(base, std::slice::from_ref(task), cfg, seeder, prefix, rescue)
}
