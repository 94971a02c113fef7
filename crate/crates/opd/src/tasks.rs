//! Synthetic target distributions, task rewards, and evaluation metrics.
//!
//! The built-in suite shares one base distribution, a ring of eight
//! Gaussians, and differs only in the reward. Mode centers sit at angles
//! `(2k+1) * pi/8` so that "the two modes with the largest x1" is an
//! unambiguous symmetric pair straddling the horizontal axis; that makes the
//! upper-half task and the east-modes task partially conflict, which the
//! multi-task comparisons rely on. All rewards are smooth and map into
//! `[0, 1]`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OpdError, Result};
use crate::net::VelocityField;
use crate::rng::standard_normal_vec;
use crate::sampler::ode_step;
use crate::schedule::Schedule;

/// Generative spec of a mixture of isotropic Gaussians with shared std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub centers: Vec<Vec<f64>>,
    pub std: f64,
}

impl MixtureSpec {
    /// Eight modes on a circle, centered at angles `(2k+1) * pi/8`.
    pub fn ring8(radius: f64, std: f64) -> Self {
        let centers = (0..8)
            .map(|k| {
                let angle = (2 * k + 1) as f64 * std::f64::consts::PI / 8.0;
                vec![radius * angle.cos(), radius * angle.sin()]
            })
            .collect();
        MixtureSpec { centers, std }
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = rng.gen_range(0..self.centers.len());
        let eps = standard_normal_vec(rng, self.dim());
        self.centers[k]
            .iter()
            .zip(&eps)
            .map(|(c, e)| c + self.std * e)
            .collect()
    }

    /// `E |x|^2 = mean_k |c_k|^2 + d * std^2`; used by the pretraining
    /// initial-loss oracle.
    pub fn second_moment(&self) -> f64 {
        let mean_center_sq: f64 = self
            .centers
            .iter()
            .map(|c| c.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / self.centers.len() as f64;
        mean_center_sq + self.dim() as f64 * self.std * self.std
    }
}

/// Smooth scalar reward on the data space, bounded in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reward {
    /// Sigmoid of `x1 / width`: rewards the upper half plane.
    Upper { width: f64 },
    /// Gaussian bump of `(|x| - radius)`: rewards staying on the ring.
    Ring { radius: f64, width: f64 },
    /// Soft-min-distance bump around a fixed set of target modes.
    NearModes { modes: Vec<Vec<f64>>, width: f64 },
}

impl Reward {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Reward::Upper { width } => 1.0 / (1.0 + (-x[1] / width).exp()),
            Reward::Ring { radius, width } => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let z = r - radius;
                (-z * z / (2.0 * width * width)).exp()
            }
            Reward::NearModes { modes, width } => {
                // Soft min of Euclidean distances, then a Gaussian bump.
                let sum: f64 = modes
                    .iter()
                    .map(|m| {
                        let d2: f64 =
                            x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                        (-d2.sqrt() / width).exp()
                    })
                    .sum();
                let soft_min = -width * sum.ln();
                (-soft_min * soft_min / (2.0 * width * width)).exp().min(1.0)
            }
        }
    }
}

/// A task: target distribution, reward, condition id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub target: MixtureSpec,
    pub reward: Reward,
    pub description: String,
}

/// Evaluation summary for one model on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: usize,
    pub mean_reward: f64,
    /// Fraction of target modes that receive at least 1% of the samples
    /// within distance 0.5.
    pub coverage: f64,
    pub n_samples: usize,
}

/// Config form of the built-in suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSuiteSpec {
    /// Base distribution family; only "ring8" is defined.
    #[serde(rename = "type")]
    pub kind: String,
    /// Reward names, in condition-id order: "upper", "ring", "east".
    pub rewards: Vec<String>,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_mode_std")]
    pub mode_std: f64,
    #[serde(default = "default_upper_width")]
    pub upper_width: f64,
    #[serde(default = "default_ring_width")]
    pub ring_width: f64,
    #[serde(default = "default_east_width")]
    pub east_width: f64,
}

fn default_radius() -> f64 {
    2.0
}
fn default_mode_std() -> f64 {
    0.15
}
fn default_upper_width() -> f64 {
    0.1
}
fn default_ring_width() -> f64 {
    0.2
}
fn default_east_width() -> f64 {
    0.3
}

impl Default for TaskSuiteSpec {
    fn default() -> Self {
        TaskSuiteSpec {
            kind: "ring8".into(),
            rewards: vec!["upper".into(), "ring".into(), "east".into()],
            radius: default_radius(),
            mode_std: default_mode_std(),
            upper_width: default_upper_width(),
            ring_width: default_ring_width(),
            east_width: default_east_width(),
        }
    }
}

/// The two mixture modes with the largest first coordinate.
fn east_modes(target: &MixtureSpec) -> Vec<Vec<f64>> {
    let mut centers = target.centers.clone();
    centers.sort_by(|a, b| b[0].partial_cmp(&a[0]).unwrap());
    centers.truncate(2);
    centers
}

/// Build a task suite from its config form.
pub fn task_suite(spec: &TaskSuiteSpec) -> Result<Vec<Task>> {
    if spec.kind != "ring8" {
        return Err(OpdError::Config(format!(
            "unknown task suite type {:?} (expected \"ring8\")",
            spec.kind
        )));
    }
    let target = MixtureSpec::ring8(spec.radius, spec.mode_std);
    spec.rewards
        .iter()
        .enumerate()
        .map(|(id, name)| {
            let (reward, description) = match name.as_str() {
                "upper" => (
                    Reward::Upper {
                        width: spec.upper_width,
                    },
                    "samples in the upper half plane".to_string(),
                ),
                "ring" => (
                    Reward::Ring {
                        radius: spec.radius,
                        width: spec.ring_width,
                    },
                    "samples on the mode circle".to_string(),
                ),
                "east" => (
                    Reward::NearModes {
                        modes: east_modes(&target),
                        width: spec.east_width,
                    },
                    "samples near the two easternmost modes".to_string(),
                ),
                other => {
                    return Err(OpdError::Config(format!(
                        "unknown reward {other:?} (expected upper/ring/east)"
                    )))
                }
            };
            Ok(Task {
                id,
                target: target.clone(),
                reward,
                description,
            })
        })
        .collect()
}

/// The default three-task suite on the 8-Gaussian ring.
pub fn builtin_task_suite() -> Vec<Task> {
    task_suite(&TaskSuiteSpec::default()).expect("default suite is valid")
}

/// I.i.d. samples from the task's target mixture.
pub fn sample_target<R: Rng + ?Sized>(task: &Task, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(OpdError::InvalidArgument(
            "sample_target needs n >= 1".into(),
        ));
    }
    Ok((0..n).map(|_| task.target.sample(rng)).collect())
}

/// Deterministic ODE integration from a given initial state.
fn ode_terminal(
    vf: &VelocityField,
    sched: &Schedule,
    c: usize,
    mut x: Vec<f64>,
) -> Result<Vec<f64>> {
    for j in 0..sched.n_steps() {
        x = ode_step(vf, &x, j, sched, c)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(OpdError::Numeric(format!(
                "evaluation rollout became non-finite at step {j}"
            )));
        }
    }
    Ok(x)
}

/// Mode-coverage fraction of a set of samples against a mixture: a mode
/// counts as covered when at least 1% of the samples land within 0.5 of it.
pub fn mode_coverage(samples: &[Vec<f64>], target: &MixtureSpec) -> f64 {
    let threshold = (samples.len() as f64 * 0.01).max(1.0);
    let mut covered = 0usize;
    for center in &target.centers {
        let near = samples
            .iter()
            .filter(|s| {
                let d2: f64 = s
                    .iter()
                    .zip(center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2.sqrt() <= 0.5
            })
            .count();
        if near as f64 >= threshold {
            covered += 1;
        }
    }
    covered as f64 / target.centers.len() as f64
}

/// Evaluate a field on a task: `n` deterministic rollouts conditioned on the
/// task id, mean reward and mode coverage over the terminal samples.
pub fn evaluate<R: Rng + ?Sized>(
    vf: &VelocityField,
    task: &Task,
    sched_eval: &Schedule,
    n: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    if !sched_eval.is_deterministic() {
        return Err(OpdError::InvalidArgument(
            "evaluation uses the deterministic sampler; set the eval noise level to 0".into(),
        ));
    }
    if n == 0 {
        return Err(OpdError::InvalidArgument("evaluate needs n >= 1".into()));
    }
    let d = vf.arch().data_dim;
    let inits: Vec<Vec<f64>> = (0..n).map(|_| standard_normal_vec(rng, d)).collect();
    let terminals: Vec<Vec<f64>> = inits
        .into_par_iter()
        .map(|x0| ode_terminal(vf, sched_eval, task.id, x0))
        .collect::<Result<_>>()?;
    let mean_reward =
        terminals.iter().map(|x| task.reward.eval(x)).sum::<f64>() / terminals.len() as f64;
    Ok(EvalReport {
        task_id: task.id,
        mean_reward,
        coverage: mode_coverage(&terminals, &task.target),
        n_samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::testutil::random_net;
    use proptest::prelude::*;

    #[test]
    fn upper_reward_saturates() {
        let suite = builtin_task_suite();
        let t0 = &suite[0];
        assert!(t0.reward.eval(&[0.0, 5.0]) > 0.999);
        assert!(t0.reward.eval(&[0.0, -5.0]) < 0.001);
    }

    #[test]
    fn ring_reward_peaks_on_circle() {
        let suite = builtin_task_suite();
        let t1 = &suite[1];
        for angle in [0.0f64, 1.0, 2.5, 4.0] {
            let x = [2.0 * angle.cos(), 2.0 * angle.sin()];
            assert!((t1.reward.eval(&x) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn east_modes_straddle_the_axis() {
        let suite = builtin_task_suite();
        let Reward::NearModes { modes, .. } = &suite[2].reward else {
            panic!("east task should be NearModes");
        };
        assert_eq!(modes.len(), 2);
        // Symmetric pair with the largest x1.
        assert!((modes[0][0] - modes[1][0]).abs() < 1e-12);
        assert!(modes[0][1] * modes[1][1] < 0.0, "modes on opposite sides");
        let expected_x = 2.0 * (std::f64::consts::PI / 8.0).cos();
        assert!((modes[0][0] - expected_x).abs() < 1e-12);
    }

    #[test]
    fn east_reward_near_one_at_its_modes() {
        let suite = builtin_task_suite();
        let Reward::NearModes { modes, .. } = &suite[2].reward else {
            panic!();
        };
        for m in modes {
            let r = suite[2].reward.eval(m);
            assert!(r > 0.99, "reward at mode {m:?} was {r}");
        }
        // Far away it decays to ~0.
        assert!(suite[2].reward.eval(&[-4.0, 0.0]) < 1e-6);
    }

    #[test]
    fn upper_conflicts_with_lower_east_mode() {
        let suite = builtin_task_suite();
        let Reward::NearModes { modes, .. } = &suite[2].reward else {
            panic!();
        };
        let lower = modes.iter().find(|m| m[1] < 0.0).unwrap();
        assert!(suite[0].reward.eval(lower) < 0.01);
    }

    #[test]
    fn sample_target_mean_matches_mixture_mean() {
        let suite = builtin_task_suite();
        let mut rng = substream(70, "tasks-mean");
        let n = 100_000;
        let samples = sample_target(&suite[0], n, &mut rng).unwrap();
        // Ring mixture mean is the origin; per-coordinate std is about
        // sqrt(radius^2/2 + mode_std^2).
        let per_coord_std = (2.0f64 * 2.0 / 2.0 + 0.15 * 0.15).sqrt();
        let se = per_coord_std / (n as f64).sqrt();
        for i in 0..2 {
            let mean = samples.iter().map(|s| s[i]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 4.0 * se, "coord {i}: mean {mean}, se {se}");
        }
    }

    #[test]
    fn sample_target_mode_assignment_is_uniform() {
        let suite = builtin_task_suite();
        let mut rng = substream(71, "tasks-modes");
        let n = 80_000;
        let samples = sample_target(&suite[0], n, &mut rng).unwrap();
        let centers = &suite[0].target.centers;
        let mut counts = vec![0usize; centers.len()];
        for s in &samples {
            let (best, _) = centers
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let d2: f64 = s.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    (k, d2)
                })
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            counts[best] += 1;
        }
        let p = 1.0 / centers.len() as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for (k, &count) in counts.iter().enumerate() {
            let dev = (count as f64 - n as f64 * p).abs();
            assert!(dev < 4.0 * sd, "mode {k}: count {count}");
        }
    }

    #[test]
    fn sample_target_rejects_zero() {
        let suite = builtin_task_suite();
        let mut rng = substream(72, "tasks-zero");
        assert!(sample_target(&suite[0], 0, &mut rng).is_err());
    }

    #[test]
    fn ground_truth_ring_reward_matches_analytic_value() {
        // For samples `center + std * eps`, the radial error is close to
        // N(0, std^2), so the expected bump reward is about
        // width / sqrt(width^2 + std^2) = 0.2 / 0.25 = 0.8.
        let suite = builtin_task_suite();
        let mut rng = substream(73, "tasks-ring-reward");
        let n = 200_000;
        let samples = sample_target(&suite[1], n, &mut rng).unwrap();
        let mean = samples
            .iter()
            .map(|s| suite[1].reward.eval(s))
            .sum::<f64>()
            / n as f64;
        assert!(
            (mean - 0.8).abs() < 0.01,
            "ground-truth ring reward {mean}, expected about 0.80"
        );
    }

    #[test]
    fn evaluate_requires_deterministic_schedule() {
        let suite = builtin_task_suite();
        let vf = random_net(74, 2, 3);
        let sched = Schedule::uniform(8, 0.5).unwrap();
        let mut rng = substream(75, "tasks-eval");
        assert!(evaluate(&vf, &suite[0], &sched, 16, &mut rng).is_err());
    }

    #[test]
    fn evaluate_zero_field_matches_standard_normal_base_rate() {
        // A zero velocity field leaves x0 ~ N(0, I) untouched, so the mean
        // reward is the reward's base rate under the standard normal: exactly
        // 0.5 for the odd-symmetric upper sigmoid.
        let suite = builtin_task_suite();
        let vf = VelocityField::zeros(crate::testutil::small_arch(2, 3)).unwrap();
        let sched = Schedule::uniform(10, 0.0).unwrap();
        let mut rng = substream(76, "tasks-base");
        let n = 40_000;
        let report = evaluate(&vf, &suite[0], &sched, n, &mut rng).unwrap();
        let se = 0.5 / (n as f64).sqrt();
        assert!(
            (report.mean_reward - 0.5).abs() < 4.0 * se,
            "base rate {}",
            report.mean_reward
        );
    }

    #[test]
    fn evaluate_is_deterministic_given_seed() {
        let suite = builtin_task_suite();
        let vf = random_net(77, 2, 3);
        let sched = Schedule::uniform(6, 0.0).unwrap();
        let a = evaluate(&vf, &suite[1], &sched, 64, &mut substream(78, "e")).unwrap();
        let b = evaluate(&vf, &suite[1], &sched, 64, &mut substream(78, "e")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dense_condition_ids() {
        let suite = builtin_task_suite();
        for (i, task) in suite.iter().enumerate() {
            assert_eq!(task.id, i);
        }
    }

    proptest! {
        #[test]
        fn rewards_finite_and_bounded_on_eval_box(
            x0 in -6.0f64..6.0,
            x1 in -6.0f64..6.0,
        ) {
            for task in builtin_task_suite() {
                let r = task.reward.eval(&[x0, x1]);
                prop_assert!(r.is_finite());
                prop_assert!((0.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn rewards_are_lipschitz_on_eval_box(
            x0 in -6.0f64..6.0,
            x1 in -6.0f64..6.0,
            dx in -1e-3f64..1e-3,
            dy in -1e-3f64..1e-3,
        ) {
            // Generous Lipschitz bound; the steepest built-in reward is the
            // sigmoid with width 0.1 (slope 2.5).
            let step = (dx * dx + dy * dy).sqrt();
            prop_assume!(step > 1e-9);
            for task in builtin_task_suite() {
                let a = task.reward.eval(&[x0, x1]);
                let b = task.reward.eval(&[x0 + dx, x1 + dy]);
                prop_assert!((a - b).abs() <= 30.0 * step);
            }
        }
    }
}
