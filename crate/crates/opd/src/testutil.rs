//! Helpers shared by unit tests: small seeded networks and a central
//! finite-difference oracle for parameter gradients.

use rand::Rng;

use crate::net::{Activation, NetArch, VelocityField};
use crate::rng::substream;

pub fn small_arch(d: usize, cond_vocab: usize) -> NetArch {
    NetArch {
        data_dim: d,
        hidden: vec![8, 8],
        cond_vocab,
        time_features: 3,
        activation: Activation::Tanh,
    }
}

/// Fully randomized small net (head included), deterministic in `seed`.
pub fn random_net(seed: u64, d: usize, cond_vocab: usize) -> VelocityField {
    let mut rng = substream(seed, "testutil-random-net");
    let mut vf = VelocityField::init(small_arch(d, cond_vocab), &mut rng).unwrap();
    for p in vf.params_mut().iter_mut() {
        *p = rng.gen_range(-0.5..0.5);
    }
    vf
}

/// Field whose output is the constant vector `v` for every input.
pub fn constant_net(v: &[f64], cond_vocab: usize) -> VelocityField {
    let mut vf = VelocityField::zeros(small_arch(v.len(), cond_vocab)).unwrap();
    let n = vf.params().len();
    let d = v.len();
    for (k, val) in v.iter().enumerate() {
        vf.params_mut()[n - d + k] = *val;
    }
    vf
}

/// Central finite differences of `eval` over every parameter.
pub fn fd_gradient<F>(vf: &VelocityField, h: f64, eval: F) -> Vec<f64>
where
    F: Fn(&VelocityField) -> f64,
{
    let n = vf.params().len();
    let mut grad = vec![0.0; n];
    let mut work = vf.clone();
    for i in 0..n {
        let orig = work.params()[i];
        work.params_mut()[i] = orig + h;
        let fp = eval(&work);
        work.params_mut()[i] = orig - h;
        let fm = eval(&work);
        work.params_mut()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

pub fn assert_grad_close(got: &[f64], want: &[f64], rel: f64, abs: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        let tol = abs + rel * g.abs().max(w.abs());
        assert!((g - w).abs() <= tol, "coord {i}: got {g}, want {w}");
    }
}
