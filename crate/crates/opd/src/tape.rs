//! Reverse-mode differentiation of scalar losses through velocity-field
//! forward calls.
//!
//! Losses in this crate are small expression trees over a handful of vector
//! and scalar operations, with the network hidden behind [`Tape::forward`]
//! leaves. The tape records values eagerly; [`Tape::backward`] runs the
//! adjoint pass and folds each leaf's upstream gradient into the flat
//! parameter gradient via [`VelocityField::backprop`]. Node order is the
//! reduction order, so gradients are reproducible bit-for-bit.

use crate::error::{OpdError, Result};
use crate::net::{EvalCache, ParamGradient, VelocityField};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VecId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScalarId(usize);

enum VecNode {
    /// A recorded network evaluation.
    Forward { cache: EvalCache },
    Const,
    /// `sum_k coef_k * v_k + bias`.
    Affine { terms: Vec<(f64, VecId)> },
}

enum ScalarNode {
    Const,
    /// `|v|^2`
    NormSq(VecId),
    /// `w . v` with constant `w`.
    DotConst { w: Vec<f64>, v: VecId },
    Add(ScalarId, ScalarId),
    Sub(ScalarId, ScalarId),
    Mul(ScalarId, ScalarId),
    MulConst(ScalarId, f64),
    AddConst(ScalarId),
    Neg(ScalarId),
    Exp(ScalarId),
    /// `min(a, b)`; ties route the gradient to `a`.
    Min(ScalarId, ScalarId),
    /// Clamp into `[lo, hi]`; zero gradient outside.
    Clip { x: ScalarId, lo: f64, hi: f64 },
}

/// Recording tape bound to one velocity field.
pub struct Tape<'a> {
    vf: &'a VelocityField,
    vec_nodes: Vec<VecNode>,
    vec_values: Vec<Vec<f64>>,
    scalar_nodes: Vec<ScalarNode>,
    scalar_values: Vec<f64>,
    n_forwards: u64,
}

impl<'a> Tape<'a> {
    pub fn new(vf: &'a VelocityField) -> Self {
        Tape {
            vf,
            vec_nodes: Vec::new(),
            vec_values: Vec::new(),
            scalar_nodes: Vec::new(),
            scalar_values: Vec::new(),
            n_forwards: 0,
        }
    }

    pub fn field(&self) -> &VelocityField {
        self.vf
    }

    /// Number of network evaluations recorded so far.
    pub fn n_forwards(&self) -> u64 {
        self.n_forwards
    }

    fn push_vec(&mut self, node: VecNode, value: Vec<f64>) -> VecId {
        self.vec_nodes.push(node);
        self.vec_values.push(value);
        VecId(self.vec_nodes.len() - 1)
    }

    fn push_scalar(&mut self, node: ScalarNode, value: f64) -> ScalarId {
        self.scalar_nodes.push(node);
        self.scalar_values.push(value);
        ScalarId(self.scalar_nodes.len() - 1)
    }

    /// Differentiable network evaluation.
    pub fn forward(&mut self, x: &[f64], t: f64, c: usize) -> Result<VecId> {
        let (out, cache) = self.vf.forward_cached(x, t, c)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(OpdError::Numeric(format!(
                "velocity field produced a non-finite value at t={t}, c={c}"
            )));
        }
        self.n_forwards += 1;
        Ok(self.push_vec(VecNode::Forward { cache }, out))
    }

    pub fn constant_vec(&mut self, value: Vec<f64>) -> VecId {
        self.push_vec(VecNode::Const, value)
    }

    /// `sum_k coef_k * v_k + bias`; `bias` may be empty for zero.
    pub fn affine(&mut self, terms: &[(f64, VecId)], bias: &[f64]) -> VecId {
        let dim = if bias.is_empty() {
            self.vec_values[terms[0].1 .0].len()
        } else {
            bias.len()
        };
        let mut value = if bias.is_empty() {
            vec![0.0; dim]
        } else {
            bias.to_vec()
        };
        for &(coef, v) in terms {
            for (o, inp) in value.iter_mut().zip(&self.vec_values[v.0]) {
                *o += coef * inp;
            }
        }
        self.push_vec(
            VecNode::Affine {
                terms: terms.to_vec(),
            },
            value,
        )
    }

    /// `a - b` as an affine node.
    pub fn sub_vec(&mut self, a: VecId, b: VecId) -> VecId {
        self.affine(&[(1.0, a), (-1.0, b)], &[])
    }

    pub fn norm_sq(&mut self, v: VecId) -> ScalarId {
        let value = self.vec_values[v.0].iter().map(|x| x * x).sum();
        self.push_scalar(ScalarNode::NormSq(v), value)
    }

    pub fn dot_const(&mut self, w: &[f64], v: VecId) -> ScalarId {
        let value = w
            .iter()
            .zip(&self.vec_values[v.0])
            .map(|(a, b)| a * b)
            .sum();
        self.push_scalar(ScalarNode::DotConst { w: w.to_vec(), v }, value)
    }

    pub fn constant(&mut self, value: f64) -> ScalarId {
        self.push_scalar(ScalarNode::Const, value)
    }

    pub fn add(&mut self, a: ScalarId, b: ScalarId) -> ScalarId {
        let value = self.scalar_values[a.0] + self.scalar_values[b.0];
        self.push_scalar(ScalarNode::Add(a, b), value)
    }

    pub fn sub(&mut self, a: ScalarId, b: ScalarId) -> ScalarId {
        let value = self.scalar_values[a.0] - self.scalar_values[b.0];
        self.push_scalar(ScalarNode::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: ScalarId, b: ScalarId) -> ScalarId {
        let value = self.scalar_values[a.0] * self.scalar_values[b.0];
        self.push_scalar(ScalarNode::Mul(a, b), value)
    }

    pub fn mul_const(&mut self, a: ScalarId, k: f64) -> ScalarId {
        let value = self.scalar_values[a.0] * k;
        self.push_scalar(ScalarNode::MulConst(a, k), value)
    }

    pub fn add_const(&mut self, a: ScalarId, k: f64) -> ScalarId {
        let value = self.scalar_values[a.0] + k;
        self.push_scalar(ScalarNode::AddConst(a), value)
    }

    pub fn neg(&mut self, a: ScalarId) -> ScalarId {
        let value = -self.scalar_values[a.0];
        self.push_scalar(ScalarNode::Neg(a), value)
    }

    pub fn exp(&mut self, a: ScalarId) -> ScalarId {
        let value = self.scalar_values[a.0].exp();
        self.push_scalar(ScalarNode::Exp(a), value)
    }

    pub fn min(&mut self, a: ScalarId, b: ScalarId) -> ScalarId {
        let value = self.scalar_values[a.0].min(self.scalar_values[b.0]);
        self.push_scalar(ScalarNode::Min(a, b), value)
    }

    pub fn clip(&mut self, x: ScalarId, lo: f64, hi: f64) -> ScalarId {
        let value = self.scalar_values[x.0].clamp(lo, hi);
        self.push_scalar(ScalarNode::Clip { x, lo, hi }, value)
    }

    pub fn value(&self, s: ScalarId) -> f64 {
        self.scalar_values[s.0]
    }

    pub fn vec_value(&self, v: VecId) -> &[f64] {
        &self.vec_values[v.0]
    }

    /// Adjoint pass from `loss`; returns `(loss value, d loss / d params)`.
    pub fn backward(&self, loss: ScalarId) -> Result<(f64, ParamGradient)> {
        let loss_value = self.scalar_values[loss.0];
        if !loss_value.is_finite() {
            return Err(OpdError::Numeric(format!(
                "loss evaluated to a non-finite value ({loss_value})"
            )));
        }
        let mut s_adj = vec![0.0; self.scalar_nodes.len()];
        let mut v_adj: Vec<Option<Vec<f64>>> = vec![None; self.vec_nodes.len()];
        s_adj[loss.0] = 1.0;

        let add_vec_adj = |adj: &mut Vec<Option<Vec<f64>>>, id: VecId, contrib: &[f64], scale: f64| {
            let slot = adj[id.0].get_or_insert_with(|| vec![0.0; contrib.len()]);
            for (o, c) in slot.iter_mut().zip(contrib) {
                *o += scale * c;
            }
        };

        for i in (0..self.scalar_nodes.len()).rev() {
            let a = s_adj[i];
            if a == 0.0 {
                continue;
            }
            match &self.scalar_nodes[i] {
                ScalarNode::Const => {}
                ScalarNode::NormSq(v) => {
                    let contrib: Vec<f64> =
                        self.vec_values[v.0].iter().map(|x| 2.0 * x).collect();
                    add_vec_adj(&mut v_adj, *v, &contrib, a);
                }
                ScalarNode::DotConst { w, v } => {
                    add_vec_adj(&mut v_adj, *v, w, a);
                }
                ScalarNode::Add(x, y) => {
                    s_adj[x.0] += a;
                    s_adj[y.0] += a;
                }
                ScalarNode::Sub(x, y) => {
                    s_adj[x.0] += a;
                    s_adj[y.0] -= a;
                }
                ScalarNode::Mul(x, y) => {
                    s_adj[x.0] += a * self.scalar_values[y.0];
                    s_adj[y.0] += a * self.scalar_values[x.0];
                }
                ScalarNode::MulConst(x, k) => {
                    s_adj[x.0] += a * k;
                }
                ScalarNode::AddConst(x) => {
                    s_adj[x.0] += a;
                }
                ScalarNode::Neg(x) => {
                    s_adj[x.0] -= a;
                }
                ScalarNode::Exp(x) => {
                    s_adj[x.0] += a * self.scalar_values[i];
                }
                ScalarNode::Min(x, y) => {
                    // Subgradient: ties go to the first argument.
                    if self.scalar_values[x.0] <= self.scalar_values[y.0] {
                        s_adj[x.0] += a;
                    } else {
                        s_adj[y.0] += a;
                    }
                }
                ScalarNode::Clip { x, lo, hi } => {
                    let v = self.scalar_values[x.0];
                    if v >= *lo && v <= *hi {
                        s_adj[x.0] += a;
                    }
                }
            }
        }

        let mut grad = ParamGradient::zeros(self.vf.params().len());
        for i in (0..self.vec_nodes.len()).rev() {
            let Some(adj) = v_adj[i].take() else { continue };
            match &self.vec_nodes[i] {
                VecNode::Const => {}
                VecNode::Forward { cache } => {
                    self.vf.backprop(cache, &adj, &mut grad.grad);
                }
                VecNode::Affine { terms } => {
                    for &(coef, v) in terms {
                        add_vec_adj(&mut v_adj, v, &adj, coef);
                    }
                }
            }
        }
        if !grad.is_finite() {
            return Err(OpdError::Numeric(
                "parameter gradient contains non-finite entries".into(),
            ));
        }
        Ok((loss_value, grad))
    }
}

/// Exact reverse-mode gradient of a scalar loss that depends on the
/// parameters only through [`Tape::forward`] calls.
pub fn grad_scalar_loss<F>(vf: &VelocityField, build: F) -> Result<(f64, ParamGradient)>
where
    F: FnOnce(&mut Tape) -> Result<ScalarId>,
{
    let mut tape = Tape::new(vf);
    let loss = build(&mut tape)?;
    tape.backward(loss)
}
