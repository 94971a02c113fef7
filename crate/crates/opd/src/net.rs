//! The parameterized velocity field `v(x, t, c)` and its checkpoint format.
//!
//! The network is a small MLP over `[x ; time features ; one-hot condition]`
//! with a linear output head of dimension `d`. All arithmetic runs in f64 so
//! that gradient statistics and finite-difference checks are limited by the
//! estimator, not by rounding. Exact parameter gradients come from the
//! reverse-mode tape in [`crate::tape`]; this module provides the cached
//! forward pass and the layer-by-layer vector-Jacobian product it needs.
//!
//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! magic "OPDF" | version: u32 | d: u32 | cond_vocab: u32 | activation: u32
//! | n_layers: u32 | (in_dim: u32, out_dim: u32) per layer
//! | n_params: u64 | params: f32 little-endian
//! ```
//!
//! Parameters are stored as f32; loading widens back to f64, so a file
//! survives any number of load/save cycles bit-exactly.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OpdError, Result};

const MAGIC: &[u8; 4] = b"OPDF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed in terms of the pre-activation `z`.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let y = z.tanh();
                1.0 - y * y
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }

    fn tag(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Silu => 1,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Silu),
            _ => None,
        }
    }
}

/// Architecture of a velocity field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetArch {
    /// Data dimension `d`.
    pub data_dim: usize,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    /// Number of discrete conditions.
    pub cond_vocab: usize,
    /// Number of time features; must be odd (raw `t` plus sin/cos pairs).
    pub time_features: usize,
    pub activation: Activation,
}

impl NetArch {
    /// 3x64 tanh MLP, the default for the 2-D task suite.
    pub fn default_for(data_dim: usize, cond_vocab: usize) -> Self {
        NetArch {
            data_dim,
            hidden: vec![64, 64, 64],
            cond_vocab,
            time_features: 7,
            activation: Activation::Tanh,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_features + self.cond_vocab
    }

    /// `(in, out)` per layer, hidden layers followed by the linear head.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.data_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum()
    }

    fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.cond_vocab == 0 {
            return Err(OpdError::InvalidArgument(
                "data_dim and cond_vocab must be positive".into(),
            ));
        }
        if self.time_features == 0 || self.time_features % 2 == 0 {
            return Err(OpdError::InvalidArgument(
                "time_features must be odd: raw t plus sin/cos pairs".into(),
            ));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(OpdError::InvalidArgument(
                "hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }

    fn time_features_into(&self, t: f64, out: &mut Vec<f64>) {
        out.push(t);
        let pairs = (self.time_features - 1) / 2;
        let mut freq = std::f64::consts::TAU;
        for _ in 0..pairs {
            out.push((freq * t).sin());
            out.push((freq * t).cos());
            freq *= 2.0;
        }
    }
}

/// Activations recorded by a forward pass, consumed by [`VelocityField::backprop`].
#[derive(Debug, Clone)]
pub struct EvalCache {
    /// Network input features.
    input: Vec<f64>,
    /// Pre-activations per layer (including the linear head).
    pre: Vec<Vec<f64>>,
    /// Post-activations per hidden layer.
    post: Vec<Vec<f64>>,
}

impl EvalCache {
    /// Output of the forward pass that produced this cache.
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("cache has a head layer")
    }
}

/// Flat parameter gradient, same length as the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub grad: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros(n: usize) -> Self {
        ParamGradient { grad: vec![0.0; n] }
    }

    pub fn is_finite(&self) -> bool {
        self.grad.iter().all(|g| g.is_finite())
    }
}

/// A conditional velocity field: architecture plus flat parameters.
///
/// Evaluation is a pure function of `(params, x, t, c)`; the struct is
/// immutable through `forward` and safe for concurrent reads.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    arch: NetArch,
    params: Vec<f64>,
}

impl VelocityField {
    pub fn zeros(arch: NetArch) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(VelocityField {
            arch,
            params: vec![0.0; n],
        })
    }

    /// Seeded init: scaled-uniform hidden layers, zero output head so the
    /// initial field is identically zero.
    pub fn init<R: rand::Rng + ?Sized>(arch: NetArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let dims = arch.layer_dims();
        let mut params = Vec::with_capacity(arch.param_count());
        for (k, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let head = k + 1 == dims.len();
            let scale = if head {
                0.0
            } else {
                (1.0 / fan_in as f64).sqrt()
            };
            for _ in 0..fan_in * fan_out {
                params.push(rng.gen_range(-1.0..1.0) * scale);
            }
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Ok(VelocityField { arch, params })
    }

    pub fn from_params(arch: NetArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(OpdError::InvalidArgument(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        Ok(VelocityField { arch, params })
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn features(&self, x: &[f64], t: f64, c: usize) -> Result<Vec<f64>> {
        if x.len() != self.arch.data_dim {
            return Err(OpdError::InvalidArgument(format!(
                "state dimension {} does not match data_dim {}",
                x.len(),
                self.arch.data_dim
            )));
        }
        if c >= self.arch.cond_vocab {
            return Err(OpdError::InvalidArgument(format!(
                "condition {c} out of range (vocab {})",
                self.arch.cond_vocab
            )));
        }
        let mut feat = Vec::with_capacity(self.arch.input_dim());
        feat.extend_from_slice(x);
        self.arch.time_features_into(t, &mut feat);
        for k in 0..self.arch.cond_vocab {
            feat.push(if k == c { 1.0 } else { 0.0 });
        }
        Ok(feat)
    }

    /// Velocity at `(x, t, c)`.
    pub fn forward(&self, x: &[f64], t: f64, c: usize) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, t, c)?.0)
    }

    /// Forward pass that also returns the activation cache for backprop.
    pub fn forward_cached(&self, x: &[f64], t: f64, c: usize) -> Result<(Vec<f64>, EvalCache)> {
        let input = self.features(x, t, c)?;
        let dims = self.arch.layer_dims();
        let n_hidden = dims.len() - 1;
        let mut pre = Vec::with_capacity(dims.len());
        let mut post = Vec::with_capacity(n_hidden);
        let mut offset = 0usize;
        let mut cur: &[f64] = &input;
        for (k, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let mut z = vec![0.0; fan_out];
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = b[o];
                for i in 0..fan_in {
                    acc += row[i] * cur[i];
                }
                z[o] = acc;
            }
            if k < n_hidden {
                let a: Vec<f64> = z.iter().map(|&v| self.arch.activation.apply(v)).collect();
                pre.push(z);
                post.push(a);
                cur = post.last().unwrap();
            } else {
                pre.push(z);
            }
        }
        let out = pre.last().unwrap().clone();
        Ok((
            out,
            EvalCache {
                input,
                pre,
                post,
            },
        ))
    }

    /// Accumulate `upstream^T * d(output)/d(params)` into `grad`.
    ///
    /// `grad` must have `param_count` entries. The caller owns the reduction
    /// order when combining several caches, keeping runs reproducible.
    pub fn backprop(&self, cache: &EvalCache, upstream: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.arch.param_count());
        let dims = self.arch.layer_dims();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut offset = 0usize;
        for &(fan_in, fan_out) in &dims {
            offsets.push(offset);
            offset += fan_in * fan_out + fan_out;
        }

        let mut delta = upstream.to_vec();
        for k in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[k];
            let base = offsets[k];
            let layer_in: &[f64] = if k == 0 { &cache.input } else { &cache.post[k - 1] };
            // Weight and bias gradients for this layer.
            for o in 0..fan_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &mut grad[base + o * fan_in..base + (o + 1) * fan_in];
                    for i in 0..fan_in {
                        row[i] += d * layer_in[i];
                    }
                }
                grad[base + fan_in * fan_out + o] += d;
            }
            if k == 0 {
                break;
            }
            // Propagate to the previous layer through W^T and the activation.
            let w = &self.params[base..base + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    for i in 0..fan_in {
                        prev[i] += d * row[i];
                    }
                }
            }
            let z_prev = &cache.pre[k - 1];
            for i in 0..fan_in {
                prev[i] *= self.arch.activation.derivative(z_prev[i]);
            }
            delta = prev;
        }
    }

    /// SHA-256 over architecture and parameter bits; used by the on-policy
    /// invariant checks.
    pub fn param_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update((self.arch.data_dim as u64).to_le_bytes());
        hasher.update((self.arch.cond_vocab as u64).to_le_bytes());
        for p in &self.params {
            hasher.update(p.to_le_bytes());
        }
        hasher.finalize().into()
    }

    /// Serialize into the OPDF checkpoint byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.arch.layer_dims();
        let mut buf = Vec::with_capacity(32 + dims.len() * 8 + self.params.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.arch.data_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.arch.cond_vocab as u32).to_le_bytes());
        buf.extend_from_slice(&self.arch.activation.tag().to_le_bytes());
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &(i, o) in &dims {
            buf.extend_from_slice(&(i as u32).to_le_bytes());
            buf.extend_from_slice(&(o as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut file = fs::File::create(path).map_err(|e| OpdError::io(path, e))?;
        file.write_all(&bytes).map_err(|e| OpdError::io(path, e))?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| OpdError::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(bad("truncated checkpoint"));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let read_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());

        if take(4)? != MAGIC {
            return Err(bad("bad magic, expected OPDF"));
        }
        let version = read_u32(take(4)?);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let d = read_u32(take(4)?) as usize;
        let cond_vocab = read_u32(take(4)?) as usize;
        let act = Activation::from_tag(read_u32(take(4)?)).ok_or_else(|| bad("bad activation tag"))?;
        let n_layers = read_u32(take(4)?) as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(bad("implausible layer count"));
        }
        let mut dims = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let i = read_u32(take(4)?) as usize;
            let o = read_u32(take(4)?) as usize;
            dims.push((i, o));
        }
        let hidden: Vec<usize> = dims[..n_layers - 1].iter().map(|&(_, o)| o).collect();
        let input_dim = dims[0].0;
        if dims[n_layers - 1].1 != d || input_dim <= d + cond_vocab {
            return Err(bad("inconsistent layer shapes"));
        }
        let time_features = input_dim - d - cond_vocab;
        let arch = NetArch {
            data_dim: d,
            hidden,
            cond_vocab,
            time_features,
            activation: act,
        };
        arch.validate().map_err(|_| bad("invalid architecture"))?;
        let n_params = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if n_params != arch.param_count() {
            return Err(bad("parameter count does not match layer shapes"));
        }
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let v = f32::from_le_bytes(take(4)?.try_into().unwrap());
            params.push(v as f64);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after parameters"));
        }
        Ok(VelocityField { arch, params })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| OpdError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn small_arch() -> NetArch {
        NetArch {
            data_dim: 2,
            hidden: vec![8, 8],
            cond_vocab: 3,
            time_features: 3,
            activation: Activation::Tanh,
        }
    }

    #[test]
    fn zero_params_zero_output() {
        let vf = VelocityField::zeros(small_arch()).unwrap();
        let y = vf.forward(&[0.3, -1.2], 0.4, 1).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = substream(1, "init");
        let mut vf = VelocityField::init(small_arch(), &mut rng).unwrap();
        // Give the head nonzero weights so the output is nontrivial.
        let n = vf.params.len();
        for p in vf.params_mut()[n - 20..].iter_mut() {
            *p = 0.13;
        }
        let a = vf.forward(&[0.5, 0.7], 0.2, 2).unwrap();
        let b = vf.forward(&[0.5, 0.7], 0.2, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn condition_out_of_range_rejected() {
        let vf = VelocityField::zeros(small_arch()).unwrap();
        assert!(matches!(
            vf.forward(&[0.0, 0.0], 0.5, 3),
            Err(OpdError::InvalidArgument(_))
        ));
    }

    #[test]
    fn init_head_is_zero() {
        let mut rng = substream(2, "init");
        let vf = VelocityField::init(small_arch(), &mut rng).unwrap();
        let y = vf.forward(&[1.0, -2.0], 0.9, 0).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn jacobian_vector_product_matches_finite_differences() {
        let mut rng = substream(3, "jvp");
        let mut vf = VelocityField::init(small_arch(), &mut rng).unwrap();
        for p in vf.params_mut().iter_mut() {
            *p = rng.gen_range(-0.5..0.5);
        }
        let x = [0.4, -0.6];
        let (t, c) = (0.37, 1);
        let n = vf.params().len();
        let dir: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // Rows of the Jacobian via one backprop per output coordinate.
        let (_, cache) = vf.forward_cached(&x, t, c).unwrap();
        let d = vf.arch().data_dim;
        let mut jvp = vec![0.0; d];
        for o in 0..d {
            let mut row = vec![0.0; n];
            let mut upstream = vec![0.0; d];
            upstream[o] = 1.0;
            vf.backprop(&cache, &upstream, &mut row);
            jvp[o] = row.iter().zip(&dir).map(|(a, b)| a * b).sum();
        }

        let h = 1e-5;
        let mut plus = vf.clone();
        let mut minus = vf.clone();
        for i in 0..n {
            plus.params_mut()[i] += h * dir[i];
            minus.params_mut()[i] -= h * dir[i];
        }
        let yp = plus.forward(&x, t, c).unwrap();
        let ym = minus.forward(&x, t, c).unwrap();
        for o in 0..d {
            let fd = (yp[o] - ym[o]) / (2.0 * h);
            assert!(
                (fd - jvp[o]).abs() <= 1e-6 + 1e-5 * fd.abs().max(jvp[o].abs()),
                "output {o}: fd {fd} vs jvp {}",
                jvp[o]
            );
        }
    }

    #[test]
    fn checkpoint_file_round_trip_is_bit_exact() {
        let mut rng = substream(4, "ckpt");
        let mut vf = VelocityField::init(small_arch(), &mut rng).unwrap();
        for p in vf.params_mut().iter_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.opdf");
        let p2 = dir.path().join("b.opdf");
        vf.save(&p1).unwrap();
        let loaded = VelocityField::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        // After a load, the in-memory params are exactly f32-representable,
        // so a further save/load cycle is lossless in memory too.
        let again = VelocityField::load(&p2).unwrap();
        assert_eq!(loaded.params(), again.params());
        assert_eq!(loaded.arch(), again.arch());
    }

    #[test]
    fn checkpoint_bad_magic_rejected() {
        let vf = VelocityField::zeros(small_arch()).unwrap();
        let mut bytes = vf.to_bytes();
        bytes[0] = b'X';
        let err = VelocityField::from_bytes(&bytes, Path::new("mem")).unwrap_err();
        assert!(matches!(err, OpdError::Format { .. }));
    }

    #[test]
    fn checkpoint_truncation_rejected() {
        let vf = VelocityField::zeros(small_arch()).unwrap();
        let bytes = vf.to_bytes();
        let err = VelocityField::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem"));
        assert!(err.is_err());
    }

    #[test]
    fn param_hash_distinguishes_params() {
        let a = VelocityField::zeros(small_arch()).unwrap();
        let mut b = a.clone();
        b.params_mut()[0] = 1.0;
        assert_ne!(a.param_hash(), b.param_hash());
        assert_eq!(a.param_hash(), a.clone().param_hash());
    }
}
