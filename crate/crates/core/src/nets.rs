//! Network building blocks. Every forward pass takes the parameter store
//! explicitly and records onto a caller-owned tape; `frozen` registers the
//! parameters as constants so that no gradient reaches them.

use std::f64::consts::LN_2;

use numcore::{Conv1dGeometry, ParamId, ParamStore, RngStream, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub const LATENT_LOG_STD: (f64, f64) = (-10.0, 2.0);
pub const ACTOR_LOG_STD: (f64, f64) = (-5.0, 2.0);

fn pvar(t: &mut Tape, store: &ParamStore, id: ParamId, frozen: bool) -> Var {
    if frozen {
        t.frozen_param(store, id)
    } else {
        t.param(store, id)
    }
}

fn uniform_tensor(rng: &mut RngStream, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-bound, bound)).collect()).expect("shape matches length")
}

/// Maps an unconstrained value smoothly into `[lo, hi]`.
fn soft_clamp(t: &mut Tape, x: Var, (lo, hi): (f64, f64)) -> Result<Var> {
    let th = t.tanh(x);
    let s = t.add_scalar(th, 1.0)?;
    let s = t.scale(s, 0.5 * (hi - lo))?;
    Ok(t.add_scalar(s, lo)?)
}

/// Copies parameter values from one list to another of identical shapes.
pub fn copy_params(store: &mut ParamStore, from: &[ParamId], to: &[ParamId]) -> Result<()> {
    if from.len() != to.len() {
        return Err(invalid("parameter copy", format!("{} sources for {} targets", from.len(), to.len())));
    }
    for (&f, &t) in from.iter().zip(to) {
        let v = store.get(f).clone();
        check_dim("parameter copy", v.len(), store.get(t).len())?;
        *store.get_mut(t) = v;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights and bias uniform in `±scale/√fan_in`.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngStream, scale: f64) -> Result<Self> {
        let bound = scale / (fan_in as f64).sqrt();
        let w = store.insert(format!("{name}/w"), uniform_tensor(rng, &[fan_in, fan_out], bound))?;
        let b = store.insert(format!("{name}/b"), uniform_tensor(rng, &[fan_out], bound))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        let w = pvar(t, store, self.w, frozen);
        let b = pvar(t, store, self.b, frozen);
        Ok(t.affine(x, w, b)?)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Affine layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, prefix: &str, sizes: &[usize], rng: &mut RngStream, last_scale: f64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(invalid("MLP", "needs at least input and output sizes"));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let scale = if i + 1 == n { last_scale } else { 1.0 };
                Linear::new(store, &format!("{prefix}/l{i}"), sizes[i], sizes[i + 1], rng, scale)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Same architecture registered under another prefix, holding a copy of
    /// this network's current values.
    pub fn duplicate(&self, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let w = store.insert(format!("{prefix}/l{i}/w"), store.get(l.w).clone())?;
            let b = store.insert(format!("{prefix}/l{i}/b"), store.get(l.b).clone())?;
            layers.push(Linear { w, b, fan_in: l.fan_in, fan_out: l.fan_out });
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        check_dim("MLP input", self.in_dim(), t.value(x).last_dim())?;
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(t, store, h, frozen)?;
            if i + 1 < self.layers.len() {
                h = t.relu(h);
            }
        }
        Ok(h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.ids()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcnConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub hidden: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self { channels: vec![32, 32, 32], kernel: 5, stride: 2, hidden: 64 }
    }
}

/// Latent statistics and a reparameterized sample.
#[derive(Clone, Copy, Debug)]
pub struct Latent {
    pub mean: Var,
    pub log_std: Var,
    pub z: Var,
}

/// History encoder: strided temporal convolutions, then two affine layers
/// producing the mean and log-std of a diagonal Gaussian.
#[derive(Clone, Debug)]
pub struct TcnEncoder {
    pub k: usize,
    pub feat: usize,
    pub d_z: usize,
    convs: Vec<(Conv1dGeometry, ParamId, ParamId)>,
    fc1: Linear,
    fc2: Linear,
}

impl TcnEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, k: usize, feat: usize, d_z: usize, cfg: &TcnConfig, rng: &mut RngStream) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.kernel == 0 || cfg.stride == 0 || d_z == 0 {
            return Err(invalid("TCN config", format!("{cfg:?} with d_z {d_z}")));
        }
        let mut convs = Vec::new();
        let (mut length, mut in_ch) = (k, feat);
        for (i, &out_ch) in cfg.channels.iter().enumerate() {
            if length < cfg.kernel {
                return Err(invalid("TCN config", format!("layer {i}: length {length} shorter than kernel {}", cfg.kernel)));
            }
            let geom = Conv1dGeometry { length, in_channels: in_ch, kernel: cfg.kernel, stride: cfg.stride };
            let bound = 1.0 / (geom.patch_len() as f64).sqrt();
            let w = store.insert(format!("{prefix}/conv{i}/w"), uniform_tensor(rng, &[geom.patch_len(), out_ch], bound))?;
            let b = store.insert(format!("{prefix}/conv{i}/b"), uniform_tensor(rng, &[out_ch], bound))?;
            convs.push((geom, w, b));
            length = geom.out_length();
            in_ch = out_ch;
        }
        let fc1 = Linear::new(store, &format!("{prefix}/fc0"), length * in_ch, cfg.hidden, rng, 1.0)?;
        let fc2 = Linear::new(store, &format!("{prefix}/fc1"), cfg.hidden, 2 * d_z, rng, 1.0)?;
        Ok(Self { k, feat, d_z, convs, fc1, fc2 })
    }

    pub fn input_len(&self) -> usize {
        self.k * self.feat
    }

    /// `(mean, log_std)` for a batch of flattened histories `[B, k·feat]`.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, h: Var, frozen: bool) -> Result<(Var, Var)> {
        let shape = t.value(h).shape().to_vec();
        if shape.len() != 2 {
            return Err(invalid("history batch", format!("expected [B, {}], got {shape:?}", self.input_len())));
        }
        check_dim("history length × features", self.input_len(), shape[1])?;
        let mut x = h;
        for &(geom, w, b) in &self.convs {
            let w = pvar(t, store, w, frozen);
            let b = pvar(t, store, b, frozen);
            x = t.conv1d(x, w, b, geom)?;
            x = t.relu(x);
        }
        let x = self.fc1.forward(t, store, x, frozen)?;
        let x = t.relu(x);
        let out = self.fc2.forward(t, store, x, frozen)?;
        let mean = t.slice(out, 0, self.d_z)?;
        let raw = t.slice(out, self.d_z, 2 * self.d_z)?;
        let log_std = soft_clamp(t, raw, LATENT_LOG_STD)?;
        Ok((mean, log_std))
    }

    /// Encodes and samples `z = mean + exp(log_std) ⊙ noise`. Without noise
    /// the sample is the mean.
    pub fn encode(&self, t: &mut Tape, store: &ParamStore, h: Var, noise: Option<&Tensor>, frozen: bool) -> Result<Latent> {
        let (mean, log_std) = self.forward(t, store, h, frozen)?;
        let z = match noise {
            Some(eps) => {
                if eps.shape() != t.value(mean).shape() {
                    return Err(invalid("latent noise", format!("shape {:?} vs {:?}", eps.shape(), t.value(mean).shape())));
                }
                let e = t.constant(eps.clone());
                let std = t.exp(log_std);
                let s = t.mul(std, e)?;
                t.add(mean, s)?
            }
            None => mean,
        };
        Ok(Latent { mean, log_std, z })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.convs.iter().flat_map(|&(_, w, b)| [w, b]).collect();
        v.extend(self.fc1.ids());
        v.extend(self.fc2.ids());
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivilegeMode {
    Identity,
    Mlp,
}

#[derive(Clone, Debug)]
pub enum PrivilegeEncoder {
    Identity { dim: usize },
    Mlp(Mlp),
}

impl PrivilegeEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        mode: PrivilegeMode,
        priv_dim: usize,
        d_z: usize,
        hidden: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        match mode {
            PrivilegeMode::Identity if priv_dim == d_z => Ok(Self::Identity { dim: d_z }),
            PrivilegeMode::Identity => Err(invalid(
                "privilege encoder",
                format!("identity mode needs privilege dim {priv_dim} to equal d_z {d_z}; use the MLP mode"),
            )),
            PrivilegeMode::Mlp => Ok(Self::Mlp(Mlp::new(store, prefix, &[priv_dim, hidden, d_z], rng, 1.0)?)),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Self::Identity { dim } => *dim,
            Self::Mlp(m) => m.in_dim(),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, s_p: Var, frozen: bool) -> Result<Var> {
        check_dim("privileged state", self.in_dim(), t.value(s_p).last_dim())?;
        match self {
            Self::Identity { .. } => Ok(s_p),
            Self::Mlp(m) => m.forward(t, store, s_p, frozen),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            Self::Identity { .. } => Vec::new(),
            Self::Mlp(m) => m.ids(),
        }
    }
}

/// Two-layer MLP from `d_z` to `d_z`.
#[derive(Clone, Debug)]
pub struct Projector(pub Mlp);

impl Projector {
    pub fn new(store: &mut ParamStore, prefix: &str, d_z: usize, hidden: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(Self(Mlp::new(store, prefix, &[d_z, hidden, d_z], rng, 1.0)?))
    }

    pub fn duplicate(&self, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self(self.0.duplicate(store, prefix)?))
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, v: Var, frozen: bool) -> Result<Var> {
        self.0.forward(t, store, v, frozen)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.0.ids()
    }
}

/// Tanh-squashed diagonal Gaussian policy.
#[derive(Clone, Debug)]
pub struct GaussianActor {
    pub mlp: Mlp,
    pub d_a: usize,
    pub low: f64,
    pub high: f64,
}

impl GaussianActor {
    pub fn new(store: &mut ParamStore, prefix: &str, obs_dim: usize, d_a: usize, hidden: usize, bounds: (f64, f64), rng: &mut RngStream) -> Result<Self> {
        if !(bounds.0 < bounds.1) {
            return Err(invalid("action bounds", format!("{bounds:?}")));
        }
        let mlp = Mlp::new(store, prefix, &[obs_dim, hidden, hidden, 2 * d_a], rng, 0.01)?;
        Ok(Self { mlp, d_a, low: bounds.0, high: bounds.1 })
    }

    pub fn obs_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    fn half(&self) -> f64 {
        0.5 * (self.high - self.low)
    }

    fn center(&self) -> f64 {
        0.5 * (self.high + self.low)
    }

    fn dist(&self, t: &mut Tape, store: &ParamStore, obs: Var, frozen: bool) -> Result<(Var, Var)> {
        let out = self.mlp.forward(t, store, obs, frozen)?;
        let mean = t.slice(out, 0, self.d_a)?;
        let raw = t.slice(out, self.d_a, 2 * self.d_a)?;
        let log_std = soft_clamp(t, raw, ACTOR_LOG_STD)?;
        Ok((mean, log_std))
    }

    fn squash(&self, t: &mut Tape, u: Var) -> Result<Var> {
        let th = t.tanh(u);
        let a = t.scale(th, self.half())?;
        Ok(t.add_scalar(a, self.center())?)
    }

    /// Reparameterized action sample and its log-density `[B, 1]`, including
    /// the change of variables through the tanh squashing.
    pub fn sample(&self, t: &mut Tape, store: &ParamStore, obs: Var, noise: &Tensor, frozen: bool) -> Result<(Var, Var)> {
        let (mean, log_std) = self.dist(t, store, obs, frozen)?;
        if noise.shape() != t.value(mean).shape() {
            return Err(invalid("action noise", format!("shape {:?} vs {:?}", noise.shape(), t.value(mean).shape())));
        }
        let eps = t.constant(noise.clone());
        let std = t.exp(log_std);
        let s = t.mul(std, eps)?;
        let u = t.add(mean, s)?;
        let action = self.squash(t, u)?;

        // log N(u; mean, std) = -ε²/2 - log std - ½ log 2π
        let half_sq = t.constant(noise.map(|e| -0.5 * e * e - HALF_LN_2PI));
        let gauss = t.sub(half_sq, log_std)?;
        // log |da/du| = log half + 2 (log 2 - u - softplus(-2u))
        let m2u = t.scale(u, -2.0)?;
        let sp = t.softplus(m2u);
        let usp = t.add(u, sp)?;
        let neg = t.scale(usp, -2.0)?;
        let jac = t.add_scalar(neg, 2.0 * LN_2 + self.half().ln())?;
        let per_dim = t.sub(gauss, jac)?;
        let logp = t.sum(per_dim, numcore::Reduce::Last);
        Ok((action, logp))
    }

    /// Squashed mean action.
    pub fn deterministic(&self, t: &mut Tape, store: &ParamStore, obs: Var, frozen: bool) -> Result<Var> {
        let (mean, _) = self.dist(t, store, obs, frozen)?;
        self.squash(t, mean)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.mlp.ids()
    }
}

/// Three-layer Q-network on `[obs ‖ action]`.
#[derive(Clone, Debug)]
pub struct Critic(pub Mlp);

impl Critic {
    pub fn new(store: &mut ParamStore, prefix: &str, obs_dim: usize, d_a: usize, hidden: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(Self(Mlp::new(store, prefix, &[obs_dim + d_a, hidden, hidden, 1], rng, 1.0)?))
    }

    pub fn duplicate(&self, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self(self.0.duplicate(store, prefix)?))
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, obs: Var, action: Var, frozen: bool) -> Result<Var> {
        let x = t.concat(&[obs, action])?;
        self.0.forward(t, store, x, frozen)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.0.ids()
    }
}
