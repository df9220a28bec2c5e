//! Soft actor-critic: twin critics with Polyak-averaged targets, a
//! tanh-squashed Gaussian actor and automatic temperature tuning.

use numcore::{ParamId, ParamStore, Reduce, RngStream, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::nets::{copy_params, Critic, GaussianActor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Target critics: `target ← rho·target + (1−rho)·online`.
    pub rho: f64,
    pub hidden: usize,
    /// Uniform-random actions before learning starts.
    pub warmup_steps: u64,
    /// Gradient steps per environment step.
    pub updates_per_step: usize,
    pub init_alpha: f64,
    /// Defaults to `−dim(action)`.
    pub target_entropy: Option<f64>,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 3e-4,
            batch_size: 256,
            replay_capacity: 100_000,
            rho: 0.995,
            hidden: 256,
            warmup_steps: 1000,
            updates_per_step: 1,
            init_alpha: 1.0,
            target_entropy: None,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(invalid("sac.gamma", format!("{} outside [0, 1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid("sac.rho", format!("{} outside [0, 1]", self.rho)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.hidden == 0 || self.replay_capacity == 0 {
            return Err(invalid("sac", "lr, batch_size, hidden and replay_capacity must be positive"));
        }
        if !(self.init_alpha > 0.0) {
            return Err(invalid("sac.init_alpha", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SacNets {
    pub actor: GaussianActor,
    pub critic1: Critic,
    pub critic2: Critic,
    pub critic1_tgt: Critic,
    pub critic2_tgt: Critic,
    pub log_alpha: ParamId,
    pub obs_dim: usize,
    pub d_a: usize,
}

impl SacNets {
    pub fn new(
        store: &mut ParamStore,
        obs_dim: usize,
        d_a: usize,
        hidden: usize,
        bounds: (f64, f64),
        init_alpha: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let actor = GaussianActor::new(store, "actor", obs_dim, d_a, hidden, bounds, &mut rng.derive("actor"))?;
        let critic1 = Critic::new(store, "critic1", obs_dim, d_a, hidden, &mut rng.derive("critic1"))?;
        let critic2 = Critic::new(store, "critic2", obs_dim, d_a, hidden, &mut rng.derive("critic2"))?;
        let critic1_tgt = critic1.duplicate(store, "critic1_tgt")?;
        let critic2_tgt = critic2.duplicate(store, "critic2_tgt")?;
        let log_alpha = store.insert("log_alpha", Tensor::scalar(init_alpha.ln()))?;
        Ok(Self { actor, critic1, critic2, critic1_tgt, critic2_tgt, log_alpha, obs_dim, d_a })
    }

    pub fn alpha(&self, store: &ParamStore) -> f64 {
        store.get(self.log_alpha).item().exp()
    }

    pub fn critic_ids(&self) -> Vec<ParamId> {
        let mut v = self.critic1.ids();
        v.extend(self.critic2.ids());
        v
    }

    pub fn target_ids(&self) -> Vec<ParamId> {
        let mut v = self.critic1_tgt.ids();
        v.extend(self.critic2_tgt.ids());
        v
    }

    pub fn actor_ids(&self) -> Vec<ParamId> {
        self.actor.ids()
    }

    /// Soft Bellman target `r + γ·(1−done)·(min Q̄(s′, a′) − α log π(a′|s′))`
    /// with `a′ ~ π(·|s′)` drawn using `noise`. Returned as a constant.
    #[allow(clippy::too_many_arguments)]
    pub fn td_target(
        &self,
        store: &ParamStore,
        next_obs: &Tensor,
        reward: &Tensor,
        not_done: &Tensor,
        gamma: f64,
        alpha: f64,
        noise: &Tensor,
    ) -> Result<Tensor> {
        let mut t = Tape::new();
        let s = t.constant(next_obs.clone());
        let (a, logp) = self.actor.sample(&mut t, store, s, noise, true)?;
        let q1 = self.critic1_tgt.forward(&mut t, store, s, a, true)?;
        let q2 = self.critic2_tgt.forward(&mut t, store, s, a, true)?;
        let q = t.minimum(q1, q2)?;
        let (q, logp) = (t.value(q).data().to_vec(), t.value(logp).data().to_vec());
        let (r, nd) = (reward.data(), not_done.data());
        let y: Vec<f64> = (0..q.len()).map(|i| r[i] + gamma * nd[i] * (q[i] - alpha * logp[i])).collect();
        Ok(Tensor::new(vec![y.len(), 1], y)?)
    }

    /// `mean (Q1 − y)² + mean (Q2 − y)²`.
    pub fn critic_loss(&self, t: &mut Tape, store: &ParamStore, obs: Var, action: Var, target: &Tensor) -> Result<Var> {
        let y = t.constant(target.clone());
        let q1 = self.critic1.forward(t, store, obs, action, false)?;
        let q2 = self.critic2.forward(t, store, obs, action, false)?;
        let l1 = t.mse(q1, y)?;
        let l2 = t.mse(q2, y)?;
        Ok(t.add(l1, l2)?)
    }

    /// `mean (α log π(ã|s) − min Q(s, ã))` with the critics held fixed.
    /// Returns the loss and the per-sample log-probabilities.
    pub fn actor_loss(&self, t: &mut Tape, store: &ParamStore, obs: Var, noise: &Tensor, alpha: f64) -> Result<(Var, Var)> {
        let (a, logp) = self.actor.sample(t, store, obs, noise, false)?;
        let q1 = self.critic1.forward(t, store, obs, a, true)?;
        let q2 = self.critic2.forward(t, store, obs, a, true)?;
        let q = t.minimum(q1, q2)?;
        let al = t.scale(logp, alpha)?;
        let d = t.sub(al, q)?;
        Ok((t.mean(d, Reduce::All), logp))
    }

    pub fn target_entropy(&self, cfg: &SacConfig) -> f64 {
        cfg.target_entropy.unwrap_or(-(self.d_a as f64))
    }
}

/// Temperature loss `−log α · (mean log π + H̄)` and its derivative in `log α`.
pub fn alpha_loss(log_alpha: f64, mean_logp: f64, target_entropy: f64) -> (f64, f64) {
    let g = -(mean_logp + target_entropy);
    (log_alpha * g, g)
}

/// `target ← rho·target + (1−rho)·online`, elementwise.
pub fn soft_update(store: &mut ParamStore, target: &[ParamId], online: &[ParamId], rho: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(invalid("soft update", format!("{} targets for {} sources", target.len(), online.len())));
    }
    if rho == 0.0 {
        return copy_params(store, online, target);
    }
    for (&tg, &on) in target.iter().zip(online) {
        let src = store.get(on).clone();
        check_dim("soft update", src.len(), store.get(tg).len())?;
        if src.shape() != store.get(tg).shape() {
            return Err(invalid("soft update", format!("shape {:?} vs {:?}", src.shape(), store.get(tg).shape())));
        }
        for (d, s) in store.get_mut(tg).data_mut().iter_mut().zip(src.data()) {
            *d = rho * *d + (1.0 - rho) * s;
        }
    }
    Ok(())
}

/// Scalar values of the three SAC losses on one batch with plain inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SacLossValues {
    pub critic: f64,
    pub actor: f64,
    pub alpha: f64,
    pub mean_logp: f64,
}

/// Noise tensors for one SAC update: next-action and current-action draws.
#[derive(Clone, Debug)]
pub struct SacNoise {
    pub next: Tensor,
    pub current: Tensor,
}

impl SacNoise {
    pub fn draw(rng: &mut RngStream, batch: usize, d_a: usize) -> Self {
        let next = Tensor::new(vec![batch, d_a], rng.normals(batch * d_a)).expect("sized");
        let current = Tensor::new(vec![batch, d_a], rng.normals(batch * d_a)).expect("sized");
        Self { next, current }
    }
}

/// Inputs of a SAC update whose observations are already assembled.
#[derive(Clone, Debug)]
pub struct SacInputs {
    pub obs: Tensor,
    pub action: Tensor,
    pub reward: Tensor,
    pub next_obs: Tensor,
    pub not_done: Tensor,
    pub noise: SacNoise,
}

pub fn sac_losses(nets: &SacNets, store: &ParamStore, inp: &SacInputs, cfg: &SacConfig) -> Result<SacLossValues> {
    if inp.obs.rows() == 0 {
        return Err(invalid("SAC batch", "empty"));
    }
    check_dim("observation", nets.obs_dim, inp.obs.last_dim())?;
    let alpha = nets.alpha(store);
    let y = nets.td_target(store, &inp.next_obs, &inp.reward, &inp.not_done, cfg.gamma, alpha, &inp.noise.next)?;
    let mut t = Tape::new();
    let obs = t.constant(inp.obs.clone());
    let act = t.constant(inp.action.clone());
    let c = nets.critic_loss(&mut t, store, obs, act, &y)?;
    let (a, logp) = nets.actor_loss(&mut t, store, obs, &inp.noise.current, alpha)?;
    let mean_logp = t.value(logp).data().iter().sum::<f64>() / inp.obs.rows() as f64;
    let (al, _) = alpha_loss(store.get(nets.log_alpha).item(), mean_logp, nets.target_entropy(cfg));
    Ok(SacLossValues { critic: t.value(c).item(), actor: t.value(a).item(), alpha: al, mean_logp })
}
