//! Historical information bottleneck: a history encoder trained jointly by
//! the RL loss, a cosine similarity to a momentum-projected privilege
//! embedding, and a KL pull towards a standard normal prior.

use numcore::{adam_step, adam_step_from, AdamConfig, AdamState, ParamId, ParamStore, Reduce, RngStream, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::agent::{
    alpha_loss, soft_update, Batch, IbBatch, IbBuffer, Learner, LossRecord, Observation, ReplayBuffer, SacConfig, SacNets, SacNoise,
};
use crate::error::{check_dim, invalid, HibError, Result};
use crate::nets::{copy_params, PrivilegeEncoder, PrivilegeMode, Projector, TcnConfig, TcnEncoder};

const MIN_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumConvention {
    /// `θ⁻ ← τ·θ⁻ + (1−τ)·θ`.
    Paper,
    /// `θ⁻ ← (1−τ)·θ⁻ + τ·θ`.
    Conventional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaTraining {
    /// Momentum copy of a shadow encoder trained on the privilege branch.
    Shadow,
    /// Fixed random projection.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HibConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub update_target_interval: u64,
    /// Latent size; defaults to the privilege dimension in identity mode
    /// and to 16 otherwise.
    pub d_z: Option<usize>,
    pub momentum_convention: MomentumConvention,
    pub privilege_mode: PrivilegeMode,
    pub omega_training: OmegaTraining,
    pub projector_hidden: usize,
    pub tcn: TcnConfig,
}

impl Default for HibConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            tau: 0.01,
            update_target_interval: 1,
            d_z: None,
            momentum_convention: MomentumConvention::Paper,
            privilege_mode: PrivilegeMode::Identity,
            omega_training: OmegaTraining::Shadow,
            projector_hidden: 64,
            tcn: TcnConfig::default(),
        }
    }
}

impl HibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(invalid("hib.tau", format!("{} outside [0, 1]", self.tau)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(invalid("hib.lambda", "λ1 and λ2 must be nonnegative"));
        }
        if self.update_target_interval == 0 {
            return Err(invalid("hib.update_target_interval", "must be positive"));
        }
        Ok(())
    }

    pub fn latent_dim(&self, priv_dim: usize) -> usize {
        match (self.d_z, self.privilege_mode) {
            (Some(d), _) => d,
            (None, PrivilegeMode::Identity) => priv_dim,
            (None, PrivilegeMode::Mlp) => 16,
        }
    }
}

/// Which parts of the HIB update are active.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HibVariant {
    Full,
    /// λ1 = λ2 = 0: the encoder learns from the RL loss only.
    WoIb,
    /// The RL loss does not reach the encoder.
    WoRl,
    /// Cosine similarity directly between z and the privilege embedding.
    WoProj,
    /// InfoNCE with in-batch negatives and a learned bilinear score.
    Contra { temperature: f64, negatives: Option<usize> },
}

/// `−Σ_i ⟨y_i/‖y_i‖, sg[ỹ_i]/‖sg[ỹ_i]‖⟩`.
pub fn loss_sim(t: &mut Tape, y: Var, y_tilde: Var) -> Result<Var> {
    let (vy, vt) = (t.value(y), t.value(y_tilde));
    if vy.shape() != vt.shape() {
        return Err(invalid("L_sim inputs", format!("{:?} vs {:?}", vy.shape(), vt.shape())));
    }
    for v in [vy, vt] {
        let c = v.last_dim().max(1);
        if v.data().chunks(c).any(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt() < MIN_NORM) {
            return Err(HibError::Degenerate("L_sim"));
        }
    }
    let target = t.stop_gradient(y_tilde);
    let yn = t.normalize_rows(y)?;
    let tn = t.normalize_rows(target)?;
    let p = t.mul(yn, tn)?;
    let s = t.sum(p, Reduce::All);
    Ok(t.neg(s)?)
}

/// `½ Σ_j (μ_j² + σ_j² − 1 − 2 log σ_j)`, averaged over the batch.
pub fn loss_kl(t: &mut Tape, mean: Var, log_std: Var) -> Result<Var> {
    if !t.value(mean).all_finite() || !t.value(log_std).all_finite() {
        return Err(invalid("L_KL inputs", "non-finite mean or log-std"));
    }
    let rows = t.value(mean).rows().max(1);
    let m2 = t.square(mean)?;
    let two_ls = t.scale(log_std, 2.0)?;
    let var = t.exp(two_ls);
    let a = t.add(m2, var)?;
    let b = t.sub(a, two_ls)?;
    let c = t.add_scalar(b, -1.0)?;
    let s = t.sum(c, Reduce::All);
    Ok(t.scale(s, 0.5 / rows as f64)?)
}

/// InfoNCE over the batch: positives on the diagonal of
/// `logits_ij = y_i W ỹ_jᵀ / temperature`, averaged over rows. The target
/// side is treated as a constant.
pub fn loss_contra(t: &mut Tape, y: Var, y_tilde: Var, w: Var, temperature: f64) -> Result<Var> {
    let tv = t.value(y_tilde).clone();
    let (b, d) = (tv.rows(), tv.last_dim());
    check_dim("contrastive batch", b, t.value(y).rows())?;
    let mut tt = vec![0.0; b * d];
    for i in 0..b {
        for j in 0..d {
            tt[j * b + i] = tv.data()[i * d + j];
        }
    }
    let target_t = t.constant(Tensor::matrix(d, b, tt)?);
    let target = t.constant(tv);
    let yw = t.matmul(y, w)?;
    let logits = t.matmul(yw, target_t)?;
    let logits = t.scale(logits, 1.0 / temperature)?;
    let lse = t.logsumexp_rows(logits)?;
    let pos = t.mul(yw, target)?;
    let pos = t.sum(pos, Reduce::Last);
    let pos = t.scale(pos, 1.0 / temperature)?;
    let d = t.sub(lse, pos)?;
    Ok(t.mean(d, Reduce::All))
}

/// Momentum update of a target network from its online counterpart.
pub fn momentum_update(store: &mut ParamStore, target: &[ParamId], online: &[ParamId], tau: f64, convention: MomentumConvention) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid("momentum factor", format!("{tau} outside [0, 1]")));
    }
    let (keep, take) = match convention {
        MomentumConvention::Paper => (tau, 1.0 - tau),
        MomentumConvention::Conventional => (1.0 - tau, tau),
    };
    for (&tg, &on) in target.iter().zip(online) {
        if store.get(tg).shape() != store.get(on).shape() {
            return Err(invalid("momentum update", format!("shape {:?} vs {:?}", store.get(tg).shape(), store.get(on).shape())));
        }
    }
    if target.len() != online.len() {
        return Err(invalid("momentum update", format!("{} targets for {} sources", target.len(), online.len())));
    }
    for (&tg, &on) in target.iter().zip(online) {
        let src = store.get(on).clone();
        for (d, s) in store.get_mut(tg).data_mut().iter_mut().zip(src.data()) {
            *d = keep * *d + take * s;
        }
    }
    Ok(())
}

/// Everything random in one update, drawn up front so the losses can be
/// rebuilt exactly.
#[derive(Clone, Debug)]
pub struct HibInputs {
    pub batch: Batch,
    pub ib: Option<IbBatch>,
    pub z_noise: Tensor,
    pub ib_noise: Option<Tensor>,
    pub sac_noise: SacNoise,
}

#[derive(Clone, Copy, Debug)]
pub struct HibLossVars {
    pub l_sim: Option<Var>,
    pub l_kl: Option<Var>,
    pub l_omega: Option<Var>,
    pub critic: Var,
    pub actor: Var,
    pub logp: Var,
    pub total: Var,
}

pub struct HibAgent {
    pub cfg: HibConfig,
    pub sac_cfg: SacConfig,
    pub variant: HibVariant,
    pub store: ParamStore,
    pub encoder: TcnEncoder,
    pub priv_enc: PrivilegeEncoder,
    pub priv_shadow: Option<PrivilegeEncoder>,
    pub projector: Option<Projector>,
    pub projector_tgt: Option<Projector>,
    pub contra_w: Option<ParamId>,
    pub sac: SacNets,
    d_l: usize,
    d_p: usize,
    d_z: usize,
    opt_actor: AdamState,
    opt_critic: AdamState,
    opt_alpha: AdamState,
    opt_psi: AdamState,
    opt_theta: AdamState,
    opt_omega: Option<AdamState>,
    updates: u64,
}

impl HibAgent {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: HibConfig,
        sac_cfg: SacConfig,
        variant: HibVariant,
        k: usize,
        d_l: usize,
        d_p: usize,
        d_a: usize,
        bounds: (f64, f64),
        rng: &RngStream,
    ) -> Result<Self> {
        cfg.validate()?;
        sac_cfg.validate()?;
        let mut cfg = cfg;
        if variant == HibVariant::WoIb {
            cfg.lambda1 = 0.0;
            cfg.lambda2 = 0.0;
        }
        let d_z = cfg.latent_dim(d_p);
        let mut store = ParamStore::new();
        let init = rng.derive("init");
        let encoder = TcnEncoder::new(&mut store, "psi", k, d_l + d_a, d_z, &cfg.tcn, &mut init.derive("psi"))?;
        let priv_enc = PrivilegeEncoder::new(&mut store, "omega", cfg.privilege_mode, d_p, d_z, cfg.projector_hidden, &mut init.derive("omega"))?;
        let priv_shadow = match (&priv_enc, cfg.omega_training) {
            (PrivilegeEncoder::Mlp(m), OmegaTraining::Shadow) => Some(PrivilegeEncoder::Mlp(m.duplicate(&mut store, "omega_shadow")?)),
            _ => None,
        };
        let (projector, projector_tgt) = if matches!(variant, HibVariant::WoProj) {
            (None, None)
        } else {
            let p = Projector::new(&mut store, "theta", d_z, cfg.projector_hidden, &mut init.derive("theta"))?;
            let pt = p.duplicate(&mut store, "theta_tgt")?;
            (Some(p), Some(pt))
        };
        let contra_w = match variant {
            HibVariant::Contra { temperature, .. } => {
                if !(temperature > 0.0) {
                    return Err(invalid("contrastive temperature", format!("{temperature}")));
                }
                let mut eye = Tensor::zeros(&[d_z, d_z]);
                for i in 0..d_z {
                    eye.data_mut()[i * d_z + i] = 1.0;
                }
                Some(store.insert("contra/w", eye)?)
            }
            _ => None,
        };
        let sac = SacNets::new(&mut store, d_l + d_z, d_a, sac_cfg.hidden, bounds, sac_cfg.init_alpha, &mut init.derive("sac"))?;
        let adam = AdamConfig::with_lr(sac_cfg.lr);
        let mut theta_ids = projector.as_ref().map(|p| p.ids()).unwrap_or_default();
        theta_ids.extend(contra_w);
        Ok(Self {
            opt_actor: AdamState::new(adam, &store, sac.actor_ids()),
            opt_critic: AdamState::new(adam, &store, sac.critic_ids()),
            opt_alpha: AdamState::new(adam, &store, vec![sac.log_alpha]),
            opt_psi: AdamState::new(adam, &store, encoder.ids()),
            opt_theta: AdamState::new(adam, &store, theta_ids),
            opt_omega: priv_shadow.as_ref().map(|s| AdamState::new(adam, &store, s.ids())),
            cfg,
            sac_cfg,
            variant,
            store,
            encoder,
            priv_enc,
            priv_shadow,
            projector,
            projector_tgt,
            contra_w,
            sac,
            d_l,
            d_p,
            d_z,
            updates: 0,
        })
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn draw_inputs(&self, replay: &ReplayBuffer, ib: &IbBuffer, rng: &mut RngStream) -> Result<HibInputs> {
        let n = self.sac_cfg.batch_size;
        let batch = replay.sample(n, rng)?;
        let n_ib = match self.variant {
            HibVariant::Contra { negatives: Some(m), .. } => (m + 1).min(n),
            _ => n,
        };
        let ib_batch = if ib.is_empty() { None } else { Some(ib.sample(n_ib, rng)?) };
        let b = batch.len();
        let z_noise = Tensor::matrix(b, self.d_z, rng.normals(b * self.d_z))?;
        let ib_noise = match &ib_batch {
            Some(x) => Some(Tensor::matrix(x.history.rows(), self.d_z, rng.normals(x.history.rows() * self.d_z))?),
            None => None,
        };
        let sac_noise = SacNoise::draw(rng, b, self.sac.d_a);
        Ok(HibInputs { batch, ib: ib_batch, z_noise, ib_noise, sac_noise })
    }

    fn policy_obs(&self, t: &mut Tape, local: &Tensor, z: Var) -> Result<Var> {
        let l = t.constant(local.clone());
        Ok(t.concat(&[l, z])?)
    }

    /// TD target using the deterministic latent of the next history.
    pub fn td_target(&self, inp: &HibInputs) -> Result<Tensor> {
        let b = &inp.batch;
        let mut t = Tape::new();
        let h = t.constant(b.next_history.clone());
        let lat = self.encoder.encode(&mut t, &self.store, h, None, true)?;
        let obs = self.policy_obs(&mut t, &b.next_local, lat.mean)?;
        let next_obs = t.value(obs).clone();
        let alpha = self.sac.alpha(&self.store);
        self.sac.td_target(&self.store, &next_obs, &b.reward, &b.not_done, self.sac_cfg.gamma, alpha, &inp.sac_noise.next)
    }

    /// Records every loss of one update on `t`. The IB terms come first so
    /// that their own backward passes stay short.
    pub fn build_losses(&self, t: &mut Tape, inp: &HibInputs, target: &Tensor) -> Result<HibLossVars> {
        let store = &self.store;
        let (mut l_sim, mut l_kl, mut l_omega) = (None, None, None);
        if let (Some(ib), Some(noise)) = (&inp.ib, &inp.ib_noise) {
            let h = t.constant(ib.history.clone());
            let lat = self.encoder.encode(t, store, h, Some(noise), false)?;
            let sp = t.constant(ib.privileged.clone());
            let e = self.priv_enc.forward(t, store, sp, true)?;
            let sim = match (self.variant, &self.projector, &self.projector_tgt) {
                (HibVariant::WoProj, _, _) => loss_sim(t, lat.z, e)?,
                (HibVariant::Contra { temperature, .. }, Some(p), Some(pt)) => {
                    let y = p.forward(t, store, lat.z, false)?;
                    let yt = pt.forward(t, store, e, true)?;
                    let w = t.param(store, self.contra_w.expect("contrastive variant has W"));
                    loss_contra(t, y, yt, w, temperature)?
                }
                (_, Some(p), Some(pt)) => {
                    let y = p.forward(t, store, lat.z, false)?;
                    let yt = pt.forward(t, store, e, true)?;
                    loss_sim(t, y, yt)?
                }
                _ => return Err(invalid("HIB networks", "projector missing")),
            };
            l_sim = Some(sim);
            l_kl = Some(loss_kl(t, lat.mean, lat.log_std)?);
            if let (Some(shadow), Some(p)) = (&self.priv_shadow, &self.projector) {
                // The shadow privilege encoder learns to land where the
                // history projection lands; θ is held fixed here.
                let es = shadow.forward(t, store, sp, false)?;
                let ys = p.forward(t, store, es, true)?;
                let yh = p.forward(t, store, lat.z, true)?;
                l_omega = Some(loss_sim(t, ys, yh)?);
            }
        }

        let b = &inp.batch;
        let h = t.constant(b.history.clone());
        let lat = self.encoder.encode(t, store, h, Some(&inp.z_noise), false)?;
        let z = if self.variant == HibVariant::WoRl { t.stop_gradient(lat.z) } else { lat.z };
        let obs = self.policy_obs(t, &b.local, z)?;
        let act = t.constant(b.action.clone());
        let critic = self.sac.critic_loss(t, store, obs, act, target)?;
        let alpha = self.sac.alpha(store);
        let (actor, logp) = self.sac.actor_loss(t, store, obs, &inp.sac_noise.current, alpha)?;
        let mut total = t.add(critic, actor)?;
        if let (Some(s), Some(k)) = (l_sim, l_kl) {
            let ws = t.scale(s, self.cfg.lambda1)?;
            let wk = t.scale(k, self.cfg.lambda2)?;
            total = t.add(total, ws)?;
            total = t.add(total, wk)?;
        }
        Ok(HibLossVars { l_sim, l_kl, l_omega, critic, actor, logp, total })
    }

    /// One update on pre-drawn inputs.
    pub fn update_with(&mut self, inp: &HibInputs) -> Result<LossRecord> {
        let target = self.td_target(inp)?;
        let mut t = Tape::new();
        let v = self.build_losses(&mut t, inp, &target)?;
        let g_total = t.backward(v.total)?;
        let g_sim = v.l_sim.map(|s| t.backward(s)).transpose()?;
        let g_omega = v.l_omega.map(|s| t.backward(s)).transpose()?;

        let rows = inp.batch.len() as f64;
        let mean_logp = t.value(v.logp).data().iter().sum::<f64>() / rows;
        let log_alpha = self.store.get(self.sac.log_alpha).item();
        let (al, g_alpha) = alpha_loss(log_alpha, mean_logp, self.sac.target_entropy(&self.sac_cfg));
        let critic = t.value(v.critic).item();
        let actor = t.value(v.actor).item();
        let rec = LossRecord {
            critic_loss: Some(critic),
            actor_loss: Some(actor),
            alpha: Some(log_alpha.exp()),
            alpha_loss: Some(al),
            l_sim: v.l_sim.map(|s| t.value(s).item()),
            l_kl: v.l_kl.map(|s| t.value(s).item()),
            l_rl: Some(critic + actor),
            total: Some(t.value(v.total).item()),
            lambda1: Some(self.cfg.lambda1),
            lambda2: Some(self.cfg.lambda2),
            keep_prob: None,
            ib_skipped: v.l_sim.is_none(),
        };

        let store = &mut self.store;
        adam_step_from(store, &g_total, &mut self.opt_critic)?;
        adam_step_from(store, &g_total, &mut self.opt_actor)?;
        adam_step_from(store, &g_total, &mut self.opt_psi)?;
        if let Some(g) = &g_sim {
            adam_step_from(store, g, &mut self.opt_theta)?;
        }
        if let (Some(g), Some(opt)) = (&g_omega, self.opt_omega.as_mut()) {
            adam_step_from(store, g, opt)?;
        }
        let ga = Tensor::scalar(g_alpha);
        adam_step(store, &[Some(&ga)], &mut self.opt_alpha)?;
        soft_update(store, &self.sac.target_ids(), &self.sac.critic_ids(), self.sac_cfg.rho)?;

        self.updates += 1;
        if self.updates % self.cfg.update_target_interval == 0 {
            if let (Some(p), Some(pt)) = (&self.projector, &self.projector_tgt) {
                momentum_update(store, &pt.ids(), &p.ids(), self.cfg.tau, self.cfg.momentum_convention)?;
            }
            if let Some(s) = &self.priv_shadow {
                momentum_update(store, &self.priv_enc.ids(), &s.ids(), self.cfg.tau, self.cfg.momentum_convention)?;
            }
        }
        Ok(rec)
    }

    fn history_tensor(&self, obs: &Observation<'_>) -> Result<Tensor> {
        check_dim("history", self.encoder.input_len(), obs.history.data().len())?;
        Ok(Tensor::matrix(1, self.encoder.input_len(), obs.history.data().to_vec())?)
    }

    pub fn privilege_dim(&self) -> usize {
        self.d_p
    }

    /// Copies the shadow privilege encoder into the target one.
    pub fn sync_privilege_encoder(&mut self) -> Result<()> {
        if let Some(s) = &self.priv_shadow {
            copy_params(&mut self.store, &s.ids(), &self.priv_enc.ids())?;
        }
        Ok(())
    }
}

impl Learner for HibAgent {
    fn act(&mut self, obs: &Observation<'_>, explore: bool, rng: &mut RngStream) -> Result<Vec<f64>> {
        check_dim("local state", self.d_l, obs.local.len())?;
        let h = self.history_tensor(obs)?;
        let mut t = Tape::new();
        let hv = t.constant(h);
        let local = Tensor::matrix(1, self.d_l, obs.local.to_vec())?;
        let a = if explore {
            let zn = Tensor::matrix(1, self.d_z, rng.normals(self.d_z))?;
            let lat = self.encoder.encode(&mut t, &self.store, hv, Some(&zn), true)?;
            let o = self.policy_obs(&mut t, &local, lat.z)?;
            let an = Tensor::matrix(1, self.sac.d_a, rng.normals(self.sac.d_a))?;
            self.sac.actor.sample(&mut t, &self.store, o, &an, true)?.0
        } else {
            let lat = self.encoder.encode(&mut t, &self.store, hv, None, true)?;
            let o = self.policy_obs(&mut t, &local, lat.mean)?;
            self.sac.actor.deterministic(&mut t, &self.store, o, true)?
        };
        Ok(t.value(a).data().to_vec())
    }

    fn update(&mut self, replay: &ReplayBuffer, ib: &IbBuffer, rng: &mut RngStream) -> Result<LossRecord> {
        let inp = self.draw_inputs(replay, ib, rng)?;
        self.update_with(&inp)
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn latent(&self, obs: &Observation<'_>) -> Result<Option<Vec<f64>>> {
        let h = self.history_tensor(obs)?;
        let mut t = Tape::new();
        let hv = t.constant(h);
        let lat = self.encoder.encode(&mut t, &self.store, hv, None, true)?;
        Ok(Some(t.value(lat.mean).data().to_vec()))
    }

    fn policy_input_dim(&self) -> usize {
        self.sac.obs_dim
    }
}
