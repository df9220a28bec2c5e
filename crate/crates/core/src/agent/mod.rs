//! SAC core shared by every variant, plus history-aware replay.

mod history;
mod replay;
mod sac;

use numcore::{adam_step_from, AdamConfig, AdamState, ParamStore, RngStream, Tape, Tensor};
use serde::Serialize;

use crate::baselines::DropperSchedule;
use crate::error::{check_dim, Result};

pub use history::History;
pub use replay::{push_step, Batch, Dims, IbBatch, IbBuffer, ReplayBuffer, Ring, Transition};
pub use sac::{alpha_loss, sac_losses, soft_update, SacConfig, SacInputs, SacLossValues, SacNets, SacNoise};

/// What the agent may look at when choosing an action.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub local: &'a [f64],
    pub privileged: &'a [f64],
    pub history: &'a History,
}

/// Losses and diagnostics of one gradient step. Absent fields do not
/// apply to the variant.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critic_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub actor_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_sim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_rl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keep_prob: Option<f64>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub ib_skipped: bool,
}

pub trait Learner {
    /// Action for the current step; `explore` samples, otherwise the
    /// deterministic policy is used.
    fn act(&mut self, obs: &Observation<'_>, explore: bool, rng: &mut RngStream) -> Result<Vec<f64>>;
    fn update(&mut self, replay: &ReplayBuffer, ib: &IbBuffer, rng: &mut RngStream) -> Result<LossRecord>;
    /// Informs schedule-driven variants of training progress.
    fn set_env_step(&mut self, _step: u64) {}
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Deterministic latent for analysis, if the variant has one.
    fn latent(&self, _obs: &Observation<'_>) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
    fn policy_input_dim(&self) -> usize;
}

/// How privileged state enters a plain SAC agent.
#[derive(Clone, Debug)]
pub enum PrivilegeInput {
    /// Local state only.
    Hidden,
    /// `[s^l ‖ s^p]`.
    Full,
    /// `[s^l ‖ m ⊙ s^p]` with a decaying keep probability.
    Dropper(DropperSchedule),
}

/// SAC on directly assembled observations: Teacher, SAC-DR and Dropper.
pub struct SacAgent {
    pub cfg: SacConfig,
    pub store: ParamStore,
    pub nets: SacNets,
    input: PrivilegeInput,
    d_l: usize,
    d_p: usize,
    opt_actor: AdamState,
    opt_critic: AdamState,
    opt_alpha: AdamState,
    mask_rng: RngStream,
}

impl SacAgent {
    pub fn new(cfg: SacConfig, input: PrivilegeInput, d_l: usize, d_p: usize, d_a: usize, bounds: (f64, f64), rng: &RngStream) -> Result<Self> {
        cfg.validate()?;
        let obs_dim = match input {
            PrivilegeInput::Hidden => d_l,
            PrivilegeInput::Full | PrivilegeInput::Dropper(_) => d_l + d_p,
        };
        let mut store = ParamStore::new();
        let nets = SacNets::new(&mut store, obs_dim, d_a, cfg.hidden, bounds, cfg.init_alpha, &mut rng.derive("init"))?;
        let adam = AdamConfig::with_lr(cfg.lr);
        let opt_actor = AdamState::new(adam, &store, nets.actor_ids());
        let opt_critic = AdamState::new(adam, &store, nets.critic_ids());
        let opt_alpha = AdamState::new(adam, &store, vec![nets.log_alpha]);
        Ok(Self { cfg, store, nets, input, d_l, d_p, opt_actor, opt_critic, opt_alpha, mask_rng: rng.derive("dropper-mask") })
    }

    pub fn input(&self) -> &PrivilegeInput {
        &self.input
    }

    fn keep_prob(&self) -> Option<f64> {
        match &self.input {
            PrivilegeInput::Dropper(s) => Some(s.keep_prob()),
            _ => None,
        }
    }

    /// Observation rows `[B, obs_dim]`; `masks[i]` selects the privilege
    /// entries of row `i` kept by the dropper.
    fn assemble(&self, local: &Tensor, privileged: &Tensor, masks: Option<&[Vec<bool>]>) -> Tensor {
        let b = local.rows();
        match self.input {
            PrivilegeInput::Hidden => local.clone(),
            _ => {
                let mut data = Vec::with_capacity(b * (self.d_l + self.d_p));
                for i in 0..b {
                    data.extend_from_slice(local.row(i));
                    let p = privileged.row(i);
                    match masks {
                        Some(m) => data.extend(p.iter().zip(&m[i]).map(|(&v, &keep)| if keep { v } else { 0.0 })),
                        None => data.extend_from_slice(p),
                    }
                }
                Tensor::new(vec![b, self.d_l + self.d_p], data).expect("assembled rows")
            }
        }
    }

    fn draw_masks(&mut self, rows: usize) -> Option<Vec<Vec<bool>>> {
        let keep = self.keep_prob()?;
        let d_p = self.d_p;
        Some((0..rows).map(|_| (0..d_p).map(|_| self.mask_rng.bernoulli(keep)).collect()).collect())
    }

    /// Policy observation exactly as the actor sees it at decision time.
    pub fn policy_obs(&mut self, obs: &Observation<'_>, explore: bool) -> Result<Tensor> {
        check_dim("local state", self.d_l, obs.local.len())?;
        if !matches!(self.input, PrivilegeInput::Hidden) {
            check_dim("privileged state", self.d_p, obs.privileged.len())?;
        }
        let local = Tensor::matrix(1, self.d_l, obs.local.to_vec())?;
        let p = if matches!(self.input, PrivilegeInput::Hidden) { Vec::new() } else { obs.privileged.to_vec() };
        let privileged = Tensor::matrix(1, p.len(), p)?;
        let masks = match (&self.input, explore) {
            (PrivilegeInput::Dropper(_), true) => self.draw_masks(1),
            // Deployment: the dropped agent never sees privilege.
            (PrivilegeInput::Dropper(_), false) => Some(vec![vec![false; self.d_p]]),
            _ => None,
        };
        Ok(self.assemble(&local, &privileged, masks.as_deref()))
    }
}

impl Learner for SacAgent {
    fn act(&mut self, obs: &Observation<'_>, explore: bool, rng: &mut RngStream) -> Result<Vec<f64>> {
        let o = self.policy_obs(obs, explore)?;
        let mut t = Tape::new();
        let ov = t.constant(o);
        let a = if explore {
            let noise = Tensor::matrix(1, self.nets.d_a, rng.normals(self.nets.d_a))?;
            self.nets.actor.sample(&mut t, &self.store, ov, &noise, true)?.0
        } else {
            self.nets.actor.deterministic(&mut t, &self.store, ov, true)?
        };
        Ok(t.value(a).data().to_vec())
    }

    fn update(&mut self, replay: &ReplayBuffer, _ib: &IbBuffer, rng: &mut RngStream) -> Result<LossRecord> {
        let batch = replay.sample(self.cfg.batch_size, rng)?;
        let noise = SacNoise::draw(rng, batch.len(), self.nets.d_a);
        let masks = self.draw_masks(batch.len());
        let inp = SacInputs {
            obs: self.assemble(&batch.local, &batch.privileged, masks.as_deref()),
            action: batch.action.clone(),
            reward: batch.reward.clone(),
            next_obs: self.assemble(&batch.next_local, &batch.next_privileged, masks.as_deref()),
            not_done: batch.not_done.clone(),
            noise,
        };
        let mut rec = sac_update(&self.nets, &mut self.store, &inp, &self.cfg, &mut self.opt_actor, &mut self.opt_critic, &mut self.opt_alpha)?;
        rec.keep_prob = self.keep_prob();
        Ok(rec)
    }

    fn set_env_step(&mut self, step: u64) {
        if let PrivilegeInput::Dropper(s) = &mut self.input {
            s.set_step(step);
        }
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn policy_input_dim(&self) -> usize {
        self.nets.obs_dim
    }
}

/// One SAC gradient step on assembled inputs, including the target update.
pub fn sac_update(
    nets: &SacNets,
    store: &mut ParamStore,
    inp: &SacInputs,
    cfg: &SacConfig,
    opt_actor: &mut AdamState,
    opt_critic: &mut AdamState,
    opt_alpha: &mut AdamState,
) -> Result<LossRecord> {
    let alpha = nets.alpha(store);
    let y = nets.td_target(store, &inp.next_obs, &inp.reward, &inp.not_done, cfg.gamma, alpha, &inp.noise.next)?;
    let mut t = Tape::new();
    let obs = t.constant(inp.obs.clone());
    let act = t.constant(inp.action.clone());
    let critic = nets.critic_loss(&mut t, store, obs, act, &y)?;
    let (actor, logp) = nets.actor_loss(&mut t, store, obs, &inp.noise.current, alpha)?;
    let total = t.add(critic, actor)?;
    let grads = t.backward(total)?;
    let mean_logp = t.value(logp).data().iter().sum::<f64>() / inp.obs.rows() as f64;
    let log_alpha = store.get(nets.log_alpha).item();
    let (al, g_alpha) = alpha_loss(log_alpha, mean_logp, nets.target_entropy(cfg));
    let rec = LossRecord {
        critic_loss: Some(t.value(critic).item()),
        actor_loss: Some(t.value(actor).item()),
        alpha: Some(alpha),
        alpha_loss: Some(al),
        ..Default::default()
    };
    adam_step_from(store, &grads, opt_critic)?;
    adam_step_from(store, &grads, opt_actor)?;
    let ga = Tensor::scalar(g_alpha);
    numcore::adam_step(store, &[Some(&ga)], opt_alpha)?;
    soft_update(store, &nets.target_ids(), &nets.critic_ids(), cfg.rho)?;
    Ok(rec)
}
