//! A small HIB agent on random pendulum rollouts.

use std::sync::Arc;

use hib::agent::{push_step, Dims, History, IbBuffer, ReplayBuffer, SacConfig, Transition};
use hib::envs::{Env, Pendulum, RandomizationRange, Tier};
use hib::hib::{HibAgent, HibConfig, HibInputs, HibVariant};
use hib::nets::{PrivilegeMode, TcnConfig};
use numcore::{ParamId, RngStream, Tensor};

pub const K: usize = 20;

pub fn small_cfg(mode: PrivilegeMode) -> HibConfig {
    HibConfig {
        privilege_mode: mode,
        projector_hidden: 8,
        tcn: TcnConfig { channels: vec![4, 4, 4], kernel: 3, stride: 2, hidden: 8 },
        d_z: if mode == PrivilegeMode::Mlp { Some(3) } else { None },
        ..HibConfig::default()
    }
}

pub fn small_sac() -> SacConfig {
    SacConfig { batch_size: 6, hidden: 8, ..SacConfig::default() }
}

pub fn agent(variant: HibVariant, mode: PrivilegeMode, seed: u64) -> HibAgent {
    HibAgent::new(small_cfg(mode), small_sac(), variant, K, 3, 4, 1, (-2.0, 2.0), &RngStream::new(seed)).unwrap()
}

/// Random-action pendulum rollouts, long enough to fill the IB buffer.
pub fn buffers(steps: usize, seed: u64) -> (ReplayBuffer, IbBuffer) {
    let dims = Dims { local: 3, privileged: 4, action: 1, k: K };
    let mut replay = ReplayBuffer::new(1000, dims);
    let mut ib = IbBuffer::new(1000, dims);
    let mut env = Pendulum::new(RandomizationRange::default(), 60, None).unwrap();
    let mut rng = RngStream::new(seed);
    let mut hist = History::new(K, 3, 1);
    let mut s = env.reset(Tier::Ordinary, &mut rng).unwrap();
    hist.reset(&s.local).unwrap();
    for _ in 0..steps {
        let a = vec![rng.uniform(-2.0, 2.0)];
        let st = env.step(&a).unwrap();
        let t = Transition {
            local: s.local.clone(),
            privileged: s.privileged.clone(),
            action: a.clone(),
            reward: st.reward,
            next_local: st.state.local.clone(),
            next_privileged: st.state.privileged.clone(),
            history: Arc::from(hist.data()),
            history_full: hist.is_full(),
            terminal: false,
        };
        push_step(&mut replay, &mut ib, t).unwrap();
        hist.push(&a, &st.state.local).unwrap();
        s = if st.truncated {
            let s = env.reset(Tier::Ordinary, &mut rng).unwrap();
            hist.reset(&s.local).unwrap();
            s
        } else {
            st.state
        };
    }
    (replay, ib)
}

pub fn fixture(variant: HibVariant, mode: PrivilegeMode, seed: u64) -> (HibAgent, HibInputs, Tensor) {
    let a = agent(variant, mode, seed);
    let (replay, ib) = buffers(150, seed);
    let inp = a.draw_inputs(&replay, &ib, &mut RngStream::new(seed + 100)).unwrap();
    let target = a.td_target(&inp).unwrap();
    (a, inp, target)
}

pub fn zero_or_absent(g: Option<&Tensor>) -> bool {
    g.map_or(true, |t| t.data().iter().all(|&v| v == 0.0))
}

pub fn any_nonzero(g: Option<&Tensor>) -> bool {
    g.is_some_and(|t| t.data().iter().any(|&v| v != 0.0))
}

pub fn target_branch_ids(a: &HibAgent) -> Vec<ParamId> {
    let mut ids = a.priv_enc.ids();
    if let Some(p) = &a.projector_tgt {
        ids.extend(p.ids());
    }
    ids
}

