mod common;

use std::sync::Arc;

use common::{param_grad_error, randn, FD_TOL};
use hib::agent::{
    push_step, soft_update, sac_losses, Dims, History, IbBuffer, Learner, Observation, PrivilegeInput, ReplayBuffer, SacAgent, SacConfig, SacInputs,
    SacNets, SacNoise, Transition,
};
use hib::envs::{Env, Pendulum, RandomizationRange, Tier};
use hib::hib::{momentum_update, MomentumConvention};
use hib::nets::{Critic, GaussianActor, PrivilegeEncoder, PrivilegeMode, Projector, TcnConfig, TcnEncoder};
use numcore::{ParamStore, RngStream, Tape, Tensor};
use proptest::prelude::*;

fn small_tcn() -> TcnConfig {
    TcnConfig { channels: vec![4, 4, 4], kernel: 3, stride: 2, hidden: 8 }
}

#[test]
fn tcn_accepts_zero_history_of_length_50() {
    let mut store = ParamStore::new();
    let enc = TcnEncoder::new(&mut store, "psi", 50, 4, 4, &TcnConfig::default(), &mut RngStream::new(0)).unwrap();
    let mut t = Tape::new();
    let h = t.constant(Tensor::zeros(&[1, 200]));
    let (m, ls) = enc.forward(&mut t, &store, h, true).unwrap();
    assert_eq!(t.value(m).shape(), &[1, 4]);
    assert!(t.value(m).all_finite() && t.value(ls).all_finite());
    assert!(t.value(ls).data().iter().all(|&v| (-10.0..=2.0).contains(&v)));
}

#[test]
fn tcn_rejects_wrong_history_length() {
    let mut store = ParamStore::new();
    let enc = TcnEncoder::new(&mut store, "psi", 50, 4, 4, &TcnConfig::default(), &mut RngStream::new(0)).unwrap();
    let mut t = Tape::new();
    let h = t.constant(Tensor::zeros(&[1, 196]));
    assert!(enc.forward(&mut t, &store, h, true).is_err());
}

#[test]
fn tcn_sample_is_deterministic_given_stream() {
    let mut store = ParamStore::new();
    let enc = TcnEncoder::new(&mut store, "psi", 20, 3, 2, &small_tcn(), &mut RngStream::new(1)).unwrap();
    let h = randn(&mut RngStream::new(2), &[3, 60]);
    let draw = |seed| {
        let noise = randn(&mut RngStream::new(seed), &[3, 2]);
        let mut t = Tape::new();
        let hv = t.constant(h.clone());
        let lat = enc.encode(&mut t, &store, hv, Some(&noise), true).unwrap();
        t.value(lat.z).clone()
    };
    assert_eq!(draw(7), draw(7));
    assert_ne!(draw(7), draw(8));
}

#[test]
fn privilege_encoder_modes() {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(0);
    let id = PrivilegeEncoder::new(&mut store, "omega", PrivilegeMode::Identity, 4, 4, 8, &mut rng).unwrap();
    let sp = randn(&mut rng, &[2, 4]);
    let mut t = Tape::new();
    let v = t.constant(sp.clone());
    let out = id.forward(&mut t, &store, v, true).unwrap();
    assert_eq!(t.value(out), &sp);

    // High-dimensional privilege needs the MLP mode.
    assert!(PrivilegeEncoder::new(&mut store, "omega2", PrivilegeMode::Identity, 191, 16, 8, &mut rng).is_err());
    let mlp = PrivilegeEncoder::new(&mut store, "omega3", PrivilegeMode::Mlp, 191, 16, 8, &mut rng).unwrap();
    let mut t = Tape::new();
    let z = t.constant(Tensor::zeros(&[1, 191]));
    let a = mlp.forward(&mut t, &store, z, true).unwrap();
    assert_eq!(t.value(a).shape(), &[1, 16]);
    // At zero input only the bias path contributes.
    let PrivilegeEncoder::Mlp(m) = &mlp else { unreachable!() };
    let ids = m.ids();
    let b0 = store.get(ids[1]).map(|v| v.max(0.0));
    let (w1, b1) = (store.get(ids[2]), store.get(ids[3]));
    for j in 0..16 {
        let expect: f64 = (0..8).map(|i| b0.data()[i] * w1.data()[i * 16 + j]).sum::<f64>() + b1.data()[j];
        assert!((t.value(a).data()[j] - expect).abs() < 1e-12);
    }
}

#[test]
fn projector_copies_and_momentum_with_zero_tau() {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(3);
    let online = Projector::new(&mut store, "theta", 4, 8, &mut rng).unwrap();
    let target = online.duplicate(&mut store, "theta_tgt").unwrap();
    let x = randn(&mut rng, &[5, 4]);
    let run = |store: &ParamStore, p: &Projector| {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = p.forward(&mut t, store, v, true).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run(&store, &online), run(&store, &target));
    for id in online.ids() {
        let d = store.get_mut(id);
        *d = d.map(|v| v + 0.5);
    }
    assert_ne!(run(&store, &online), run(&store, &target));
    momentum_update(&mut store, &target.ids(), &online.ids(), 0.0, MomentumConvention::Paper).unwrap();
    assert_eq!(run(&store, &online), run(&store, &target));
    for (a, b) in online.ids().iter().zip(target.ids()) {
        assert_eq!(store.get(*a).shape(), store.get(b).shape());
    }
}

#[test]
fn actor_bounds_and_determinism() {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(4);
    let actor = GaussianActor::new(&mut store, "actor", 3, 2, 16, (-2.0, 2.0), &mut rng).unwrap();
    // Push the policy toward saturation.
    for id in actor.ids() {
        let d = store.get_mut(id);
        *d = d.map(|v| v * 50.0);
    }
    let obs = randn(&mut rng, &[10_000, 3]).map(|v| v * 10.0);
    let noise = randn(&mut rng, &[10_000, 2]);
    let mut t = Tape::new();
    let o = t.constant(obs.clone());
    let (a, logp) = actor.sample(&mut t, &store, o, &noise, true).unwrap();
    assert!(t.value(a).data().iter().all(|&v| (-2.0..=2.0).contains(&v)));
    assert_eq!(t.value(logp).shape(), &[10_000, 1]);
    let d1 = actor.deterministic(&mut t, &store, o, true).unwrap();
    let d2 = actor.deterministic(&mut t, &store, o, true).unwrap();
    assert_eq!(t.value(d1), t.value(d2));
}

/// The squashed density integrates to one over the action interval.
#[test]
fn actor_log_prob_integrates_to_one() {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(5);
    let actor = GaussianActor::new(&mut store, "actor", 2, 1, 8, (-2.0, 2.0), &mut rng).unwrap();
    for id in actor.ids() {
        let d = store.get_mut(id);
        *d = d.map(|v| v * 20.0);
    }
    let obs = Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap();
    let n = 20_001;
    let eps: Vec<f64> = (0..n).map(|i| -9.0 + 18.0 * i as f64 / (n - 1) as f64).collect();
    let obs_rows = Tensor::new(vec![n, 2], obs.data().repeat(n)).unwrap();
    let mut t = Tape::new();
    let o = t.constant(obs_rows);
    let (a, logp) = actor.sample(&mut t, &store, o, &Tensor::new(vec![n, 1], eps).unwrap(), true).unwrap();
    let (a, p): (Vec<f64>, Vec<f64>) = (t.value(a).data().to_vec(), t.value(logp).data().iter().map(|l| l.exp()).collect());
    let integral: f64 = (1..n).map(|i| 0.5 * (p[i] + p[i - 1]) * (a[i] - a[i - 1])).sum();
    assert!((integral - 1.0).abs() < 1e-3, "∫p = {integral}");
}

fn dims() -> Dims {
    Dims { local: 2, privileged: 1, action: 1, k: 3 }
}

fn transition(d: Dims, full: bool, tag: f64) -> Transition {
    Transition {
        local: vec![tag; d.local],
        privileged: vec![tag; d.privileged],
        action: vec![tag; d.action],
        reward: tag,
        next_local: vec![tag + 1.0; d.local],
        next_privileged: vec![tag; d.privileged],
        history: Arc::from(vec![tag; d.history_len()]),
        history_full: full,
        terminal: false,
    }
}

#[test]
fn padded_histories_stay_out_of_ib_buffer() {
    let d = dims();
    let (mut r, mut ib) = (ReplayBuffer::new(10, d), IbBuffer::new(10, d));
    for i in 0..2 {
        push_step(&mut r, &mut ib, transition(d, false, i as f64)).unwrap();
    }
    assert_eq!((r.len(), ib.len()), (2, 0));
    push_step(&mut r, &mut ib, transition(d, true, 2.0)).unwrap();
    assert_eq!((r.len(), ib.len()), (3, 1));
}

#[test]
fn replay_evicts_oldest_at_capacity() {
    let d = dims();
    let (mut r, mut ib) = (ReplayBuffer::new(3, d), IbBuffer::new(3, d));
    for i in 0..4 {
        push_step(&mut r, &mut ib, transition(d, true, i as f64)).unwrap();
    }
    let rewards: Vec<f64> = r.iter_ordered().map(|t| t.reward).collect();
    assert_eq!(rewards, vec![1.0, 2.0, 3.0]);
}

#[test]
fn replay_rejects_mismatched_dims() {
    let d = dims();
    let mut r = ReplayBuffer::new(3, d);
    let mut t = transition(d, true, 0.0);
    t.action = vec![0.0, 0.0];
    assert!(r.push(t).is_err());
}

#[test]
fn replay_sampling_is_uniform() {
    let d = dims();
    let (mut r, mut ib) = (ReplayBuffer::new(10, d), IbBuffer::new(10, d));
    for i in 0..10 {
        push_step(&mut r, &mut ib, transition(d, true, i as f64)).unwrap();
    }
    let idx = r.sample_indices(100_000, &mut RngStream::new(6)).unwrap();
    let mut counts = [0usize; 10];
    for i in idx {
        counts[i] += 1;
    }
    let (p, n) = (0.1, 100_000.0);
    let sigma = (n * p * (1.0 - p) as f64).sqrt();
    for c in counts {
        assert!((c as f64 - n * p).abs() < 4.0 * sigma, "{counts:?}");
    }
    // Pearson chi-square, 9 degrees of freedom, critical value at p = 0.001.
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - n * p).powi(2) / (n * p)).sum();
    assert!(chi2 < 27.88, "chi2 {chi2}, {counts:?}");
}

/// Every stored window is rebuilt from the episode prefix and matches.
#[test]
fn stored_histories_match_episode_prefix() {
    let mut env = Pendulum::new(RandomizationRange::default(), 30, Some(8.0)).unwrap();
    let mut rng = RngStream::new(7);
    let k = 5;
    let d = Dims { local: 3, privileged: 4, action: 1, k };
    let (mut r, mut ib) = (ReplayBuffer::new(100, d), IbBuffer::new(100, d));
    let mut hist = History::new(k, 3, 1);
    let mut s = env.reset(Tier::Ordinary, &mut rng).unwrap();
    hist.reset(&s.local).unwrap();
    let mut locals = vec![s.local.clone()];
    let mut actions: Vec<Vec<f64>> = Vec::new();
    for _ in 0..30 {
        let a = vec![rng.uniform(-2.0, 2.0)];
        let st = env.step(&a).unwrap();
        push_step(
            &mut r,
            &mut ib,
            Transition {
                local: s.local.clone(),
                privileged: s.privileged.clone(),
                action: a.clone(),
                reward: st.reward,
                next_local: st.state.local.clone(),
                next_privileged: st.state.privileged.clone(),
                history: Arc::from(hist.data()),
                history_full: hist.is_full(),
                terminal: false,
            },
        )
        .unwrap();
        hist.push(&a, &st.state.local).unwrap();
        actions.push(a);
        locals.push(st.state.local.clone());
        s = st.state;
    }
    for (t, tr) in r.iter_ordered().enumerate() {
        // Newest first: (s_{t-j}, a_{t-j-1}), zeros before the episode.
        let mut expect = Vec::new();
        for j in 0..k {
            if j <= t {
                expect.extend_from_slice(&locals[t - j]);
                if j < t {
                    expect.extend_from_slice(&actions[t - j - 1]);
                } else {
                    expect.push(0.0);
                }
            } else {
                expect.extend([0.0; 4]);
            }
        }
        assert_eq!(&tr.history[..], &expect[..], "step {t}");
        assert_eq!(tr.history_full, t + 1 >= k);
    }
    assert_eq!(ib.len(), 30 - (k - 1));
}

fn sac_fixture(seed: u64, b: usize) -> (ParamStore, SacNets, SacInputs) {
    let mut rng = RngStream::new(seed);
    let mut store = ParamStore::new();
    let nets = SacNets::new(&mut store, 3, 1, 8, (-2.0, 2.0), 0.7, &mut rng).unwrap();
    let inp = SacInputs {
        obs: randn(&mut rng, &[b, 3]),
        action: randn(&mut rng, &[b, 1]).map(|v| v.tanh() * 2.0),
        reward: randn(&mut rng, &[b, 1]),
        next_obs: randn(&mut rng, &[b, 3]),
        not_done: Tensor::full(&[b, 1], 1.0),
        noise: SacNoise::draw(&mut rng, b, 1),
    };
    (store, nets, inp)
}

#[test]
fn zero_discount_target_is_reward() {
    let (store, nets, inp) = sac_fixture(0, 4);
    let y = nets.td_target(&store, &inp.next_obs, &inp.reward, &inp.not_done, 0.0, 0.7, &inp.noise.next).unwrap();
    assert_eq!(y, inp.reward);
}

#[test]
fn identical_twin_critics_give_either_value() {
    let (mut store, nets, inp) = sac_fixture(1, 4);
    let (c1, c2) = (nets.critic1.ids(), nets.critic2.ids());
    for (a, b) in c1.iter().zip(&c2) {
        let v = store.get(*a).clone();
        *store.get_mut(*b) = v;
    }
    let mut t = Tape::new();
    let o = t.constant(inp.obs.clone());
    let a = t.constant(inp.action.clone());
    let q1 = nets.critic1.forward(&mut t, &store, o, a, true).unwrap();
    let q2 = nets.critic2.forward(&mut t, &store, o, a, true).unwrap();
    let m = t.minimum(q1, q2).unwrap();
    assert_eq!(t.value(m), t.value(q1));
}

#[test]
fn critic_and_actor_gradients_match_finite_differences() {
    for seed in 0..5 {
        let (store, nets, inp) = sac_fixture(10 + seed, 2);
        let y = nets.td_target(&store, &inp.next_obs, &inp.reward, &inp.not_done, 0.99, 0.7, &inp.noise.next).unwrap();
        let critic = |t: &mut Tape, s: &ParamStore| {
            let o = t.constant(inp.obs.clone());
            let a = t.constant(inp.action.clone());
            nets.critic_loss(t, s, o, a, &y).unwrap()
        };
        let e = param_grad_error(&store, &nets.critic_ids(), &critic);
        assert!(e <= FD_TOL, "critic seed {seed}: {e}");
        let actor = |t: &mut Tape, s: &ParamStore| {
            let o = t.constant(inp.obs.clone());
            nets.actor_loss(t, s, o, &inp.noise.current, 0.7).unwrap().0
        };
        let e = param_grad_error(&store, &nets.actor_ids(), &actor);
        assert!(e <= FD_TOL, "actor seed {seed}: {e}");
    }
}

#[test]
fn actor_loss_leaves_critics_untouched() {
    let (store, nets, inp) = sac_fixture(3, 4);
    let mut t = Tape::new();
    let o = t.constant(inp.obs.clone());
    let (l, _) = nets.actor_loss(&mut t, &store, o, &inp.noise.current, 0.7).unwrap();
    let g = t.backward(l).unwrap();
    assert!(nets.critic_ids().iter().all(|&id| g.param(id).is_none()));
}

#[test]
fn sac_losses_reject_empty_batch() {
    let (store, nets, mut inp) = sac_fixture(4, 1);
    inp.obs = Tensor::zeros(&[0, 3]);
    assert!(sac_losses(&nets, &store, &inp, &SacConfig::default()).is_err());
}

#[test]
fn soft_update_extremes() {
    let mut store = ParamStore::new();
    let tg = store.insert("t", Tensor::scalar(0.0)).unwrap();
    let on = store.insert("o", Tensor::scalar(1.0)).unwrap();
    soft_update(&mut store, &[tg], &[on], 1.0).unwrap();
    assert_eq!(store.get(tg).item(), 0.0);
    soft_update(&mut store, &[tg], &[on], 0.995).unwrap();
    assert!((store.get(tg).item() - 0.005).abs() < 1e-15);
    soft_update(&mut store, &[tg], &[on], 0.0).unwrap();
    assert_eq!(store.get(tg).item(), 1.0);
    let bad = store.insert("v", Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert!(soft_update(&mut store, &[tg], &[bad], 0.5).is_err());
}

#[test]
fn dr_policy_input_is_local_only() {
    let cfg = SacConfig { hidden: 8, ..Default::default() };
    let rng = RngStream::new(0);
    let mut dr = SacAgent::new(cfg.clone(), PrivilegeInput::Hidden, 3, 4, 1, (-2.0, 2.0), &rng).unwrap();
    let teacher = SacAgent::new(cfg, PrivilegeInput::Full, 3, 4, 1, (-2.0, 2.0), &rng).unwrap();
    assert_eq!(dr.policy_input_dim(), 3);
    assert_eq!(teacher.policy_input_dim(), 7);
    // Changing the privilege leaves the DR action unchanged.
    let hist = History::new(2, 3, 1);
    let local = [0.1, 0.9, -0.3];
    let a = dr.act(&Observation { local: &local, privileged: &[0.0; 4], history: &hist }, false, &mut RngStream::new(1)).unwrap();
    let b = dr.act(&Observation { local: &local, privileged: &[5.0; 4], history: &hist }, false, &mut RngStream::new(1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn teacher_training_smoke_stays_finite() {
    let cfg = SacConfig { hidden: 16, batch_size: 16, ..Default::default() };
    let mut agent = SacAgent::new(cfg, PrivilegeInput::Full, 3, 4, 1, (-2.0, 2.0), &RngStream::new(2)).unwrap();
    let mut env = Pendulum::new(RandomizationRange::default(), 50, Some(8.0)).unwrap();
    let d = Dims { local: 3, privileged: 4, action: 1, k: 2 };
    let (mut r, mut ib) = (ReplayBuffer::new(1000, d), IbBuffer::new(1000, d));
    let mut rng = RngStream::new(3);
    let mut hist = History::new(2, 3, 1);
    let mut s = env.reset(Tier::Ordinary, &mut rng).unwrap();
    hist.reset(&s.local).unwrap();
    for _ in 0..300 {
        // Privilege replaced by noise.
        let noisy: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let a = agent.act(&Observation { local: &s.local, privileged: &noisy, history: &hist }, true, &mut rng).unwrap();
        let st = env.step(&a).unwrap();
        let tr = Transition {
            local: s.local.clone(),
            privileged: noisy.clone(),
            action: a.clone(),
            reward: st.reward,
            next_local: st.state.local.clone(),
            next_privileged: noisy,
            history: Arc::from(hist.data()),
            history_full: hist.is_full(),
            terminal: false,
        };
        push_step(&mut r, &mut ib, tr).unwrap();
        hist.push(&a, &st.state.local).unwrap();
        s = if st.truncated {
            let s = env.reset(Tier::Ordinary, &mut rng).unwrap();
            hist.reset(&s.local).unwrap();
            s
        } else {
            st.state
        };
        let rec = agent.update(&r, &ib, &mut rng).unwrap();
        assert!(rec.critic_loss.unwrap().is_finite() && rec.actor_loss.unwrap().is_finite());
    }
}

#[test]
fn critic_congruence_check() {
    let mut store = ParamStore::new();
    let c = Critic::new(&mut store, "critic1", 3, 1, 4, &mut RngStream::new(0)).unwrap();
    let d = c.duplicate(&mut store, "critic1_tgt").unwrap();
    for (a, b) in c.ids().iter().zip(d.ids()) {
        assert_eq!(store.get(*a), store.get(b));
        assert!(store.name(b).starts_with("critic1_tgt/"));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn history_padding_is_zero(k in 1usize..8, steps in 0usize..12, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let mut h = History::new(k, 2, 1);
        h.reset(&rng.normals(2)).unwrap();
        for _ in 0..steps {
            h.push(&rng.normals(1), &rng.normals(2)).unwrap();
        }
        let valid = (steps + 1).min(k);
        prop_assert_eq!(h.valid_len(), valid);
        prop_assert!(h.data()[valid * 3..].iter().all(|&v| v == 0.0));
        prop_assert_eq!(h.is_full(), valid == k);
    }
}
