#![allow(dead_code)]

pub mod hib_fixture;

use numcore::gradcheck::{finite_difference, relative_error};
use numcore::{ParamId, ParamStore, RngStream, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Worst relative error, over `ids`, between the tape gradient of `build`
/// and central differences of its value.
pub fn param_grad_error(store: &ParamStore, ids: &[ParamId], build: &dyn Fn(&mut Tape, &ParamStore) -> Var) -> f64 {
    surrogate_grad_error(store, ids, &|t, s| {
        let v = build(t, s);
        (v, v)
    })
}

/// Like [`param_grad_error`], but the tape gradient is taken of the first
/// output and the differences of the second. Under a stop-gradient the two
/// differ in value and agree in gradient.
pub fn surrogate_grad_error(store: &ParamStore, ids: &[ParamId], build: &dyn Fn(&mut Tape, &ParamStore) -> (Var, Var)) -> f64 {
    let mut t = Tape::new();
    let (l, _) = build(&mut t, store);
    let g = t.backward(l).unwrap();
    let mut worst = 0.0f64;
    for &id in ids {
        let analytic = g.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let fd = finite_difference(
            |x| {
                let mut s = store.clone();
                *s.get_mut(id) = x.clone();
                let mut t = Tape::new();
                let (_, l) = build(&mut t, &s);
                t.value(l).item()
            },
            store.get(id),
            FD_STEP,
        );
        worst = worst.max(relative_error(&analytic, &fd, 1e-8));
    }
    worst
}

/// Central-difference gradient of a scalar function of one input tensor,
/// compared against the tape gradient with respect to that input.
pub fn input_grad_error(x: &Tensor, build: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut t = Tape::new();
    let v = t.leaf(x.clone());
    let l = build(&mut t, v);
    let g = t.backward(l).unwrap();
    let fd = finite_difference(
        |x| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let l = build(&mut t, v);
            t.value(l).item()
        },
        x,
        FD_STEP,
    );
    relative_error(g.wrt(v).unwrap(), &fd, 1e-8)
}

pub fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), rng.normals(shape.iter().product())).unwrap()
}

/// A run small enough for a unit test: short episodes, tiny networks.
pub fn tiny_config(kind: hib::baselines::VariantKind, steps: u64) -> hib::harness::ExperimentConfig {
    let mut cfg = hib::harness::ExperimentConfig::default().with_variant(kind);
    cfg.env.episode_len = 40;
    cfg.env.k = 20;
    cfg.sac.hidden = 8;
    cfg.sac.batch_size = 8;
    cfg.sac.warmup_steps = 50;
    cfg.hib.projector_hidden = 8;
    cfg.hib.tcn = hib::nets::TcnConfig { channels: vec![4, 4, 4], kernel: 3, stride: 2, hidden: 8 };
    cfg.budget.env_steps = steps;
    cfg.budget.eval_interval = steps.max(1);
    cfg.budget.eval_episodes = 2;
    cfg.budget.metrics_interval = 20;
    cfg.variant.student.episodes = 2;
    cfg.variant.student.epochs = 2;
    cfg
}
