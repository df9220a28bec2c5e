use crate::error::{NumError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

/// Moment estimates for one group of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    params: Vec<ParamId>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        Self { config, step_count: 0, params, first_moment: zeros.clone(), second_moment: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.first_moment[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.second_moment[i]
    }
}

/// One bias-corrected Adam update of every parameter in `state`.
///
/// `grads[i]` belongs to `state.params()[i]`; `None` counts as a zero
/// gradient. A non-finite gradient aborts before anything is modified.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<&Tensor>], state: &mut AdamState) -> Result<()> {
    if grads.len() != state.params.len() {
        return Err(NumError::Invalid {
            op: "adam_step",
            msg: format!("{} gradients for {} parameters", grads.len(), state.params.len()),
        });
    }
    for (&id, g) in state.params.iter().zip(grads) {
        if let Some(g) = g {
            let p = store.get(id);
            if g.shape() != p.shape() {
                return Err(NumError::ShapeMismatch { op: "adam_step", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
            }
            if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(NumError::NonFiniteGradient { name: store.name(id).to_string(), index });
            }
        }
    }
    state.step_count += 1;
    let AdamConfig { learning_rate, beta1, beta2, epsilon } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, (&id, g)) in state.params.iter().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let p = store.get_mut(id).data_mut();
        for j in 0..p.len() {
            let gj = g.map_or(0.0, |g| g.data()[j]);
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= learning_rate * mhat / (vhat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Adam update using the gradients a tape produced for this group.
pub fn adam_step_from(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    let gs: Vec<Option<Tensor>> = state.params.iter().map(|&id| grads.param(id).cloned()).collect();
    let refs: Vec<Option<&Tensor>> = gs.iter().map(Option::as_ref).collect();
    adam_step(store, &refs, state)
}
