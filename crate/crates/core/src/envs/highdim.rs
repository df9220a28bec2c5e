//! Wraps an environment so that its privileged state becomes a noisy,
//! high-dimensional affine embedding of the original offsets.

use numcore::RngStream;

use super::{Env, OracleState, Step, Tier};
use crate::error::{invalid, Result};

#[derive(Clone, Debug)]
pub struct HighDimPrivilege<E> {
    inner: E,
    d_p: usize,
    /// Row-major `[d_p, base_dim]`.
    matrix: Vec<f64>,
    offset: Vec<f64>,
    sigma: f64,
    /// Observation noise of the current episode.
    noise: Vec<f64>,
    noise_rng: RngStream,
}

impl<E: Env> HighDimPrivilege<E> {
    /// The embedding is drawn from `rng` once and fixed thereafter. Noise is
    /// redrawn at every reset so that the privilege stays episode-constant.
    pub fn new(inner: E, d_p: usize, sigma: f64, rng: &mut RngStream) -> Result<Self> {
        let base = inner.priv_dim();
        if d_p <= base {
            return Err(invalid("privilege dimension", format!("d_p = {d_p} must exceed base privilege dimension {base}")));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(invalid("noise scale", format!("{sigma}")));
        }
        let scale = 1.0 / (base as f64).sqrt();
        let matrix = rng.normals(d_p * base).into_iter().map(|v| v * scale).collect();
        let offset = rng.normals(d_p).into_iter().map(|v| 0.1 * v).collect();
        let noise_rng = rng.derive("highdim-noise");
        Ok(Self { inner, d_p, matrix, offset, sigma, noise: vec![0.0; d_p], noise_rng })
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn base_dim(&self) -> usize {
        self.inner.priv_dim()
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn embed(&self, base: &[f64]) -> Vec<f64> {
        let b = self.base_dim();
        (0..self.d_p)
            .map(|i| {
                let row = &self.matrix[i * b..(i + 1) * b];
                row.iter().zip(base).map(|(a, x)| a * x).sum::<f64>() + self.offset[i] + self.noise[i]
            })
            .collect()
    }

    fn wrap(&self, s: OracleState) -> OracleState {
        OracleState { privileged: self.embed(&s.privileged), local: s.local }
    }
}

impl<E: Env> Env for HighDimPrivilege<E> {
    fn local_dim(&self) -> usize {
        self.inner.local_dim()
    }

    fn priv_dim(&self) -> usize {
        self.d_p
    }

    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }

    fn action_bounds(&self) -> (f64, f64) {
        self.inner.action_bounds()
    }

    fn max_steps(&self) -> usize {
        self.inner.max_steps()
    }

    fn reset(&mut self, tier: Tier, rng: &mut RngStream) -> Result<OracleState> {
        let s = self.inner.reset(tier, rng)?;
        let sigma = self.sigma;
        self.noise = (0..self.d_p).map(|_| sigma * self.noise_rng.normal()).collect();
        Ok(self.wrap(s))
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        let st = self.inner.step(action)?;
        Ok(Step { state: self.wrap(st.state), ..st })
    }

    fn raw_privilege(&self) -> Vec<f64> {
        self.inner.raw_privilege()
    }
}
