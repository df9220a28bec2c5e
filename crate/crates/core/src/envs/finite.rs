//! Tabular MDPs over a factored (local × privileged) state space.
//!
//! States are indexed `s = l * n_priv + p`. The privilege kernel maps a
//! window of the last `window` local states (newest first) to a
//! distribution over privileged values.

use numcore::RngStream;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdpSpec {
    pub n_local: usize,
    pub n_priv: usize,
    pub n_actions: usize,
    pub r_max: f64,
    pub gamma: f64,
    /// 0 keeps full Dirichlet rows, 1 leaves a single successor.
    pub sparsity: f64,
    pub window: usize,
    /// Same as `sparsity`, for the privilege kernel rows.
    pub kernel_sparsity: f64,
}

impl Default for FiniteMdpSpec {
    fn default() -> Self {
        Self { n_local: 4, n_priv: 3, n_actions: 2, r_max: 1.0, gamma: 0.9, sparsity: 0.0, window: 2, kernel_sparsity: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMdp {
    pub n_local: usize,
    pub n_priv: usize,
    pub n_actions: usize,
    pub r_max: f64,
    pub gamma: f64,
    pub window: usize,
    /// `[(s * n_actions + a) * n_states + s']`.
    pub transition: Vec<f64>,
    /// `[s * n_actions + a]`.
    pub reward: Vec<f64>,
    /// `[window_index * n_priv + p]`.
    pub kernel: Vec<f64>,
}

const ROW_TOL: f64 = 1e-12;

fn check_rows(what: &'static str, table: &[f64], width: usize) -> Result<()> {
    for (i, row) in table.chunks(width).enumerate() {
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(invalid(what, format!("row {i} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_TOL {
            return Err(invalid(what, format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

impl FiniteMdp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_local: usize,
        n_priv: usize,
        n_actions: usize,
        r_max: f64,
        gamma: f64,
        window: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        kernel: Vec<f64>,
    ) -> Result<Self> {
        if n_local == 0 || n_priv == 0 || n_actions == 0 || window == 0 {
            return Err(invalid("finite MDP", "sizes and window must be positive"));
        }
        if !(gamma >= 0.0 && gamma < 1.0) {
            return Err(invalid("finite MDP", format!("gamma {gamma} outside [0, 1)")));
        }
        let n = n_local * n_priv;
        let n_windows = n_local.pow(window as u32);
        if transition.len() != n * n_actions * n || reward.len() != n * n_actions || kernel.len() != n_windows * n_priv {
            return Err(invalid("finite MDP", "table sizes do not match the state space"));
        }
        check_rows("transition table", &transition, n)?;
        check_rows("privilege kernel", &kernel, n_priv)?;
        if let Some(r) = reward.iter().find(|&&r| !(0.0..=r_max).contains(&r)) {
            return Err(invalid("finite MDP", format!("reward {r} outside [0, {r_max}]")));
        }
        Ok(Self { n_local, n_priv, n_actions, r_max, gamma, window, transition, reward, kernel })
    }

    pub fn n_states(&self) -> usize {
        self.n_local * self.n_priv
    }

    pub fn n_windows(&self) -> usize {
        self.n_local.pow(self.window as u32)
    }

    pub fn state(&self, l: usize, p: usize) -> usize {
        l * self.n_priv + p
    }

    pub fn split(&self, s: usize) -> (usize, usize) {
        (s / self.n_priv, s % self.n_priv)
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.n_states();
        let off = (s * self.n_actions + a) * n;
        &self.transition[off..off + n]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// Distribution of the next local state, marginalizing the next privilege.
    pub fn local_marginal(&self, l: usize, p: usize, a: usize) -> Vec<f64> {
        let row = self.row(self.state(l, p), a);
        row.chunks(self.n_priv).map(|c| c.iter().sum()).collect()
    }

    /// Newest local state of a window.
    pub fn window_newest(&self, w: usize) -> usize {
        w % self.n_local
    }

    /// Window after observing `l_new`: the oldest entry drops out.
    pub fn shift_window(&self, w: usize, l_new: usize) -> usize {
        let keep = self.n_local.pow(self.window as u32 - 1);
        (w % keep) * self.n_local + l_new
    }

    /// Window index from local states listed newest first.
    pub fn window_index(&self, locals: &[usize]) -> usize {
        assert_eq!(locals.len(), self.window);
        locals.iter().rev().fold(0, |acc, &l| acc * self.n_local + l)
    }

    pub fn kernel_row(&self, w: usize) -> &[f64] {
        &self.kernel[w * self.n_priv..(w + 1) * self.n_priv]
    }
}

/// Dirichlet(1) row, optionally sparsified to its largest entries.
fn sparse_dirichlet(rng: &mut RngStream, n: usize, sparsity: f64) -> Vec<f64> {
    let mut v = rng.dirichlet_flat(n);
    let keep = n - ((sparsity * (n - 1) as f64).floor() as usize).min(n - 1);
    if keep < n {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        for &i in &order[keep..] {
            v[i] = 0.0;
        }
        let s: f64 = v.iter().sum();
        for x in &mut v {
            *x /= s;
        }
    }
    v
}

pub fn gen_finite_mdp(spec: &FiniteMdpSpec, rng: &mut RngStream) -> Result<FiniteMdp> {
    let FiniteMdpSpec { n_local, n_priv, n_actions, r_max, gamma, sparsity, window, kernel_sparsity } = *spec;
    if n_local < 2 || n_priv < 1 || n_actions < 1 || window < 1 {
        return Err(invalid("finite MDP spec", format!("sizes ({n_local}, {n_priv}, {n_actions}, window {window})")));
    }
    if !(0.0..=1.0).contains(&sparsity) || !(0.0..=1.0).contains(&kernel_sparsity) {
        return Err(invalid("finite MDP spec", "sparsity must lie in [0, 1]"));
    }
    if !(r_max > 0.0 && r_max.is_finite()) {
        return Err(invalid("finite MDP spec", format!("r_max {r_max}")));
    }
    let n = n_local * n_priv;
    let mut transition = Vec::with_capacity(n * n_actions * n);
    for _ in 0..n * n_actions {
        transition.extend(sparse_dirichlet(rng, n, sparsity));
    }
    let reward = (0..n * n_actions).map(|_| rng.uniform(0.0, r_max)).collect();
    let n_windows = n_local.pow(window as u32);
    let mut kernel = Vec::with_capacity(n_windows * n_priv);
    for _ in 0..n_windows {
        kernel.extend(sparse_dirichlet(rng, n_priv, kernel_sparsity));
    }
    FiniteMdp::new(n_local, n_priv, n_actions, r_max, gamma, window, transition, reward, kernel)
}
