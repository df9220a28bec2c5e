use numcore::RngStream;
use serde::{Deserialize, Serialize};

use super::tabular::{tv_distance, value_iteration, Tabular, TabularQ};
use super::theorem1::{imitation_bound, random_spec};
use super::{BoundReport, PrivilegeModel, Witness, VI_TOL};
use crate::envs::{gen_finite_mdp, FiniteMdp};
use crate::error::{invalid, Result};

/// How the value function under the privilege model is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelQ {
    /// The expected-value recursion taken at face value: rewards and
    /// transitions averaged over the true kernel, successors valued through
    /// the model. Its fixed point depends on the window only.
    Literal,
    /// Plan as if the sampled privilege were true: `Q̂(W, p̂, a)` with
    /// `p̂' ~ P̂(· | W')`.
    ModelBased,
}

impl ModelQ {
    pub fn name(self) -> &'static str {
        match self {
            Self::Literal => "literal",
            Self::ModelBased => "model_based",
        }
    }
}

/// Optimal values on the window-augmented state `(W, p)`: the next local
/// state follows the joint table's local marginal and the next privilege
/// is drawn from `kernel(· | W')`.
pub fn window_model(mdp: &FiniteMdp, kernel: &PrivilegeModel) -> Result<Tabular> {
    check_model(mdp, kernel)?;
    let (nw, np, na) = (mdp.n_windows(), mdp.n_priv, mdp.n_actions);
    let mut reward = Vec::with_capacity(nw * np * na);
    let mut next = Vec::with_capacity(nw * np * na);
    for w in 0..nw {
        let l = mdp.window_newest(w);
        for p in 0..np {
            for a in 0..na {
                reward.push(mdp.r(mdp.state(l, p), a));
                let mut row = Vec::new();
                for (l2, &tl) in mdp.local_marginal(l, p, a).iter().enumerate() {
                    if tl == 0.0 {
                        continue;
                    }
                    let w2 = mdp.shift_window(w, l2);
                    for (p2, &k) in kernel.row(w2).iter().enumerate() {
                        if k > 0.0 {
                            row.push((w2 * np + p2, tl * k));
                        }
                    }
                }
                next.push(row);
            }
        }
    }
    Ok(Tabular { n_states: nw * np, n_actions: na, gamma: mdp.gamma, reward, next })
}

/// Window-only MDP under the belief `K(p | W)`.
fn belief_model(mdp: &FiniteMdp) -> Tabular {
    let (nw, np, na) = (mdp.n_windows(), mdp.n_priv, mdp.n_actions);
    let mut reward = Vec::with_capacity(nw * na);
    let mut next = Vec::with_capacity(nw * na);
    for w in 0..nw {
        let l = mdp.window_newest(w);
        let k = mdp.kernel_row(w);
        for a in 0..na {
            let mut r = 0.0;
            let mut t = vec![0.0; mdp.n_local];
            for p in 0..np {
                if k[p] == 0.0 {
                    continue;
                }
                r += k[p] * mdp.r(mdp.state(l, p), a);
                for (x, y) in t.iter_mut().zip(mdp.local_marginal(l, p, a)) {
                    *x += k[p] * y;
                }
            }
            reward.push(r);
            next.push(t.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(l2, &v)| (mdp.shift_window(w, l2), v)).collect());
        }
    }
    Tabular { n_states: nw, n_actions: na, gamma: mdp.gamma, reward, next }
}

fn check_model(mdp: &FiniteMdp, model: &PrivilegeModel) -> Result<()> {
    if model.n_windows != mdp.n_windows() || model.n_priv != mdp.n_priv {
        return Err(invalid("privilege model", "shape does not match the MDP's windows"));
    }
    Ok(())
}

/// `Q̂` on `(W, p̂)` for either construction.
pub fn model_q(mdp: &FiniteMdp, model: &PrivilegeModel, mode: ModelQ) -> Result<TabularQ> {
    check_model(mdp, model)?;
    match mode {
        ModelQ::ModelBased => value_iteration(&window_model(mdp, model)?, VI_TOL),
        ModelQ::Literal => {
            let qw = value_iteration(&belief_model(mdp), VI_TOL)?;
            let (np, na) = (mdp.n_priv, mdp.n_actions);
            let mut q = Vec::with_capacity(mdp.n_windows() * np * na);
            for w in 0..mdp.n_windows() {
                for _ in 0..np {
                    q.extend_from_slice(qw.row(w));
                }
            }
            Ok(TabularQ { n_states: mdp.n_windows() * np, n_actions: na, q })
        }
    }
}

/// `sup_{W, a, p ∈ supp d(W)} |Q(W,p,a) − Σ_p' d(p'|W) Q(W,p',a)|`.
pub fn expectation_gap(q: &TabularQ, d: &PrivilegeModel) -> f64 {
    let np = d.n_priv;
    let mut best = 0.0f64;
    for w in 0..d.n_windows {
        let row = d.row(w);
        for a in 0..q.n_actions {
            let mean: f64 = row.iter().enumerate().map(|(p, &k)| k * q.get(w * np + p, a)).sum();
            for (p, &k) in row.iter().enumerate() {
                if k > 0.0 {
                    best = best.max((q.get(w * np + p, a) - mean).abs());
                }
            }
        }
    }
    best
}

/// Extra fields of a Theorem 2 report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Theorem2Terms {
    pub delta_star: f64,
    pub delta_hat: f64,
}

/// Checks `sup |Q* − Q̂| ≤ Δ_E/(1−γ) + 2γ r_max ε_P̂/(1−γ)²` with
/// `P̂ = (1−η)K + η·uniform`, measuring `ε_P̂` and both `Δ_E` terms.
/// The left side ranges over `p ∈ supp K(W)` and `p̂ ∈ supp P̂(W)`.
pub fn verify_theorem2_eta(mdp: &FiniteMdp, eta: f64, mode: ModelQ) -> Result<(BoundReport, Theorem2Terms)> {
    let truth = PrivilegeModel::from_mdp(mdp);
    let model = truth.perturbed(eta)?;
    let q_star = value_iteration(&window_model(mdp, &truth)?, VI_TOL)?;
    let q_hat = model_q(mdp, &model, mode)?;
    let mut eps = 0.0f64;
    for w in 0..mdp.n_windows() {
        eps = eps.max(tv_distance(truth.row(w), model.row(w))?);
    }
    let delta_star = expectation_gap(&q_star, &truth);
    let delta_hat = expectation_gap(&q_hat, &model);
    let np = mdp.n_priv;
    let (mut lhs, mut witness) = (0.0f64, Witness { state: 0, action: 0 });
    for w in 0..mdp.n_windows() {
        for p in (0..np).filter(|&p| truth.row(w)[p] > 0.0) {
            for ph in (0..np).filter(|&ph| model.row(w)[ph] > 0.0) {
                for a in 0..mdp.n_actions {
                    let d = (q_star.get(w * np + p, a) - q_hat.get(w * np + ph, a)).abs();
                    if d > lhs {
                        lhs = d;
                        witness = Witness { state: w * np + p, action: a };
                    }
                }
            }
        }
    }
    let g = mdp.gamma;
    let rhs = (delta_star + delta_hat) / (1.0 - g) + imitation_bound(g, mdp.r_max, eps);
    let mut rep = BoundReport::new(g, eps, lhs, rhs, witness);
    rep.nominal = eta;
    rep.delta_e = Some(delta_star + delta_hat);
    rep.mode = Some(mode.name());
    Ok((rep, Theorem2Terms { delta_star, delta_hat }))
}

pub fn verify_theorem2(mdp: &FiniteMdp, etas: &[f64], mode: ModelQ) -> Result<Vec<BoundReport>> {
    etas.iter().map(|&e| verify_theorem2_eta(mdp, e, mode).map(|r| r.0)).collect()
}

pub fn theorem2_sweep(n_mdps: usize, seed: u64, etas: &[f64], window: usize, mode: ModelQ) -> Result<Vec<BoundReport>> {
    let root = RngStream::new(seed);
    let mut out = Vec::new();
    for i in 0..n_mdps {
        let mut rng = root.derive_index("theorem2", i as u64);
        let mdp_seed = rng.seed();
        let mut spec = random_spec(&mut rng, window);
        // Keep the augmented state space small: |W| = n_local^window.
        spec.n_local = spec.n_local.min(4);
        let mdp = gen_finite_mdp(&spec, &mut rng)?;
        for mut r in verify_theorem2(&mdp, etas, mode)? {
            r.mdp_seed = mdp_seed;
            out.push(r);
        }
    }
    Ok(out)
}
