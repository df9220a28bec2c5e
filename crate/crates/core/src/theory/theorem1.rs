use numcore::RngStream;

use super::tabular::{policy_evaluation, tv_distance, value_iteration, Tabular, TabularPolicy, TabularQ};
use super::{BoundReport, Witness, VI_TOL};
use crate::envs::{gen_finite_mdp, FiniteMdp, FiniteMdpSpec};
use crate::error::{invalid, Result};

/// `2γ r_max ε / (1−γ)²`.
pub fn imitation_bound(gamma: f64, r_max: f64, epsilon: f64) -> f64 {
    2.0 * gamma * r_max * epsilon / ((1.0 - gamma) * (1.0 - gamma))
}

/// Largest `|Q* − Q̂|` and where it occurs.
fn sup_gap(a: &TabularQ, b: &TabularQ) -> (f64, usize, usize) {
    let mut best = (0.0, 0, 0);
    for s in 0..a.n_states {
        for k in 0..a.n_actions {
            let d = (a.get(s, k) - b.get(s, k)).abs();
            if d > best.0 {
                best = (d, s, k);
            }
        }
    }
    best
}

/// Checks `sup |Q* − Q^π̂| ≤ 2γ r_max ε / (1−γ)²` for an arbitrary
/// policy, with `ε = sup_s TV(π*(·|s), π̂(·|s))` measured.
pub fn check_general_bound(m: &Tabular, r_max: f64, pi_hat: &TabularPolicy) -> Result<(BoundReport, TabularQ, TabularQ)> {
    let q_star = value_iteration(m, VI_TOL)?;
    let pi_star = q_star.greedy_policy();
    let q_hat = policy_evaluation(m, pi_hat)?;
    let mut eps = 0.0f64;
    for s in 0..m.n_states {
        eps = eps.max(tv_distance(pi_star.row(s), pi_hat.row(s))?);
    }
    let (lhs, s, a) = sup_gap(&q_star, &q_hat);
    let rhs = imitation_bound(m.gamma, r_max, eps);
    Ok((BoundReport::new(m.gamma, eps, lhs, rhs, Witness { state: s, action: a }), q_star, q_hat))
}

/// The local policy used for the bound: mix the privilege-averaged optimal
/// policy with uniform, `π̂(a|l) = (1−ε)·mean_p π*(a|l,p) + ε/|A|`.
pub fn local_policy(mdp: &FiniteMdp, pi_star: &TabularPolicy, epsilon: f64) -> Result<TabularPolicy> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(invalid("mixing weight", format!("{epsilon} outside [0, 1]")));
    }
    let na = mdp.n_actions;
    let mut probs = vec![0.0; mdp.n_states() * na];
    for l in 0..mdp.n_local {
        let mut avg = vec![0.0; na];
        for p in 0..mdp.n_priv {
            for (x, &y) in avg.iter_mut().zip(pi_star.row(mdp.state(l, p))) {
                *x += y / mdp.n_priv as f64;
            }
        }
        let row: Vec<f64> = avg.iter().map(|&x| (1.0 - epsilon) * x + epsilon / na as f64).collect();
        for p in 0..mdp.n_priv {
            let s = mdp.state(l, p);
            probs[s * na..(s + 1) * na].copy_from_slice(&row);
        }
    }
    TabularPolicy::new(mdp.n_states(), na, probs)
}

/// Theorem check for each mixing weight in `grid`.
pub fn verify_theorem1(mdp: &FiniteMdp, grid: &[f64]) -> Result<Vec<BoundReport>> {
    let m = Tabular::from_finite(mdp);
    let pi_star = value_iteration(&m, VI_TOL)?.greedy_policy();
    grid.iter()
        .map(|&e| {
            let pi_hat = local_policy(mdp, &pi_star, e)?;
            let (mut rep, _, _) = check_general_bound(&m, mdp.r_max, &pi_hat)?;
            rep.nominal = e;
            Ok(rep)
        })
        .collect()
}

/// Sizes for the random sweep: `n_local ≤ 5`, `n_priv ≤ 4`,
/// `n_actions ≤ 3`, `γ ∈ {0.8, 0.9, 0.95}`.
pub fn random_spec(rng: &mut RngStream, window: usize) -> FiniteMdpSpec {
    const GAMMAS: [f64; 3] = [0.8, 0.9, 0.95];
    FiniteMdpSpec {
        n_local: 2 + rng.index(4),
        n_priv: 2 + rng.index(3),
        n_actions: 2 + rng.index(2),
        r_max: 1.0,
        gamma: GAMMAS[rng.index(3)],
        sparsity: 0.0,
        window,
        kernel_sparsity: 0.0,
    }
}

pub fn theorem1_sweep(n_mdps: usize, seed: u64, grid: &[f64]) -> Result<Vec<BoundReport>> {
    let root = RngStream::new(seed);
    let mut out = Vec::new();
    for i in 0..n_mdps {
        let mut rng = root.derive_index("theorem1", i as u64);
        let mdp_seed = rng.seed();
        let spec = random_spec(&mut rng, 1);
        let mdp = gen_finite_mdp(&spec, &mut rng)?;
        for mut r in verify_theorem1(&mdp, grid)? {
            r.mdp_seed = mdp_seed;
            out.push(r);
        }
    }
    Ok(out)
}

/// An MDP whose privilege carries no decision-relevant information:
/// `P(l', p' | l, p, a) = T(l' | l, a)·U(p')` and rewards ignore `p`.
pub fn redundant_privilege_mdp(n_local: usize, n_priv: usize, n_actions: usize, gamma: f64, rng: &mut RngStream) -> Result<FiniteMdp> {
    let n = n_local * n_priv;
    let mut transition = vec![0.0; n * n_actions * n];
    let mut reward = vec![0.0; n * n_actions];
    for l in 0..n_local {
        for a in 0..n_actions {
            let t = rng.dirichlet_flat(n_local);
            let r = rng.uniform(0.0, 1.0);
            for p in 0..n_priv {
                let s = l * n_priv + p;
                reward[s * n_actions + a] = r;
                let off = (s * n_actions + a) * n;
                for (l2, &tp) in t.iter().enumerate() {
                    for p2 in 0..n_priv {
                        transition[off + l2 * n_priv + p2] = tp / n_priv as f64;
                    }
                }
            }
        }
    }
    let kernel = vec![1.0 / n_priv as f64; n_local * n_priv];
    FiniteMdp::new(n_local, n_priv, n_actions, 1.0, gamma, 1, transition, reward, kernel)
}
