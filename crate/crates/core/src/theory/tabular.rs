use nalgebra::{DMatrix, DVector};

use crate::envs::FiniteMdp;
use crate::error::{invalid, HibError, Result};

const ROW_TOL: f64 = 1e-12;
/// Actions whose values differ by less than this are treated as tied.
const TIE_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 1_000_000;

/// A finite MDP in plain form: sparse successor lists per (state, action).
#[derive(Clone, Debug)]
pub struct Tabular {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// `[s * n_actions + a]`.
    pub reward: Vec<f64>,
    /// `[s * n_actions + a]` → `(s', prob)` with positive probabilities.
    pub next: Vec<Vec<(usize, f64)>>,
}

impl Tabular {
    pub fn from_finite(mdp: &FiniteMdp) -> Self {
        let (n, na) = (mdp.n_states(), mdp.n_actions);
        let mut next = Vec::with_capacity(n * na);
        for s in 0..n {
            for a in 0..na {
                next.push(mdp.row(s, a).iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(j, &p)| (j, p)).collect());
            }
        }
        Self { n_states: n, n_actions: na, gamma: mdp.gamma, reward: mdp.reward.clone(), next }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_states * self.n_actions;
        if self.reward.len() != m || self.next.len() != m {
            return Err(invalid("tabular MDP", "table sizes do not match"));
        }
        for (i, row) in self.next.iter().enumerate() {
            let s: f64 = row.iter().map(|&(_, p)| p).sum();
            if (s - 1.0).abs() > ROW_TOL || row.iter().any(|&(j, p)| j >= self.n_states || !(p >= 0.0)) {
                return Err(invalid("tabular MDP", format!("successor row {i} is not a distribution")));
            }
        }
        Ok(())
    }

    fn backup(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        let i = s * self.n_actions + a;
        self.reward[i] + self.gamma * self.next[i].iter().map(|&(j, p)| p * v[j]).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularQ {
    pub n_states: usize,
    pub n_actions: usize,
    pub q: Vec<f64>,
}

impl TabularQ {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.q[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn max(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Lowest-index action within `TIE_TOL` of the best.
    pub fn greedy(&self, s: usize) -> usize {
        let m = self.max(s);
        self.row(s).iter().position(|&v| v >= m - TIE_TOL).unwrap_or(0)
    }

    pub fn greedy_policy(&self) -> TabularPolicy {
        let mut probs = vec![0.0; self.q.len()];
        for s in 0..self.n_states {
            probs[s * self.n_actions + self.greedy(s)] = 1.0;
        }
        TabularPolicy { n_states: self.n_states, n_actions: self.n_actions, probs }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions || n_actions == 0 {
            return Err(invalid("tabular policy", "table size does not match"));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
                return Err(invalid("tabular policy", format!("row {s} is not a distribution")));
            }
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

/// `½ Σ |p − q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(invalid("TV distance", format!("lengths {} and {}", p.len(), q.len())));
    }
    for d in [p, q] {
        let s: f64 = d.iter().sum();
        if d.iter().any(|&x| !(x >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(invalid("TV distance", "arguments must be distributions"));
        }
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `Σ p log(p / q)`; infinite when `q` misses mass of `p`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    tv_distance(p, q)?;
    Ok(p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| if b > 0.0 { a * (a / b).ln() } else { f64::INFINITY }).sum())
}

/// Optimal action values: value iteration to a Bellman residual below
/// `tol`, then policy iteration with exact evaluation until the greedy
/// policy is stable.
pub fn value_iteration(m: &Tabular, tol: f64) -> Result<TabularQ> {
    m.validate()?;
    let (n, na) = (m.n_states, m.n_actions);
    let mut v = vec![0.0; n];
    let mut sweeps = 0;
    loop {
        let mut delta = 0.0f64;
        let mut nv = vec![0.0; n];
        for s in 0..n {
            nv[s] = (0..na).map(|a| m.backup(s, a, &v)).fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((nv[s] - v[s]).abs());
        }
        v = nv;
        sweeps += 1;
        if delta < tol {
            break;
        }
        if sweeps >= MAX_SWEEPS {
            return Err(HibError::NoConvergence(sweeps));
        }
    }
    let mut q = q_from_v(m, &v);
    for _ in 0..100 {
        let pi = q.greedy_policy();
        let nq = policy_evaluation(m, &pi)?;
        let stable = (0..n).all(|s| nq.greedy(s) == q.greedy(s));
        q = nq;
        if stable {
            return Ok(q);
        }
    }
    Err(HibError::NoConvergence(sweeps))
}

fn q_from_v(m: &Tabular, v: &[f64]) -> TabularQ {
    let (n, na) = (m.n_states, m.n_actions);
    let q = (0..n * na).map(|i| m.backup(i / na, i % na, v)).collect();
    TabularQ { n_states: n, n_actions: na, q }
}

/// `Q^π` by solving `(I − γ P_π) V = r_π` exactly.
pub fn policy_evaluation(m: &Tabular, pi: &TabularPolicy) -> Result<TabularQ> {
    let (n, na) = (m.n_states, m.n_actions);
    if pi.n_states != n || pi.n_actions != na {
        return Err(invalid("policy evaluation", "policy does not match the MDP"));
    }
    let mut a_mat = DMatrix::<f64>::identity(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..n {
        for (a, &w) in pi.row(s).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let i = s * na + a;
            r[s] += w * m.reward[i];
            for &(j, p) in &m.next[i] {
                a_mat[(s, j)] -= m.gamma * w * p;
            }
        }
    }
    let v = a_mat.lu().solve(&r).ok_or_else(|| invalid("policy evaluation", "singular system"))?;
    Ok(q_from_v(m, v.as_slice()))
}
