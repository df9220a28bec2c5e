//! Exact finite-MDP checks of the two value-discrepancy bounds.

mod info;
mod tabular;
mod theorem1;
mod theorem2;

use std::io::Write;

use serde::Serialize;

use crate::envs::FiniteMdp;
use crate::error::{invalid, Result};

pub use info::{empirical_conditional, predictive_likelihood, sample_window_privilege, PredictiveReport, CHAIN_TOL};
pub use tabular::{kl_divergence, policy_evaluation, tv_distance, value_iteration, Tabular, TabularPolicy, TabularQ};
pub use theorem1::{
    check_general_bound, imitation_bound, local_policy, random_spec, redundant_privilege_mdp, theorem1_sweep, verify_theorem1,
};
pub use theorem2::{expectation_gap, model_q, theorem2_sweep, verify_theorem2, verify_theorem2_eta, window_model, ModelQ, Theorem2Terms};

/// Bellman residual at which value iteration hands over to exact policy
/// iteration.
pub const VI_TOL: f64 = 1e-10;

/// Bounds are compared with this much floating-point allowance.
pub const BOUND_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Witness {
    pub state: usize,
    pub action: usize,
}

/// One bound check, serialized as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub mdp_seed: u64,
    pub gamma: f64,
    /// Mixing weight or model perturbation requested.
    pub nominal: f64,
    pub epsilon_measured: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_e: Option<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub violated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<&'static str>,
}

impl BoundReport {
    pub fn new(gamma: f64, epsilon: f64, lhs: f64, rhs: f64, at: Witness) -> Self {
        let violated = lhs > rhs + BOUND_TOL;
        Self {
            mdp_seed: 0,
            gamma,
            nominal: 0.0,
            epsilon_measured: epsilon,
            delta_e: None,
            lhs,
            rhs,
            slack: rhs - lhs,
            violated,
            witness: violated.then_some(at),
            mode: None,
        }
    }
}

pub fn write_reports<W: Write>(mut out: W, reports: &[BoundReport]) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Median of the slack column.
pub fn median_slack(reports: &[BoundReport]) -> Option<f64> {
    let mut s: Vec<f64> = reports.iter().map(|r| r.slack).collect();
    if s.is_empty() {
        return None;
    }
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 0 { 0.5 * (s[m - 1] + s[m]) } else { s[m] })
}

/// Table `P̂(s^p | window)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivilegeModel {
    pub n_windows: usize,
    pub n_priv: usize,
    pub table: Vec<f64>,
}

impl PrivilegeModel {
    pub fn new(n_windows: usize, n_priv: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != n_windows * n_priv || n_priv == 0 {
            return Err(invalid("privilege model", "table size does not match"));
        }
        for (w, row) in table.chunks(n_priv).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&x| !(x >= 0.0)) || (s - 1.0).abs() > 1e-12 {
                return Err(invalid("privilege model", format!("row {w} is not a distribution")));
            }
        }
        Ok(Self { n_windows, n_priv, table })
    }

    /// The MDP's true kernel.
    pub fn from_mdp(mdp: &FiniteMdp) -> Self {
        Self { n_windows: mdp.n_windows(), n_priv: mdp.n_priv, table: mdp.kernel.clone() }
    }

    pub fn row(&self, w: usize) -> &[f64] {
        &self.table[w * self.n_priv..(w + 1) * self.n_priv]
    }

    /// `(1−η)·P + η·uniform`.
    pub fn perturbed(&self, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(invalid("perturbation", format!("η = {eta} outside [0, 1]")));
        }
        let u = 1.0 / self.n_priv as f64;
        let table = if eta == 0.0 { self.table.clone() } else { self.table.iter().map(|&x| (1.0 - eta) * x + eta * u).collect() };
        Self::new(self.n_windows, self.n_priv, table)
    }
}
