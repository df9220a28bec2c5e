use numcore::RngStream;
use serde::Serialize;

use super::PrivilegeModel;
use crate::envs::FiniteMdp;
use crate::error::{invalid, Result};

/// Empirical predictive quantities on `(window, privilege)` pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PredictiveReport {
    /// Mean `log P̂(s^p | window)`.
    pub i_pred: f64,
    /// Plug-in `Ĥ(S^p)`.
    pub entropy: f64,
    /// Plug-in `Î(S^p; window)`.
    pub mutual_info: f64,
    /// `i_pred + Ĥ(S^p) ≤ Î + 1e-6`.
    pub chain_holds: bool,
    pub n: usize,
}

pub const CHAIN_TOL: f64 = 1e-6;

fn counts(data: &[(usize, usize)], n_windows: usize, n_priv: usize) -> Result<Vec<f64>> {
    let mut c = vec![0.0; n_windows * n_priv];
    for &(w, p) in data {
        if w >= n_windows || p >= n_priv {
            return Err(invalid("predictive data", format!("pair ({w}, {p}) out of range")));
        }
        c[w * n_priv + p] += 1.0;
    }
    Ok(c)
}

/// The empirical conditional `count(w, p) / count(w)`; unseen windows get
/// the uniform row.
pub fn empirical_conditional(data: &[(usize, usize)], n_windows: usize, n_priv: usize) -> Result<PrivilegeModel> {
    let c = counts(data, n_windows, n_priv)?;
    let mut table = Vec::with_capacity(c.len());
    for row in c.chunks(n_priv) {
        let s: f64 = row.iter().sum();
        if s == 0.0 {
            table.extend(std::iter::repeat(1.0 / n_priv as f64).take(n_priv));
        } else {
            table.extend(row.iter().map(|&x| x / s));
        }
    }
    PrivilegeModel::new(n_windows, n_priv, table)
}

pub fn predictive_likelihood(model: &PrivilegeModel, data: &[(usize, usize)]) -> Result<PredictiveReport> {
    if data.is_empty() {
        return Err(invalid("predictive data", "empty"));
    }
    let (nw, np) = (model.n_windows, model.n_priv);
    let c = counts(data, nw, np)?;
    let n = data.len() as f64;
    let mut i_pred = 0.0;
    for &(w, p) in data {
        let q = model.row(w)[p];
        if q <= 0.0 {
            return Err(invalid("privilege model", format!("zero probability for observed pair ({w}, {p})")));
        }
        i_pred += q.ln();
    }
    i_pred /= n;
    let mut pw = vec![0.0; nw];
    let mut pp = vec![0.0; np];
    for w in 0..nw {
        for p in 0..np {
            pw[w] += c[w * np + p] / n;
            pp[p] += c[w * np + p] / n;
        }
    }
    let entropy = -pp.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
    let mut mi = 0.0;
    for w in 0..nw {
        for p in 0..np {
            let j = c[w * np + p] / n;
            if j > 0.0 {
                mi += j * (j / (pw[w] * pp[p])).ln();
            }
        }
    }
    Ok(PredictiveReport { i_pred, entropy, mutual_info: mi, chain_holds: i_pred + entropy <= mi + CHAIN_TOL, n: data.len() })
}

/// `(window, privilege)` pairs from rollouts of the window causal model
/// under uniformly random actions.
pub fn sample_window_privilege(mdp: &FiniteMdp, n: usize, rng: &mut RngStream) -> Vec<(usize, usize)> {
    let draw = |rng: &mut RngStream, probs: &[f64]| {
        let u = rng.unit();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    };
    let mut w = rng.index(mdp.n_windows());
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let p = draw(rng, mdp.kernel_row(w));
        out.push((w, p));
        let a = rng.index(mdp.n_actions);
        let l2 = draw(rng, &mdp.local_marginal(mdp.window_newest(w), p, a));
        w = mdp.shift_window(w, l2);
    }
    out
}
