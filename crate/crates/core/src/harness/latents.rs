//! Latent export for visual and linear-probe analysis of what the history
//! encoder has learned about the privileged state.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use numcore::RngStream;

use super::config::ExperimentConfig;
use super::eval::eval_episode;
use super::run::{build_learner, make_env};
use crate::agent::Learner;
use crate::envs::{Env, Tier};
use crate::error::{invalid, HibError, Result};

/// Rows of `(z_t, s^p_t)` with a 2-D PCA projection of `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    pub episode: Vec<usize>,
    pub z: Vec<Vec<f64>>,
    pub sp: Vec<Vec<f64>>,
    pub pca: Vec<[f64; 2]>,
}

impl LatentTable {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn d_z(&self) -> usize {
        self.z.first().map_or(0, Vec::len)
    }

    pub fn d_p(&self) -> usize {
        self.sp.first().map_or(0, Vec::len)
    }

    fn from_rows(episode: Vec<usize>, z: Vec<Vec<f64>>, sp: Vec<Vec<f64>>) -> Result<Self> {
        if z.is_empty() {
            return Err(invalid("latent export", "empty rollout"));
        }
        let pca = pca_2d(&z);
        Ok(Self { episode, z, sp, pca })
    }

    /// CSV with header `episode,z_0..,sp_0..,pca_x,pca_y`, preceded by a
    /// `# config_hash=` comment line.
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut s = format!("# config_hash={config_hash}\nepisode");
        for i in 0..self.d_z() {
            write!(s, ",z_{i}").unwrap();
        }
        for i in 0..self.d_p() {
            write!(s, ",sp_{i}").unwrap();
        }
        s.push_str(",pca_x,pca_y\n");
        for r in 0..self.len() {
            write!(s, "{}", self.episode[r]).unwrap();
            for v in self.z[r].iter().chain(&self.sp[r]).chain(&self.pca[r]) {
                // `{:e}` round-trips f64 exactly.
                write!(s, ",{v:e}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let bad = |line: usize, msg: String| HibError::Malformed { path: path.display().to_string(), line, msg };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
        let (hl, header) = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let d_z = cols.iter().filter(|c| c.starts_with("z_")).count();
        let d_p = cols.iter().filter(|c| c.starts_with("sp_")).count();
        if cols.first() != Some(&"episode") || cols.len() != 3 + d_z + d_p {
            return Err(bad(hl + 1, format!("unexpected header `{header}`")));
        }
        let (mut episode, mut z, mut sp, mut pca) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(bad(i + 1, format!("{} fields, expected {}", f.len(), cols.len())));
            }
            episode.push(f[0].parse().map_err(|e| bad(i + 1, format!("episode: {e}")))?);
            let v: Vec<f64> = f[1..].iter().map(|x| x.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| bad(i + 1, e.to_string()))?;
            z.push(v[..d_z].to_vec());
            sp.push(v[d_z..d_z + d_p].to_vec());
            pca.push([v[d_z + d_p], v[d_z + d_p + 1]]);
        }
        Ok(Self { episode, z, sp, pca })
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, d, |i, j| rows[i][j])
}

fn centered(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let mut m = to_matrix(rows);
    for mut c in m.column_iter_mut() {
        let mean = c.mean();
        c.add_scalar_mut(-mean);
    }
    m
}

/// Projection onto the two leading principal axes of the rows. Axis signs
/// are fixed so the largest-magnitude loading is positive; directions with
/// no variance project to zero.
pub fn pca_2d(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    let x = centered(rows);
    let mut out = vec![[0.0; 2]; n];
    if n == 0 || x.ncols() == 0 {
        return out;
    }
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let smax = svd.singular_values.max();
    for k in 0..2.min(v_t.nrows()) {
        let s = svd.singular_values[k];
        if s <= 1e-12 * smax.max(1.0) || s == 0.0 {
            continue;
        }
        let mut axis: DVector<f64> = v_t.row(k).transpose();
        let lead = axis.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            axis.neg_mut();
        }
        let proj = &x * axis;
        for (i, o) in out.iter_mut().enumerate() {
            o[k] = proj[i];
        }
    }
    out
}

fn orthonormal_basis(x: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = x.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > 1e-10 * smax).collect();
    DMatrix::from_fn(x.nrows(), keep.len(), |i, j| u[(i, keep[j])])
}

/// Canonical correlations between the column sets `x` and `y`, descending.
pub fn canonical_correlations(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<Vec<f64>> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("canonical correlation", "need ≥ 2 paired rows"));
    }
    let qx = orthonormal_basis(&centered(x));
    let qy = orthonormal_basis(&centered(y));
    if qx.ncols() == 0 || qy.ncols() == 0 {
        return Ok(Vec::new());
    }
    let m = qx.transpose() * qy;
    let mut s: Vec<f64> = m.singular_values().iter().map(|v| v.min(1.0)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Least-squares fit `y ≈ Xw + b`; returns `(w, b)`.
pub fn fit_linear(x: &[Vec<f64>], y: &[f64]) -> Result<(Vec<f64>, f64)> {
    if x.is_empty() || x.len() != y.len() {
        return Err(invalid("linear probe", "need matching, nonempty rows"));
    }
    let d = x[0].len();
    let a = DMatrix::from_fn(x.len(), d + 1, |i, j| if j < d { x[i][j] } else { 1.0 });
    let b = DVector::from_column_slice(y);
    let sol = a.svd(true, true).solve(&b, 1e-12).map_err(|e| invalid("linear probe", e))?;
    Ok((sol.rows(0, d).iter().copied().collect(), sol[d]))
}

/// Coefficient of determination of `pred` against `y`.
pub fn r_squared(y: &[f64], pred: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Held-out linear probe from `z` to privilege column `target`. The last
/// `holdout` fraction of episodes (by id) is held out, so no episode is on
/// both sides of the split.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub r2: f64,
    pub pearson: f64,
    pub train_rows: usize,
    pub test_rows: usize,
}

pub fn probe(table: &LatentTable, target: usize, holdout: f64) -> Result<ProbeReport> {
    if target >= table.d_p() {
        return Err(invalid("probe target", format!("column {target} of {}", table.d_p())));
    }
    let mut eps: Vec<usize> = table.episode.clone();
    eps.sort_unstable();
    eps.dedup();
    if eps.len() < 2 {
        return Err(invalid("probe", "need at least two episodes"));
    }
    let n_test = ((eps.len() as f64 * holdout).ceil() as usize).clamp(1, eps.len() - 1);
    let first_test = eps[eps.len() - n_test];
    let (mut xtr, mut ytr, mut xte, mut yte) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..table.len() {
        let y = table.sp[i][target];
        if table.episode[i] >= first_test {
            xte.push(table.z[i].clone());
            yte.push(y);
        } else {
            xtr.push(table.z[i].clone());
            ytr.push(y);
        }
    }
    let (w, b) = fit_linear(&xtr, &ytr)?;
    let pred: Vec<f64> = xte.iter().map(|x| x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b).collect();
    Ok(ProbeReport { r2: r_squared(&yte, &pred), pearson: pearson(&yte, &pred), train_rows: xtr.len(), test_rows: xte.len() })
}

/// Rolls out `agent` deterministically and records its latent at every step
/// whose history window is full. The exported privilege is the physical
/// offset vector, before any high-dimensional embedding.
pub fn collect_latents(agent: &mut dyn Learner, env: &mut dyn Env, tier: Tier, episodes: usize, k: usize, seed: u64) -> Result<LatentTable> {
    let (mut ep_ids, mut z, mut sp) = (Vec::new(), Vec::new(), Vec::new());
    for e in 0..episodes {
        let mut rng = RngStream::new(seed).derive("latents").derive_index(tier.name(), e as u64);
        let mut rows = Vec::new();
        eval_episode(agent, env, tier, k, &mut rng, &mut |obs, a| {
            if obs.history.is_full() {
                if let Some(v) = a.latent(obs)? {
                    rows.push(v);
                }
            }
            Ok(())
        })?;
        // The offsets are fixed within an episode.
        let p = env.raw_privilege();
        for v in rows {
            ep_ids.push(e);
            z.push(v);
            sp.push(p.clone());
        }
    }
    LatentTable::from_rows(ep_ids, z, sp)
}

/// Loads `ckpt` into a fresh agent for `cfg` and exports its latents.
pub fn export_latents(cfg: &ExperimentConfig, ckpt: &Path, episodes: usize, tier: Tier) -> Result<LatentTable> {
    let mut env = make_env(cfg)?;
    let mut agent = build_learner(cfg, env.as_ref())?;
    agent.store_mut().load(ckpt)?;
    collect_latents(agent.as_mut(), env.as_mut(), tier, episodes, cfg.env.k, cfg.seed)
}
