//! Variant × tier grid of final evaluation returns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::eval::{mean_std, EvalReport};
use super::run::RunDir;
use crate::baselines::VariantKind;
use crate::envs::Tier;
use crate::error::{invalid, Result};

/// Column order of the grid.
pub const COLUMN_ORDER: [VariantKind; 9] = [
    VariantKind::Teacher,
    VariantKind::Hib,
    VariantKind::Dr,
    VariantKind::Student,
    VariantKind::Dropper,
    VariantKind::HibWoIb,
    VariantKind::HibWoRl,
    VariantKind::HibWoProj,
    VariantKind::HibContra,
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub mean: f64,
    /// Population standard deviation over the pooled episodes of all seeds.
    pub std: f64,
    pub episodes: usize,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Grid {
    pub tiers: Vec<Tier>,
    pub variants: Vec<VariantKind>,
    /// `cells[row][col]`, rows are tiers, columns are variants.
    pub cells: Vec<Vec<Cell>>,
    pub config_hashes: Vec<String>,
}

impl Grid {
    pub fn shape(&self) -> (usize, usize) {
        (self.tiers.len(), self.variants.len())
    }

    pub fn cell(&self, tier: Tier, variant: VariantKind) -> Option<&Cell> {
        let r = self.tiers.iter().position(|&t| t == tier)?;
        let c = self.variants.iter().position(|&v| v == variant)?;
        Some(&self.cells[r][c])
    }

    /// Markdown table with `mean ± std` cells.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| tier |");
        for v in &self.variants {
            write!(s, " {} |", v.display_name()).unwrap();
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.variants.len()));
        s.push('\n');
        for (r, t) in self.tiers.iter().enumerate() {
            write!(s, "| {t} |").unwrap();
            for c in &self.cells[r] {
                write!(s, " {:.2} ± {:.2} |", c.mean, c.std).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Run directories under `path`: itself if it holds a final report,
/// otherwise its immediate subdirectories that do.
pub fn discover_runs(path: &Path) -> Result<Vec<PathBuf>> {
    if RunDir::new(path).final_report().is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| RunDir::new(p).final_report().is_file())
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(invalid("compare", format!("no finished runs under {}", path.display())));
    }
    Ok(out)
}

pub fn compare(runs: &[PathBuf], tiers: &[Tier]) -> Result<Grid> {
    if runs.is_empty() || tiers.is_empty() {
        return Err(invalid("compare", "need at least one run and one tier"));
    }
    let mut dirs = Vec::new();
    for r in runs {
        dirs.extend(discover_runs(r)?);
    }
    let mut reports: BTreeMap<VariantKind, Vec<EvalReport>> = BTreeMap::new();
    for d in &dirs {
        let rep = RunDir::new(d).read_final_report()?;
        let kind: VariantKind = rep.variant.parse()?;
        reports.entry(kind).or_default().push(rep);
    }
    let variants: Vec<VariantKind> = COLUMN_ORDER.iter().copied().filter(|k| reports.contains_key(k)).collect();
    let mut cells = Vec::new();
    for &t in tiers {
        let mut row = Vec::new();
        for v in &variants {
            let reps = &reports[v];
            let mut pooled = Vec::new();
            for rep in reps {
                let ts = rep.tier(t).ok_or_else(|| invalid("compare", format!("run {} seed {} has no {t} evaluation", rep.variant, rep.seed)))?;
                pooled.extend_from_slice(&ts.returns);
            }
            let (mean, std) = mean_std(&pooled);
            row.push(Cell { mean, std, episodes: pooled.len(), seeds: reps.len() });
        }
        cells.push(row);
    }
    let mut config_hashes: Vec<String> = reports.values().flatten().map(|r| r.config_hash.clone()).collect();
    config_hashes.sort();
    config_hashes.dedup();
    Ok(Grid { tiers: tiers.to_vec(), variants, cells, config_hashes })
}
