//! Deterministic SVG charts from metrics files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::Tier;
use crate::error::{invalid, HibError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// Evaluation return against environment steps.
    Curve,
    /// Final evaluation return per series.
    Bar,
}

impl std::str::FromStr for PlotKind {
    type Err = HibError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curve" => Ok(Self::Curve),
            "bar" => Ok(Self::Bar),
            other => Err(invalid("plot kind", format!("`{other}` (expected curve or bar)"))),
        }
    }
}

/// Evaluation points `(step, mean return)` of one metrics file at one tier.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSeries {
    pub label: String,
    pub config_hash: Option<String>,
    pub points: Vec<(u64, f64)>,
}

/// Series label for a metrics file: the variant part of its run id
/// (`<variant>-s<seed>-<hash>`), or the directory name.
pub fn series_label(path: &Path) -> String {
    let dir = path.parent().and_then(|p| p.file_name()).and_then(|n| n.to_str()).unwrap_or("run");
    match dir.rsplitn(3, '-').collect::<Vec<_>>().as_slice() {
        [_, seed, variant] if seed.starts_with('s') => variant.to_string(),
        _ => dir.to_string(),
    }
}

pub fn read_eval_series(path: &Path, tier: Tier) -> Result<EvalSeries> {
    let text = fs::read_to_string(path)?;
    let bad = |line: usize, msg: String| HibError::Malformed { path: path.display().to_string(), line, msg };
    let mut points = Vec::new();
    let mut config_hash = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(i + 1, e.to_string()))?;
        if v.get("kind").and_then(|k| k.as_str()) != Some("eval") {
            continue;
        }
        let step = v.get("step").and_then(|s| s.as_u64()).ok_or_else(|| bad(i + 1, "eval record without step".into()))?;
        let tiers = v.get("tiers").and_then(|t| t.as_array()).ok_or_else(|| bad(i + 1, "eval record without tiers".into()))?;
        let mean = tiers
            .iter()
            .find(|t| t.get("tier").and_then(|n| n.as_str()) == Some(tier.name()))
            .and_then(|t| t.get("mean"))
            .and_then(|m| m.as_f64())
            .ok_or_else(|| bad(i + 1, format!("no mean for tier {tier}")))?;
        if config_hash.is_none() {
            config_hash = v.get("config_hash").and_then(|h| h.as_str()).map(String::from);
        }
        points.push((step, mean));
    }
    Ok(EvalSeries { label: series_label(path), config_hash, points })
}

/// Mean, min and max across the series of one label at each step.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub label: String,
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub seeds: usize,
}

pub fn bands(series: &[EvalSeries]) -> Vec<Band> {
    let mut by_label: BTreeMap<&str, Vec<&EvalSeries>> = BTreeMap::new();
    for s in series {
        by_label.entry(&s.label).or_default().push(s);
    }
    by_label
        .into_iter()
        .map(|(label, group)| {
            let mut at: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for s in &group {
                for &(x, y) in &s.points {
                    at.entry(x).or_default().push(y);
                }
            }
            let mut b = Band { label: label.to_string(), steps: vec![], mean: vec![], min: vec![], max: vec![], seeds: group.len() };
            for (x, ys) in at {
                b.steps.push(x);
                b.mean.push(ys.iter().sum::<f64>() / ys.len() as f64);
                b.min.push(ys.iter().copied().fold(f64::INFINITY, f64::min));
                b.max.push(ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
            b
        })
        .collect()
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 9] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 0.5, x0 + 0.5) };
        let pad = ((y1 - y0).abs() * 0.05).max(1e-9);
        let (y0, y1) = if y1 > y0 { (y0 - pad, y1 + pad) } else { (y0 - 1.0, y0 + 1.0) };
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        W / 2.0,
        esc(title)
    )
}

fn axes(s: &mut String, f: &Frame, xlabel: &str, xticks: bool) {
    let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    writeln!(s, "<path d=\"M{l:.2},{t:.2}V{b:.2}H{r:.2}\" fill=\"none\" stroke=\"black\"/>").unwrap();
    for i in 0..=4 {
        let v = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let y = f.py(v);
        writeln!(s, "<path d=\"M{:.2},{y:.2}H{l:.2}\" stroke=\"black\"/><text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.1}</text>", l - 4.0, l - 6.0, y + 4.0).unwrap();
        if xticks {
            let xv = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
            let x = f.px(xv);
            writeln!(s, "<path d=\"M{x:.2},{b:.2}V{:.2}\" stroke=\"black\"/><text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{xv:.0}</text>", b + 4.0, b + 16.0).unwrap();
        }
    }
    writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", (l + r) / 2.0, H - 12.0, esc(xlabel)).unwrap();
    writeln!(s, "<text transform=\"translate(16,{:.2}) rotate(-90)\" text-anchor=\"middle\">return</text>", (t + b) / 2.0).unwrap();
}

fn legend(s: &mut String, labels: &[(String, usize)]) {
    for (i, (label, seeds)) in labels.iter().enumerate() {
        let y = TOP + 14.0 + 18.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let c = COLORS[i % COLORS.len()];
        writeln!(s, "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"12\" height=\"12\" fill=\"{c}\"/><text x=\"{:.2}\" y=\"{y:.2}\">{} (n={seeds})</text>", y - 10.0, x + 16.0, esc(label)).unwrap();
    }
}

/// Line chart: one mean line per label with a min/max band across seeds.
/// A series with a single point is drawn as a marker.
pub fn curve_svg(bands: &[Band], title: &str) -> Result<String> {
    let all = || bands.iter().flat_map(|b| b.steps.iter().map(|&x| x as f64));
    if all().next().is_none() {
        return Err(invalid("plot", "no evaluation points"));
    }
    let ys = || bands.iter().flat_map(|b| b.min.iter().chain(&b.max).copied());
    let f = Frame::new(
        all().fold(f64::INFINITY, f64::min),
        all().fold(f64::NEG_INFINITY, f64::max),
        ys().fold(f64::INFINITY, f64::min),
        ys().fold(f64::NEG_INFINITY, f64::max),
    );
    let mut s = header(title);
    axes(&mut s, &f, "environment steps", true);
    for (i, b) in bands.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        if b.steps.len() == 1 {
            writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{c}\"/>", f.px(b.steps[0] as f64), f.py(b.mean[0])).unwrap();
            continue;
        }
        if b.seeds > 1 {
            let mut d = String::new();
            for (j, &x) in b.steps.iter().enumerate() {
                write!(d, "{}{:.2},{:.2}", if j == 0 { "M" } else { "L" }, f.px(x as f64), f.py(b.max[j])).unwrap();
            }
            for (j, &x) in b.steps.iter().enumerate().rev() {
                write!(d, "L{:.2},{:.2}", f.px(x as f64), f.py(b.min[j])).unwrap();
            }
            writeln!(s, "<path class=\"band\" d=\"{d}Z\" fill=\"{c}\" fill-opacity=\"0.2\" stroke=\"none\"/>").unwrap();
        }
        let mut d = String::new();
        for (j, &x) in b.steps.iter().enumerate() {
            write!(d, "{}{:.2},{:.2}", if j == 0 { "M" } else { "L" }, f.px(x as f64), f.py(b.mean[j])).unwrap();
        }
        writeln!(s, "<path class=\"mean\" d=\"{d}\" fill=\"none\" stroke=\"{c}\" stroke-width=\"2\"/>").unwrap();
    }
    legend(&mut s, &bands.iter().map(|b| (b.label.clone(), b.seeds)).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    Ok(s)
}

/// Bar chart of the last evaluation per label with a min/max whisker.
pub fn bar_svg(bands: &[Band], title: &str) -> Result<String> {
    let last: Vec<(f64, f64, f64)> = bands
        .iter()
        .filter_map(|b| b.mean.last().map(|&m| (m, *b.min.last().unwrap(), *b.max.last().unwrap())))
        .collect();
    if last.is_empty() {
        return Err(invalid("plot", "no evaluation points"));
    }
    let lo = last.iter().map(|v| v.1).fold(0.0f64, f64::min);
    let hi = last.iter().map(|v| v.2).fold(0.0f64, f64::max);
    let f = Frame::new(0.0, last.len() as f64, lo, hi);
    let mut s = header(title);
    axes(&mut s, &f, "variant", false);
    let zero = f.py(0.0);
    for (i, &(m, mn, mx)) in last.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let (x0, x1) = (f.px(i as f64 + 0.15), f.px(i as f64 + 0.85));
        let y = f.py(m);
        writeln!(s, "<rect x=\"{x0:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{c}\"/>", y.min(zero), x1 - x0, (y - zero).abs()).unwrap();
        if bands[i].seeds > 1 {
            let xc = (x0 + x1) / 2.0;
            writeln!(s, "<path class=\"band\" d=\"M{xc:.2},{:.2}V{:.2}\" stroke=\"black\"/>", f.py(mn), f.py(mx)).unwrap();
        }
    }
    legend(&mut s, &bands.iter().map(|b| (b.label.clone(), b.seeds)).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    Ok(s)
}

/// Reads every metrics file and renders one chart.
pub fn emit_plot(metrics: &[PathBuf], kind: PlotKind, tier: Tier) -> Result<String> {
    if metrics.is_empty() {
        return Err(invalid("plot", "no metrics files"));
    }
    let series = metrics.iter().map(|p| read_eval_series(p, tier)).collect::<Result<Vec<_>>>()?;
    let b = bands(&series);
    let title = format!("evaluation return ({tier})");
    let svg = match kind {
        PlotKind::Curve => curve_svg(&b, &title)?,
        PlotKind::Bar => bar_svg(&b, &title)?,
    };
    let hashes: Vec<&str> = series.iter().filter_map(|s| s.config_hash.as_deref()).collect();
    Ok(svg.replacen("\n", &format!("\n<!-- config_hash={} -->\n", hashes.join(",")), 1))
}
