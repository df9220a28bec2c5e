use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hib::baselines::VariantKind;
use hib::envs::Tier;
use hib::harness::{
    build_learner, compare, emit_plot, evaluate, export_latents, make_env, probe, run_experiment, EvalReport, ExperimentConfig, PlotKind, RunDir,
    RunOptions,
};
use hib::theory::{theorem1_sweep, theorem2_sweep, write_reports, ModelQ};

#[derive(Parser)]
#[command(name = "hib", about = "Historical information bottleneck agents on a privileged pendulum")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct RunArgs {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (default: $HIB_OUT_DIR or ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<VariantKind>,
    /// Teacher checkpoint for the student variant.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Theorem {
    One,
    Two,
    Both,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one variant and write its run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Warm-start from the latest checkpoint of the run directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on the given tiers.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to the latest checkpoint of the run directory.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = Tier::ALL.to_vec())]
        tiers: Vec<Tier>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Randomized finite-MDP checks of the imitation and privilege-modeling bounds.
    VerifyTheorems {
        #[arg(long, default_value_t = 100)]
        mdps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Theorem::Both)]
        theorem: Theorem,
        /// Also write the reports to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll out a checkpoint and write latents.csv with a PCA projection.
    ExportLatents {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = Tier::Ordinary)]
        tier: Tier,
    },
    /// Render metrics of one or more runs as SVG.
    Plot {
        /// Run directories, parents of run directories, or metrics files.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "curve")]
        kind: PlotKind,
        #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = vec![Tier::Ordinary])]
        tiers: Vec<Tier>,
        /// Output directory for the SVG files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Variant × tier grid of final evaluation returns.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = Tier::ALL.to_vec())]
        tiers: Vec<Tier>,
        #[arg(long)]
        json: bool,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = std::result::Result<ExitCode, Failure>;

fn out_root(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().or_else(|| std::env::var_os("HIB_OUT_DIR").map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"))
}

fn load_config(a: &RunArgs) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) if !p.is_file() => return Err(Failure::Usage(format!("config file {} not found", p.display()))),
        Some(p) => ExperimentConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.variant {
        cfg.variant.kind = v;
    }
    if let Some(t) = &a.teacher {
        cfg.variant.student.teacher_ckpt = Some(t.clone());
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn resolve_ckpt(cfg: &ExperimentConfig, out: &Path, ckpt: &Option<PathBuf>) -> std::result::Result<PathBuf, Failure> {
    match ckpt {
        Some(p) => Ok(p.clone()),
        None => RunDir::new(out.join(cfg.run_id()))
            .latest_ckpt()
            .map(|(_, p)| p)
            .ok_or_else(|| Failure::Runtime(format!("no checkpoint for run {} under {}", cfg.run_id(), out.display()))),
    }
}

fn metrics_files(paths: &[PathBuf]) -> std::result::Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_file() {
            out.push(p.clone());
        } else if RunDir::new(p).metrics().is_file() {
            out.push(RunDir::new(p).metrics());
        } else {
            let mut sub: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| RunDir::new(e.path()).metrics()))
                .filter(|m| m.is_file())
                .collect();
            if sub.is_empty() {
                return Err(Failure::Runtime(format!("no metrics under {}", p.display())));
            }
            sub.sort();
            out.extend(sub);
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Outcome {
    match cli.cmd {
        Cmd::Train { run, resume, quiet } => {
            let cfg = load_config(&run)?;
            let o = run_experiment(&cfg, &out_root(&run.out), RunOptions { resume, verbose: !quiet })?;
            println!("{}", serde_json::to_string(&o.report)?);
            eprintln!("run directory: {}", o.dir.root.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { run, ckpt, tiers, episodes } => {
            let cfg = load_config(&run)?;
            let out = out_root(&run.out);
            let ckpt = resolve_ckpt(&cfg, &out, &ckpt)?;
            let mut env = make_env(&cfg)?;
            let mut agent = build_learner(&cfg, env.as_ref())?;
            agent.store_mut().load(&ckpt)?;
            let n = episodes.unwrap_or(cfg.budget.eval_episodes);
            let mut stats = Vec::new();
            for t in tiers {
                stats.push(evaluate(agent.as_mut(), env.as_mut(), t, n, cfg.env.k, cfg.seed)?);
            }
            let rep = EvalReport { variant: cfg.variant.kind.name().into(), seed: cfg.seed, step: 0, config_hash: cfg.hash(), tiers: stats };
            println!("{}", serde_json::to_string(&rep)?);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::VerifyTheorems { mdps, seed, theorem, out } => {
            let mut reports = Vec::new();
            if matches!(theorem, Theorem::One | Theorem::Both) {
                reports.extend(theorem1_sweep(mdps, seed, &[0.05, 0.1, 0.3])?);
            }
            if matches!(theorem, Theorem::Two | Theorem::Both) {
                reports.extend(theorem2_sweep(mdps, seed, &[0.0, 0.1, 0.5], 2, ModelQ::Literal)?);
            }
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write_reports(&mut lock, &reports)?;
            lock.flush()?;
            if let Some(p) = out {
                if let Some(d) = p.parent() {
                    fs::create_dir_all(d)?;
                }
                write_reports(&mut fs::File::create(&p)?, &reports)?;
            }
            let violations = reports.iter().filter(|r| r.violated).count();
            eprintln!("{} checks, {violations} violations", reports.len());
            Ok(if violations == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Cmd::ExportLatents { run, ckpt, episodes, tier } => {
            let cfg = load_config(&run)?;
            let out = out_root(&run.out);
            let ckpt = resolve_ckpt(&cfg, &out, &ckpt)?;
            let table = export_latents(&cfg, &ckpt, episodes, tier)?;
            let dir = RunDir::new(out.join(cfg.run_id()));
            fs::create_dir_all(&dir.root)?;
            fs::write(dir.latents(), table.to_csv(&cfg.hash()))?;
            eprintln!("wrote {} rows to {}", table.len(), dir.latents().display());
            // Gravity offset is privilege column 1.
            if let Ok(p) = probe(&table, 1, 0.2) {
                println!("{}", serde_json::json!({"probe_target": "delta_g", "r2": p.r2, "pearson": p.pearson, "train_rows": p.train_rows, "test_rows": p.test_rows}));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Plot { runs, kind, tiers, out } => {
            let files = metrics_files(&runs)?;
            let dir = match out {
                Some(d) => d,
                None if files.len() == 1 => files[0].parent().map(|p| p.join("plots")).unwrap_or_else(|| PathBuf::from("plots")),
                None => out_root(&None).join("plots"),
            };
            fs::create_dir_all(&dir)?;
            let kname = match kind {
                PlotKind::Curve => "curve",
                PlotKind::Bar => "bar",
            };
            for t in tiers {
                let svg = emit_plot(&files, kind, t)?;
                let path = dir.join(format!("{kname}-{t}.svg"));
                fs::write(&path, svg)?;
                println!("{}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Compare { runs, tiers, json } => {
            let g = compare(&runs, &tiers)?;
            if json {
                println!("{}", serde_json::to_string(&g)?);
            } else {
                print!("{}", g.to_markdown());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(c) => c,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
