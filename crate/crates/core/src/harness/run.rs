use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use numcore::RngStream;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::eval::{evaluate, EvalReport, TierStats};
use crate::agent::{push_step, Dims, History, IbBuffer, Learner, LossRecord, Observation, PrivilegeInput, ReplayBuffer, SacAgent, Transition};
use crate::baselines::{collect_imitation, Student, VariantKind};
use crate::envs::{Env, HighDimPrivilege, Pendulum, Tier};
use crate::error::{invalid, HibError, Result};
use crate::hib::HibAgent;

pub const CKPT_EXT: &str = "hibckpt";

pub fn make_env(cfg: &ExperimentConfig) -> Result<Box<dyn Env>> {
    let p = Pendulum::new(cfg.env.range.clone(), cfg.env.episode_len, cfg.env.max_speed)?;
    Ok(match &cfg.env.highdim {
        None => Box::new(p),
        Some(h) => Box::new(HighDimPrivilege::new(p, h.d_p, h.sigma, &mut RngStream::new(cfg.seed).derive("highdim"))?),
    })
}

/// A freshly initialized agent for the configured variant.
pub fn build_learner(cfg: &ExperimentConfig, env: &dyn Env) -> Result<Box<dyn Learner>> {
    let (d_l, d_p, d_a) = (env.local_dim(), env.priv_dim(), env.action_dim());
    let bounds = env.action_bounds();
    let rng = RngStream::new(cfg.seed).derive("agent");
    let v = &cfg.variant;
    Ok(match v.kind {
        VariantKind::Teacher => Box::new(SacAgent::new(cfg.sac.clone(), PrivilegeInput::Full, d_l, d_p, d_a, bounds, &rng)?),
        VariantKind::Dr => Box::new(SacAgent::new(cfg.sac.clone(), PrivilegeInput::Hidden, d_l, d_p, d_a, bounds, &rng)?),
        VariantKind::Dropper => {
            let sched = v.dropper_schedule(cfg.budget.env_steps);
            Box::new(SacAgent::new(cfg.sac.clone(), PrivilegeInput::Dropper(sched), d_l, d_p, d_a, bounds, &rng)?)
        }
        VariantKind::Student => Box::new(build_student(cfg, env)?),
        _ => {
            let hv = v.hib_variant().expect("HIB kinds map to a HIB variant");
            Box::new(HibAgent::new(cfg.hib.clone(), cfg.sac.clone(), hv, cfg.env.k, d_l, d_p, d_a, bounds, &rng)?)
        }
    })
}

pub fn build_student(cfg: &ExperimentConfig, env: &dyn Env) -> Result<Student> {
    let sc = &cfg.variant.student;
    Student::new(
        &cfg.hib.tcn,
        cfg.env.k,
        env.local_dim(),
        env.priv_dim(),
        env.action_dim(),
        cfg.hib.latent_dim(env.priv_dim()),
        cfg.sac.hidden,
        env.action_bounds(),
        sc.sees_privilege,
        sc.lr,
        &RngStream::new(cfg.seed).derive("agent"),
    )
}

/// Paths inside one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.snapshot")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn ckpt_dir(&self) -> PathBuf {
        self.root.join("ckpt")
    }

    pub fn ckpt(&self, step: u64) -> PathBuf {
        self.ckpt_dir().join(format!("step-{step:08}.{CKPT_EXT}"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn final_report(&self) -> PathBuf {
        self.reports().join("final.jsonl")
    }

    pub fn latents(&self) -> PathBuf {
        self.root.join("latents.csv")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    /// Latest checkpoint and its step.
    pub fn latest_ckpt(&self) -> Option<(u64, PathBuf)> {
        let rd = fs::read_dir(self.ckpt_dir()).ok()?;
        rd.filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let step = name.strip_prefix("step-")?.strip_suffix(&format!(".{CKPT_EXT}"))?.parse().ok()?;
                Some((step, e.path()))
            })
            .max_by_key(|(s, _)| *s)
    }

    pub fn read_final_report(&self) -> Result<EvalReport> {
        let text = fs::read_to_string(self.final_report())?;
        let line = text.lines().last().ok_or_else(|| HibError::Malformed {
            path: self.final_report().display().to_string(),
            line: 1,
            msg: "empty report".into(),
        })?;
        Ok(serde_json::from_str(line)?)
    }
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    kind: &'static str,
    step: u64,
    config_hash: &'a str,
    episodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    episode_return: Option<f64>,
    #[serde(flatten)]
    loss: &'a LossRecord,
}

#[derive(Serialize)]
struct TierSummary {
    tier: Tier,
    mean: f64,
    std: f64,
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    kind: &'static str,
    step: u64,
    config_hash: &'a str,
    tiers: Vec<TierSummary>,
}

#[derive(Serialize)]
struct ImitationRecord<'a> {
    kind: &'static str,
    step: u64,
    config_hash: &'a str,
    round: usize,
    epoch: usize,
    loss: f64,
}

struct Metrics {
    out: BufWriter<File>,
}

impl Metrics {
    /// Opens the metrics stream. When resuming from `keep_until`, records
    /// past that step (written after the last checkpoint) are dropped.
    fn open(path: &Path, keep_until: Option<u64>) -> Result<Self> {
        let kept = match keep_until {
            Some(step) if path.is_file() => {
                let text = fs::read_to_string(path)?;
                let mut kept = String::new();
                for (i, line) in text.lines().enumerate() {
                    let v: serde_json::Value = serde_json::from_str(line)
                        .map_err(|e| HibError::Malformed { path: path.display().to_string(), line: i + 1, msg: e.to_string() })?;
                    if v.get("step").and_then(|s| s.as_u64()).is_some_and(|s| s <= step) {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
                kept
            }
            _ => String::new(),
        };
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(kept.as_bytes())?;
        Ok(Self { out })
    }

    fn write<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    run_id: String,
    variant: &'a crate::baselines::VariantSpec,
    seed: u64,
    config_hash: String,
    created_unix: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    resumed_from: Option<u64>,
    final_step: u64,
    files: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Warm-start from the latest checkpoint in the run directory.
    pub resume: bool,
    /// Print progress to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: RunDir,
    pub report: EvalReport,
}

fn eval_all(cfg: &ExperimentConfig, agent: &mut dyn Learner, env: &mut dyn Env, step: u64) -> Result<EvalReport> {
    let mut tiers = Vec::new();
    for t in Tier::ALL {
        tiers.push(evaluate(agent, env, t, cfg.budget.eval_episodes, cfg.env.k, cfg.seed)?);
    }
    Ok(EvalReport { variant: cfg.variant.kind.name().to_string(), seed: cfg.seed, step, config_hash: cfg.hash(), tiers })
}

fn eval_record<'a>(r: &EvalReport, hash: &'a str) -> EvalRecord<'a> {
    EvalRecord {
        kind: "eval",
        step: r.step,
        config_hash: hash,
        tiers: r.tiers.iter().map(|t: &TierStats| TierSummary { tier: t.tier, mean: t.mean, std: t.std }).collect(),
    }
}

/// Runs the configured variant under `out_root/<run-id>` and returns the
/// final evaluation.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path, opts: RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = RunDir::new(out_root.join(cfg.run_id()));
    fs::create_dir_all(dir.ckpt_dir())?;
    fs::create_dir_all(dir.reports())?;
    fs::write(dir.config(), format!("# config_hash={}\n{}", cfg.hash(), cfg.to_toml()))?;
    let mut env = make_env(cfg)?;
    // The imitation stage is short and always starts over.
    let resume = if opts.resume && cfg.variant.kind != VariantKind::Student { dir.latest_ckpt() } else { None };
    if resume.is_none() {
        fs::remove_dir_all(dir.ckpt_dir())?;
        fs::create_dir_all(dir.ckpt_dir())?;
    }
    let start = resume.as_ref().map(|r| r.0).unwrap_or(0);
    let mut metrics = Metrics::open(&dir.metrics(), resume.as_ref().map(|r| r.0))?;
    let report = if cfg.variant.kind == VariantKind::Student {
        run_student_stage(cfg, &dir, env.as_mut(), &mut metrics)?
    } else {
        let mut agent = build_learner(cfg, env.as_ref())?;
        if let Some((_, path)) = &resume {
            agent.store_mut().load(path)?;
        }
        train_rl(cfg, &dir, agent.as_mut(), env.as_mut(), &mut metrics, start, opts.verbose)?
    };
    metrics.out.flush()?;
    let mut rf = File::create(dir.final_report())?;
    serde_json::to_writer(&mut rf, &report)?;
    rf.write_all(b"\n")?;
    write_manifest(cfg, &dir, resume.map(|r| r.0), report.step)?;
    Ok(RunOutcome { dir, report })
}

fn write_manifest(cfg: &ExperimentConfig, dir: &RunDir, resumed_from: Option<u64>, final_step: u64) -> Result<()> {
    let mut files = vec!["config.snapshot".to_string(), "metrics.jsonl".to_string(), "reports/final.jsonl".to_string()];
    let mut ckpts: Vec<String> = fs::read_dir(dir.ckpt_dir())?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .map(|n| format!("ckpt/{n}"))
        .collect();
    ckpts.sort();
    files.extend(ckpts);
    let m = Manifest {
        run_id: cfg.run_id(),
        variant: &cfg.variant,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        resumed_from,
        final_step,
        files,
    };
    fs::write(dir.manifest(), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn checkpoint(agent: &dyn Learner, dir: &RunDir, step: u64) -> Result<()> {
    agent.store().save(&dir.ckpt(step))?;
    Ok(())
}

fn train_rl(
    cfg: &ExperimentConfig,
    dir: &RunDir,
    agent: &mut dyn Learner,
    env: &mut dyn Env,
    metrics: &mut Metrics,
    start: u64,
    verbose: bool,
) -> Result<EvalReport> {
    let hash = cfg.hash();
    let budget = cfg.budget.env_steps;
    let root = if start == 0 { RngStream::new(cfg.seed) } else { RngStream::new(cfg.seed).derive_index("resume", start) };
    let (mut env_rng, mut act_rng, mut upd_rng) = (root.derive("env"), root.derive("act"), root.derive("update"));
    let dims = Dims { local: env.local_dim(), privileged: env.priv_dim(), action: env.action_dim(), k: cfg.env.k };
    let mut replay = ReplayBuffer::new(cfg.sac.replay_capacity, dims);
    let mut ib = IbBuffer::new(cfg.sac.replay_capacity, dims);
    let mut hist = History::new(cfg.env.k, dims.local, dims.action);
    let (lo, hi) = env.action_bounds();

    let mut last = if start == 0 {
        let r = eval_all(cfg, agent, env, 0)?;
        metrics.write(&eval_record(&r, &hash))?;
        checkpoint(agent, dir, 0)?;
        r
    } else {
        eval_all(cfg, agent, env, start)?
    };

    let mut state = None;
    let mut ep_ret = 0.0;
    let mut finished: Vec<f64> = Vec::new();
    let mut loss = LossRecord::default();
    for step in start..budget {
        let s = match state.take() {
            Some(s) => s,
            None => {
                let s = env.reset(cfg.env.train_tier, &mut env_rng)?;
                hist.reset(&s.local)?;
                ep_ret = 0.0;
                s
            }
        };
        agent.set_env_step(step);
        let action = if step < cfg.sac.warmup_steps {
            (0..dims.action).map(|_| act_rng.uniform(lo, hi)).collect()
        } else {
            let obs = Observation { local: &s.local, privileged: &s.privileged, history: &hist };
            agent.act(&obs, true, &mut act_rng)?
        };
        let out = env.step(&action)?;
        ep_ret += out.reward;
        let t = Transition {
            local: s.local,
            privileged: s.privileged,
            action: action.clone(),
            reward: out.reward,
            next_local: out.state.local.clone(),
            next_privileged: out.state.privileged.clone(),
            history: Arc::from(hist.data()),
            history_full: hist.is_full(),
            terminal: false,
        };
        push_step(&mut replay, &mut ib, t)?;
        hist.push(&action, &out.state.local)?;
        if out.truncated {
            finished.push(ep_ret);
        } else {
            state = Some(out.state);
        }
        if step + 1 >= cfg.sac.warmup_steps {
            for _ in 0..cfg.sac.updates_per_step {
                loss = agent.update(&replay, &ib, &mut upd_rng)?;
            }
        }
        let done = step + 1;
        if done % cfg.budget.metrics_interval == 0 {
            let rec = TrainRecord {
                kind: "train",
                step: done,
                config_hash: &hash,
                episodes: finished.len(),
                episode_return: (!finished.is_empty()).then(|| finished.iter().sum::<f64>() / finished.len() as f64),
                loss: &loss,
            };
            metrics.write(&rec)?;
            finished.clear();
        }
        if done % cfg.budget.eval_interval == 0 || done == budget {
            last = eval_all(cfg, agent, env, done)?;
            metrics.write(&eval_record(&last, &hash))?;
            checkpoint(agent, dir, done)?;
            if verbose {
                let m: Vec<String> = last.tiers.iter().map(|t| format!("{} {:.1}", t.tier, t.mean)).collect();
                eprintln!("[{}] step {done}: {}", cfg.run_id(), m.join(", "));
            }
        }
    }
    Ok(last)
}

/// Loads a teacher for imitation. The checkpoint is only read.
pub fn load_teacher(cfg: &ExperimentConfig, env: &dyn Env) -> Result<SacAgent> {
    let path = cfg.variant.student.teacher_ckpt.as_ref().ok_or_else(|| invalid("student", "no teacher checkpoint configured"))?;
    if !path.is_file() {
        return Err(invalid("teacher checkpoint", format!("{} does not exist", path.display())));
    }
    let t_cfg = cfg.with_variant(VariantKind::Teacher);
    let rng = RngStream::new(t_cfg.seed).derive("agent");
    let (d_l, d_p, d_a) = (env.local_dim(), env.priv_dim(), env.action_dim());
    let mut teacher = SacAgent::new(t_cfg.sac.clone(), PrivilegeInput::Full, d_l, d_p, d_a, env.action_bounds(), &rng)?;
    teacher.store.load(path)?;
    Ok(teacher)
}

fn run_student_stage(cfg: &ExperimentConfig, dir: &RunDir, env: &mut dyn Env, metrics: &mut Metrics) -> Result<EvalReport> {
    let hash = cfg.hash();
    let mut teacher = load_teacher(cfg, env)?;
    let sc = &cfg.variant.student;
    let mut student = build_student(cfg, env)?;
    let r0 = eval_all(cfg, &mut student, env, 0)?;
    metrics.write(&eval_record(&r0, &hash))?;
    checkpoint(&student, dir, 0)?;
    let root = RngStream::new(cfg.seed);
    let (mut col_rng, mut fit_rng) = (root.derive("student-collect"), root.derive("student-fit"));
    let mut data = Vec::new();
    for round in 0..=sc.dagger_rounds {
        let p_student = if round == 0 { 0.0 } else { 1.0 - sc.dagger_beta.powi(round as i32) };
        let more = collect_imitation(env, &mut teacher, (round > 0).then_some(&student), p_student, sc.episodes, sc.tier, cfg.env.k, &mut col_rng)?;
        data.extend(more);
        for epoch in 0..sc.epochs {
            let loss = student.train_epoch(&data, sc.minibatch, &mut fit_rng)?;
            metrics.write(&ImitationRecord { kind: "imitation", step: data.len() as u64, config_hash: &hash, round, epoch, loss })?;
        }
    }
    let step = data.len() as u64;
    let report = eval_all(cfg, &mut student, env, step)?;
    metrics.write(&eval_record(&report, &hash))?;
    checkpoint(&student, dir, step)?;
    Ok(report)
}
