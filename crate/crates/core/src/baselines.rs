//! Comparison agents and ablations: variant selection, the Dropper keep
//! schedule and the two-stage Student.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use numcore::{adam_step_from, AdamConfig, AdamState, ParamStore, RngStream, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::agent::{History, IbBuffer, Learner, LossRecord, Observation, ReplayBuffer};
use crate::envs::{Env, Tier};
use crate::harness::{run_experiment, ExperimentConfig, RunOptions};
use crate::error::{check_dim, invalid, HibError, Result};
use crate::hib::HibVariant;
use crate::nets::{GaussianActor, TcnConfig, TcnEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Teacher,
    Student,
    Dropper,
    Dr,
    Hib,
    HibWoIb,
    HibWoRl,
    HibWoProj,
    HibContra,
}

impl VariantKind {
    pub const ALL: [VariantKind; 9] = [
        Self::Teacher,
        Self::Student,
        Self::Dropper,
        Self::Dr,
        Self::Hib,
        Self::HibWoIb,
        Self::HibWoRl,
        Self::HibWoProj,
        Self::HibContra,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Teacher => "teacher",
            Self::Student => "student",
            Self::Dropper => "dropper",
            Self::Dr => "dr",
            Self::Hib => "hib",
            Self::HibWoIb => "hib_wo_ib",
            Self::HibWoRl => "hib_wo_rl",
            Self::HibWoProj => "hib_wo_proj",
            Self::HibContra => "hib_contra",
        }
    }

    /// Label used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Self::Teacher => "Teacher",
            Self::Student => "Student",
            Self::Dropper => "Dropper",
            Self::Dr => "SAC-DR",
            Self::Hib => "HIB",
            Self::HibWoIb => "HIB-w/o-ib",
            Self::HibWoRl => "HIB-w/o-rl",
            Self::HibWoProj => "HIB-w/o-proj",
            Self::HibContra => "HIB-contra",
        }
    }

    pub fn is_hib(self) -> bool {
        matches!(self, Self::Hib | Self::HibWoIb | Self::HibWoRl | Self::HibWoProj | Self::HibContra)
    }

    pub fn is_ablation(self) -> bool {
        self.is_hib() && self != Self::Hib
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = HibError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL.into_iter().find(|k| k.name() == key).ok_or_else(|| HibError::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropperConfig {
    /// Environment steps over which the keep probability falls from 1 to 0.
    /// `None` never decays; unset in a config file means half the budget.
    pub decay_steps: Option<u64>,
    /// Explicitly disables decay (Teacher-equivalent).
    pub never_decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub teacher_ckpt: Option<PathBuf>,
    /// Teacher episodes collected per round.
    pub episodes: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    /// Extra collection rounds in which the student drives with
    /// probability `1 − beta^round` while the teacher labels.
    pub dagger_rounds: usize,
    pub dagger_beta: f64,
    /// Sanity configuration: the student also sees `s^p`.
    pub sees_privilege: bool,
    /// Tier used to collect imitation data.
    pub tier: Tier,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            teacher_ckpt: None,
            episodes: 20,
            epochs: 20,
            minibatch: 64,
            lr: 1e-3,
            dagger_rounds: 0,
            dagger_beta: 0.5,
            sees_privilege: false,
            tier: Tier::Ordinary,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContraConfig {
    pub temperature: f64,
    /// In-batch negatives per positive; `None` uses the whole IB batch.
    pub negatives: Option<usize>,
}

impl Default for ContraConfig {
    fn default() -> Self {
        Self { temperature: 0.1, negatives: None }
    }
}

/// One variant plus the knobs that only it reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantSpec {
    pub kind: VariantKind,
    pub dropper: DropperConfig,
    pub student: StudentConfig,
    pub contra: ContraConfig,
}

impl Default for VariantSpec {
    fn default() -> Self {
        Self::of(VariantKind::Hib)
    }
}

impl VariantSpec {
    pub fn of(kind: VariantKind) -> Self {
        Self { kind, dropper: DropperConfig::default(), student: StudentConfig::default(), contra: ContraConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == VariantKind::Student && self.student.teacher_ckpt.is_none() {
            return Err(invalid("variant.student.teacher_ckpt", "a student needs a teacher checkpoint"));
        }
        if self.kind == VariantKind::HibContra && !(self.contra.temperature > 0.0) {
            return Err(invalid("variant.contra.temperature", "must be positive"));
        }
        if self.kind == VariantKind::Student {
            let s = &self.student;
            if s.minibatch == 0 || !(s.lr > 0.0) || !(0.0..=1.0).contains(&s.dagger_beta) {
                return Err(invalid("variant.student", "minibatch and lr must be positive, dagger_beta in [0, 1]"));
            }
        }
        Ok(())
    }

    /// The HIB update variant, or `None` for non-HIB agents.
    pub fn hib_variant(&self) -> Option<HibVariant> {
        Some(match self.kind {
            VariantKind::Hib => HibVariant::Full,
            VariantKind::HibWoIb => HibVariant::WoIb,
            VariantKind::HibWoRl => HibVariant::WoRl,
            VariantKind::HibWoProj => HibVariant::WoProj,
            VariantKind::HibContra => HibVariant::Contra { temperature: self.contra.temperature, negatives: self.contra.negatives },
            _ => return None,
        })
    }

    pub fn dropper_schedule(&self, budget: u64) -> DropperSchedule {
        let decay = if self.dropper.never_decay { None } else { Some(self.dropper.decay_steps.unwrap_or(budget / 2)) };
        DropperSchedule::new(decay)
    }
}

/// Keep probability for privileged entries: linear from 1 to 0 over
/// `decay_steps`, then 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DropperSchedule {
    decay_steps: Option<u64>,
    step: u64,
}

impl DropperSchedule {
    pub fn new(decay_steps: Option<u64>) -> Self {
        Self { decay_steps, step: 0 }
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn keep_prob(&self) -> f64 {
        match self.decay_steps {
            None => 1.0,
            Some(0) => 0.0,
            Some(n) => (1.0 - self.step as f64 / n as f64).clamp(0.0, 1.0),
        }
    }
}

/// One imitation example: what the student sees and the teacher's action.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentSample {
    pub local: Vec<f64>,
    pub privileged: Vec<f64>,
    pub history: Vec<f64>,
    pub target: Vec<f64>,
}

/// Imitation policy `π̂(a | s^l, f_ψ(h))` with the same TCN encoder as HIB.
pub struct Student {
    pub store: ParamStore,
    pub encoder: TcnEncoder,
    pub head: GaussianActor,
    sees_privilege: bool,
    d_l: usize,
    d_p: usize,
    opt: AdamState,
}

impl Student {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tcn: &TcnConfig,
        k: usize,
        d_l: usize,
        d_p: usize,
        d_a: usize,
        d_z: usize,
        hidden: usize,
        bounds: (f64, f64),
        sees_privilege: bool,
        lr: f64,
        rng: &RngStream,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let init = rng.derive("init");
        let encoder = TcnEncoder::new(&mut store, "psi", k, d_l + d_a, d_z, tcn, &mut init.derive("psi"))?;
        let in_dim = d_l + d_z + if sees_privilege { d_p } else { 0 };
        let head = GaussianActor::new(&mut store, "actor", in_dim, d_a, hidden, bounds, &mut init.derive("actor"))?;
        let mut ids = encoder.ids();
        ids.extend(head.ids());
        let opt = AdamState::new(AdamConfig::with_lr(lr), &store, ids);
        Ok(Self { store, encoder, head, sees_privilege, d_l, d_p, opt })
    }

    fn forward(&self, t: &mut Tape, local: Tensor, privileged: Tensor, history: Tensor, frozen: bool) -> Result<Var> {
        let h = t.constant(history);
        let lat = self.encoder.encode(t, &self.store, h, None, frozen)?;
        let l = t.constant(local);
        let mut parts = vec![l, lat.mean];
        if self.sees_privilege {
            parts.push(t.constant(privileged));
        }
        let obs = t.concat(&parts)?;
        self.head.deterministic(t, &self.store, obs, frozen)
    }

    fn stack(samples: &[&StudentSample]) -> Result<[Tensor; 4]> {
        let rows = |f: &dyn Fn(&StudentSample) -> &Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_rows(&samples.iter().map(|s| f(s).clone()).collect::<Vec<_>>())?)
        };
        Ok([rows(&|s| &s.local)?, rows(&|s| &s.privileged)?, rows(&|s| &s.history)?, rows(&|s| &s.target)?])
    }

    /// Mean squared error to the teacher actions on `samples`.
    pub fn imitation_loss(&self, samples: &[&StudentSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(invalid("imitation batch", "empty"));
        }
        let [l, p, h, y] = Self::stack(samples)?;
        let mut t = Tape::new();
        let a = self.forward(&mut t, l, p, h, true)?;
        let y = t.constant(y);
        let m = t.mse(a, y)?;
        Ok(t.value(m).item())
    }

    /// One pass over `data` in shuffled minibatches; returns the mean loss.
    pub fn train_epoch(&mut self, data: &[StudentSample], minibatch: usize, rng: &mut RngStream) -> Result<f64> {
        if data.is_empty() {
            return Err(invalid("imitation data", "empty"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.index(i + 1));
        }
        let (mut total, mut n) = (0.0, 0usize);
        for chunk in order.chunks(minibatch.max(1)) {
            let batch: Vec<&StudentSample> = chunk.iter().map(|&i| &data[i]).collect();
            let [l, p, h, y] = Self::stack(&batch)?;
            let mut t = Tape::new();
            let a = self.forward(&mut t, l, p, h, false)?;
            let y = t.constant(y);
            let m = t.mse(a, y)?;
            total += t.value(m).item() * batch.len() as f64;
            n += batch.len();
            let g = t.backward(m)?;
            adam_step_from(&mut self.store, &g, &mut self.opt)?;
        }
        Ok(total / n as f64)
    }

    pub fn action(&self, local: &[f64], privileged: &[f64], history: &[f64]) -> Result<Vec<f64>> {
        check_dim("local state", self.d_l, local.len())?;
        check_dim("history", self.encoder.input_len(), history.len())?;
        let p = if self.sees_privilege {
            check_dim("privileged state", self.d_p, privileged.len())?;
            privileged.to_vec()
        } else {
            Vec::new()
        };
        let mut t = Tape::new();
        let a = self.forward(
            &mut t,
            Tensor::matrix(1, local.len(), local.to_vec())?,
            Tensor::matrix(1, p.len(), p)?,
            Tensor::matrix(1, history.len(), history.to_vec())?,
            true,
        )?;
        Ok(t.value(a).data().to_vec())
    }
}

impl Learner for Student {
    fn act(&mut self, obs: &Observation<'_>, _explore: bool, _rng: &mut RngStream) -> Result<Vec<f64>> {
        self.action(obs.local, obs.privileged, obs.history.data())
    }

    /// The student learns by imitation only.
    fn update(&mut self, _replay: &ReplayBuffer, _ib: &IbBuffer, _rng: &mut RngStream) -> Result<LossRecord> {
        Ok(LossRecord::default())
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn latent(&self, obs: &Observation<'_>) -> Result<Option<Vec<f64>>> {
        let mut t = Tape::new();
        let h = t.constant(Tensor::matrix(1, self.encoder.input_len(), obs.history.data().to_vec())?);
        let lat = self.encoder.encode(&mut t, &self.store, h, None, true)?;
        Ok(Some(t.value(lat.mean).data().to_vec()))
    }

    fn policy_input_dim(&self) -> usize {
        self.head.obs_dim()
    }
}

/// Rolls out episodes in which the teacher labels every visited state.
/// The student drives each step with probability `student_prob`.
#[allow(clippy::too_many_arguments)]
pub fn collect_imitation(
    env: &mut dyn Env,
    teacher: &mut dyn Learner,
    student: Option<&Student>,
    student_prob: f64,
    episodes: usize,
    tier: Tier,
    k: usize,
    rng: &mut RngStream,
) -> Result<Vec<StudentSample>> {
    let mut out = Vec::new();
    let mut hist = History::new(k, env.local_dim(), env.action_dim());
    for _ in 0..episodes {
        let mut s = env.reset(tier, rng)?;
        hist.reset(&s.local)?;
        for _ in 0..env.max_steps() {
            let obs = Observation { local: &s.local, privileged: &s.privileged, history: &hist };
            let target = teacher.act(&obs, false, rng)?;
            let action = match student {
                Some(st) if rng.bernoulli(student_prob) => st.action(&s.local, &s.privileged, hist.data())?,
                _ => target.clone(),
            };
            out.push(StudentSample { local: s.local.clone(), privileged: s.privileged.clone(), history: hist.data().to_vec(), target });
            let step = env.step(&action)?;
            hist.push(&action, &step.state.local)?;
            s = step.state;
            if step.truncated {
                break;
            }
        }
    }
    Ok(out)
}

fn run_kind(cfg: &ExperimentConfig, kind: VariantKind, out: &Path) -> Result<PathBuf> {
    let c = cfg.with_variant(kind);
    let o = run_experiment(&c, out, RunOptions::default())?;
    let (_, ckpt) = o.dir.latest_ckpt().ok_or_else(|| invalid("run", "no checkpoint written"))?;
    Ok(ckpt)
}

/// SAC on `[s^l ‖ s^p]`. Returns the final checkpoint.
pub fn run_teacher(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    run_kind(cfg, VariantKind::Teacher, out)
}

/// Imitation of the teacher stored at `teacher_ckpt`, which is only read.
pub fn run_student(cfg: &ExperimentConfig, teacher_ckpt: &Path, out: &Path) -> Result<PathBuf> {
    let mut c = cfg.clone();
    c.variant.student.teacher_ckpt = Some(teacher_ckpt.to_path_buf());
    run_kind(&c, VariantKind::Student, out)
}

pub fn run_dropper(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    run_kind(cfg, VariantKind::Dropper, out)
}

pub fn run_dr(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    run_kind(cfg, VariantKind::Dr, out)
}

pub fn run_ablation(cfg: &ExperimentConfig, kind: VariantKind, out: &Path) -> Result<PathBuf> {
    if !kind.is_ablation() {
        return Err(HibError::UnknownVariant(format!("{kind} is not an ablation")));
    }
    run_kind(cfg, kind, out)
}
