use numcore::RngStream;
use serde::{Deserialize, Serialize};

use crate::agent::{History, Learner, Observation};
use crate::envs::{Env, Tier};
use crate::error::Result;

/// Returns on one tier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierStats {
    pub tier: Tier,
    pub mean: f64,
    /// Population standard deviation (divides by N).
    pub std: f64,
    pub returns: Vec<f64>,
}

impl TierStats {
    pub fn from_returns(tier: Tier, returns: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&returns);
        Self { tier, mean, std, returns }
    }
}

pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub step: u64,
    pub config_hash: String,
    pub tiers: Vec<TierStats>,
}

impl EvalReport {
    pub fn tier(&self, t: Tier) -> Option<&TierStats> {
        self.tiers.iter().find(|s| s.tier == t)
    }
}

/// One deterministic episode. `on_step` sees the observation before each
/// action; nothing is written to any training buffer.
pub fn eval_episode(
    agent: &mut dyn Learner,
    env: &mut dyn Env,
    tier: Tier,
    k: usize,
    env_rng: &mut RngStream,
    on_step: &mut dyn FnMut(&Observation<'_>, &dyn Learner) -> Result<()>,
) -> Result<f64> {
    let mut s = env.reset(tier, env_rng)?;
    let mut hist = History::new(k, env.local_dim(), env.action_dim());
    hist.reset(&s.local)?;
    // Deterministic acting never draws from this stream.
    let mut act_rng = env_rng.derive("act");
    let mut ret = 0.0;
    for _ in 0..env.max_steps() {
        let obs = Observation { local: &s.local, privileged: &s.privileged, history: &hist };
        on_step(&obs, agent)?;
        let a = agent.act(&obs, false, &mut act_rng)?;
        let step = env.step(&a)?;
        ret += step.reward;
        hist.push(&a, &step.state.local)?;
        s = step.state;
        if step.truncated {
            break;
        }
    }
    Ok(ret)
}

/// Episode `i` of `tier` always starts from the same environment stream,
/// whichever agent is evaluated.
pub fn eval_stream(seed: u64, tier: Tier, episode: usize) -> RngStream {
    RngStream::new(seed).derive("eval").derive_index(tier.name(), episode as u64)
}

pub fn evaluate(agent: &mut dyn Learner, env: &mut dyn Env, tier: Tier, episodes: usize, k: usize, seed: u64) -> Result<TierStats> {
    let mut returns = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let mut rng = eval_stream(seed, tier, i);
        returns.push(eval_episode(agent, env, tier, k, &mut rng, &mut |_, _| Ok(()))?);
    }
    Ok(TierStats::from_returns(tier, returns))
}
