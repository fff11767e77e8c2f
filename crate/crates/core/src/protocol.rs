//! Slot-level policies and the greedy/testing-phase episode runner.

use serde::{Deserialize, Serialize};

use crate::env::{window_goodputs, Action, Env, EnvState, SimConfig, SlotResult};
use crate::error::{Error, Result};
use crate::npm::NpmParams;
use crate::rng::SeedStream;

/// Goodput samples are averaged over windows of this many TTIs.
pub const GOODPUT_WINDOW: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    Npm,
    Tpm,
    T2npm,
    T3npm,
    SAloha,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 5] = [
        ProtocolKind::Npm,
        ProtocolKind::Tpm,
        ProtocolKind::T2npm,
        ProtocolKind::T3npm,
        ProtocolKind::SAloha,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolKind::Npm => "npm",
            ProtocolKind::Tpm => "tpm",
            ProtocolKind::T2npm => "t2npm",
            ProtocolKind::T3npm => "t3npm",
            ProtocolKind::SAloha => "s-aloha",
        }
    }
}

impl std::fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol {s:?}")))
    }
}

/// One episode of a run. `protocol` is the engine that produced the
/// testing-phase goodput (for the hybrid protocol it changes at the switch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub protocol: ProtocolKind,
    pub goodput: f64,
    pub loss: Option<f64>,
    pub epsilon: Option<f64>,
    pub switched: bool,
}

pub trait SlotPolicy {
    fn act(&mut self, state: &EnvState) -> Result<Vec<Action>>;

    /// Called after the channel resolves; may touch the environment.
    fn after_slot(&mut self, _env: &mut Env, _result: &SlotResult) {}

    /// Slots where the policy had to fall back (e.g. teacher transport failure).
    fn flagged_slots(&self) -> usize {
        0
    }
}

/// Greedy (epsilon = 0) NPM policy.
pub struct GreedyNpm<'a> {
    pub params: &'a NpmParams,
}

impl SlotPolicy for GreedyNpm<'_> {
    fn act(&mut self, state: &EnvState) -> Result<Vec<Action>> {
        self.params.greedy_actions(state)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub success: Vec<bool>,
    pub flagged: usize,
}

impl EpisodeTrace {
    /// Mean of the 12-TTI window goodputs (plain ratio if the episode is
    /// shorter than a window or not a multiple of it).
    pub fn goodput(&self) -> f64 {
        window_mean_goodput(&self.success)
    }

    pub fn window_goodputs(&self) -> Vec<f64> {
        window_goodputs(&self.success, GOODPUT_WINDOW)
    }
}

pub fn window_mean_goodput(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    if flags.len() % GOODPUT_WINDOW == 0 {
        let w = window_goodputs(flags, GOODPUT_WINDOW);
        w.iter().sum::<f64>() / w.len() as f64
    } else {
        flags.iter().filter(|&&c| c).count() as f64 / flags.len() as f64
    }
}

/// Runs `policy` for `ttis` slots on a fresh environment whose arrival and
/// erasure draws come from `(label, episode)` sub-streams.
pub fn run_policy_episode(
    policy: &mut dyn SlotPolicy,
    cfg: &SimConfig,
    ttis: usize,
    streams: &SeedStream,
    label: &str,
    episode: u64,
) -> Result<EpisodeTrace> {
    let mut env = Env::new(cfg.clone())?;
    let mut arrivals = streams.indexed(&format!("{label}/arrivals"), episode);
    let mut erasures = streams.indexed(&format!("{label}/erasures"), episode);
    let mut success = Vec::with_capacity(ttis);
    let before = policy.flagged_slots();
    for _ in 0..ttis {
        env.step_arrivals(&mut arrivals);
        let state = env.state();
        let actions = policy.act(&state)?;
        if actions.len() != cfg.num_ues {
            return Err(Error::Dimension(format!(
                "policy produced {} actions for {} UEs",
                actions.len(),
                cfg.num_ues
            )));
        }
        let result = env.apply_actions(&actions, &mut erasures)?;
        policy.after_slot(&mut env, &result);
        success.push(result.success);
    }
    Ok(EpisodeTrace {
        success,
        flagged: policy.flagged_slots() - before,
    })
}
