use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::SAlohaConfig;
use crate::distill::DistillConfig;
use crate::env::{bler_from_snr, RewardConfig, SimConfig};
use crate::error::{Error, Result};
use crate::metrics::TargetGrid;
use crate::npm::NetworkShape;
use crate::switch::SwitchConfig;
use crate::teacher::{ChatClientConfig, ScriptedOracle};
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Channel parameters shared by every UE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvParams {
    pub num_ues: usize,
    pub arrival_prob: f64,
    pub buffer_cap: usize,
    pub erasure_prob: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            num_ues: 2,
            arrival_prob: 0.3,
            buffer_cap: 3,
            erasure_prob: 0.01,
        }
    }
}

impl EnvParams {
    pub fn sim(&self, tti_per_episode: usize, seed: u64) -> SimConfig {
        SimConfig::uniform(
            self.num_ues,
            self.arrival_prob,
            self.buffer_cap,
            self.erasure_prob,
            tti_per_episode,
            seed,
        )
    }
}

/// Fields changed by the environmental shift. `snr_db` sets the erasure
/// probability through the logistic BLER curve and conflicts with
/// `erasure_prob`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftDelta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_ues: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arrival_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buffer_cap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub erasure_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
}

impl ShiftDelta {
    pub fn num_ues(l: usize) -> Self {
        Self {
            num_ues: Some(l),
            ..Default::default()
        }
    }

    pub fn apply(&self, pre: &EnvParams, bler: &BlerCurve) -> Result<EnvParams> {
        if self.erasure_prob.is_some() && self.snr_db.is_some() {
            return Err(Error::Config("shift sets both erasure_prob and snr_db".into()));
        }
        let mut post = *pre;
        if let Some(l) = self.num_ues {
            post.num_ues = l;
        }
        if let Some(p) = self.arrival_prob {
            post.arrival_prob = p;
        }
        if let Some(b) = self.buffer_cap {
            post.buffer_cap = b;
        }
        if let Some(p) = self.erasure_prob {
            post.erasure_prob = p;
        }
        if let Some(snr) = self.snr_db {
            post.erasure_prob = bler_from_snr(snr, bler.midpoint_db, bler.slope);
        }
        Ok(post)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(l) = self.num_ues {
            parts.push(format!("L={l}"));
        }
        if let Some(p) = self.arrival_prob {
            parts.push(format!("p_a={p}"));
        }
        if let Some(b) = self.buffer_cap {
            parts.push(format!("b_max={b}"));
        }
        if let Some(p) = self.erasure_prob {
            parts.push(format!("p_e={p}"));
        }
        if let Some(s) = self.snr_db {
            parts.push(format!("snr={s}dB"));
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(",")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlerCurve {
    pub midpoint_db: f64,
    pub slope: f64,
}

impl Default for BlerCurve {
    fn default() -> Self {
        Self {
            midpoint_db: 0.0,
            slope: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub tti_per_episode: usize,
    /// Episodes used to train the pre-shift parameters.
    pub pretrain_episodes: usize,
    /// Episodes run after the shift.
    pub episodes: usize,
    /// Greedy evaluation episodes for the non-adapted network.
    pub frozen_eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub pre: EnvParams,
    pub shift: ShiftDelta,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "l-up".into(),
            tti_per_episode: 144,
            pretrain_episodes: 150,
            episodes: 150,
            frozen_eval_episodes: 20,
            seeds: vec![0, 1, 2, 3, 4],
            pre: EnvParams::default(),
            shift: ShiftDelta::num_ues(3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    #[default]
    Scripted,
    Remote,
}

impl std::str::FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scripted" => Ok(Self::Scripted),
            "remote" => Ok(Self::Remote),
            _ => Err(Error::Config(format!("unknown teacher backend {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub backend: TeacherKind,
    /// Scripted oracle: probability mass on the chosen action.
    pub confidence: f64,
    /// Scripted oracle: fraction of states answered with all UEs silent.
    pub lapse: f64,
    /// File holding the instruction text; the shipped default otherwise.
    pub instruction_file: Option<String>,
    pub remote: ChatClientConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            backend: TeacherKind::Scripted,
            confidence: 0.8,
            lapse: 0.2,
            instruction_file: None,
            remote: ChatClientConfig::default(),
        }
    }
}

impl TeacherConfig {
    pub fn oracle(&self, seed: u64) -> ScriptedOracle {
        ScriptedOracle {
            confidence: self.confidence,
            lapse: self.lapse,
            seed,
            answered: 0,
        }
    }
}

/// Full experiment configuration. Every field has a default, so an empty
/// file is the reference setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub bler: BlerCurve,
    pub network: NetworkShape,
    pub train: TrainConfig,
    pub reward: RewardConfig,
    pub distill: DistillConfig,
    pub switch: SwitchConfig,
    pub saloha: SAlohaConfig,
    pub metrics: TargetGrid,
    pub teacher: TeacherConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scenario: Scenario::default(),
            bler: BlerCurve::default(),
            network: NetworkShape::default(),
            train: TrainConfig::default(),
            reward: RewardConfig::default(),
            distill: DistillConfig::default(),
            switch: SwitchConfig::default(),
            saloha: SAlohaConfig::default(),
            metrics: TargetGrid::default(),
            teacher: TeacherConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn pre_sim(&self, seed: u64) -> SimConfig {
        self.scenario.pre.sim(self.scenario.tti_per_episode, seed)
    }

    pub fn post_params(&self) -> Result<EnvParams> {
        self.scenario.shift.apply(&self.scenario.pre, &self.bler)
    }

    pub fn post_sim(&self, seed: u64) -> Result<SimConfig> {
        Ok(self.post_params()?.sim(self.scenario.tti_per_episode, seed))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let s = &self.scenario;
        if s.episodes == 0 {
            return Err(Error::Config("scenario.episodes must be at least 1".into()));
        }
        if s.seeds.is_empty() {
            return Err(Error::Config("scenario.seeds is empty".into()));
        }
        self.pre_sim(0).validate()?;
        self.post_sim(0)?.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.reward.validate()?;
        self.distill.validate()?;
        self.switch.validate(s.tti_per_episode)?;
        self.saloha.validate()?;
        self.metrics.validate()?;
        if !(self.teacher.confidence > 1.0 / 3.0 && self.teacher.confidence < 1.0) {
            return Err(Error::Config("teacher.confidence must lie in (1/3, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.teacher.lapse) {
            return Err(Error::Config("teacher.lapse must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
