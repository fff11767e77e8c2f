//! Rule-based stand-in for the language model.

use std::sync::OnceLock;

use regex::Regex;

use super::{render_answer, Instruction, TeacherBackend, TeacherResponse};
use crate::env::{Action, EnvState};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Reads the state back out of the query text and answers with a fixed
/// schedule: a UE whose packet was just decoded discards it; otherwise the
/// UE with the longest non-empty buffer transmits (lowest index on ties).
///
/// With `lapse > 0` a seeded fraction of queries is answered with every UE
/// silent, which lowers the oracle's goodput without ever causing a
/// collision. Whether a query lapses depends on the state, `seed` and the
/// number of queries answered so far, so a lapse never repeats forever on a
/// state that silence leaves unchanged (full buffers), and two oracles with
/// the same seed answer the same query sequence identically.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedOracle {
    pub confidence: f64,
    pub lapse: f64,
    pub seed: u64,
    /// Queries answered so far.
    pub answered: u64,
}

impl Default for ScriptedOracle {
    fn default() -> Self {
        Self {
            confidence: 0.8,
            lapse: 0.0,
            seed: 0,
            answered: 0,
        }
    }
}

fn ue_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"UE (\d+) has (\d+) packets? in the buffer").expect("valid regex"))
}

fn decoded_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"decoded Agent (\d+)'s packet").expect("valid regex"))
}

/// Recovers buffer lengths and the decoded UE (as `b0`; 0 if none) from
/// query text. Failure and idle sentences both map to "nothing decoded",
/// which is all the rule needs.
pub fn parse_state(ue_queries: &[String], bs_query: &str) -> Result<EnvState> {
    let mut buffers = vec![None; ue_queries.len()];
    for q in ue_queries {
        let cap = ue_regex()
            .captures(q)
            .ok_or_else(|| Error::Payload(format!("unrecognised UE query {q:?}")))?;
        let ue: usize = cap[1].parse().map_err(|_| Error::Payload(q.clone()))?;
        let b: usize = cap[2].parse().map_err(|_| Error::Payload(q.clone()))?;
        if ue == 0 || ue > buffers.len() {
            return Err(Error::Payload(format!("UE index {ue} out of range")));
        }
        buffers[ue - 1] = Some(b);
    }
    let buffers = buffers
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Payload("missing UE query".into()))?;
    let b0 = match decoded_regex().captures(bs_query) {
        Some(cap) => cap[1].parse().map_err(|_| Error::Payload(bs_query.into()))?,
        None => 0,
    };
    Ok(EnvState { buffers, b0 })
}

impl ScriptedOracle {
    pub fn decide(&self, state: &EnvState) -> Vec<Action> {
        let l = state.num_ues();
        let mut actions = vec![Action::Silent; l];
        if self.lapses_on(state) {
            return actions;
        }
        let decoded = (1..=l).contains(&state.b0).then(|| state.b0 - 1);
        if let Some(ue) = decoded {
            actions[ue] = Action::Discard;
        }
        let mut best: Option<usize> = None;
        for ue in 0..l {
            if Some(ue) == decoded || state.buffers[ue] == 0 {
                continue;
            }
            if best.map_or(true, |b| state.buffers[ue] > state.buffers[b]) {
                best = Some(ue);
            }
        }
        if let Some(ue) = best {
            actions[ue] = Action::Transmit;
        }
        actions
    }

    fn lapses_on(&self, state: &EnvState) -> bool {
        if self.lapse <= 0.0 {
            return false;
        }
        let key = format!("{:?}/{}", state.buffers, state.b0);
        let h = SeedStream::new(self.seed).derive_seed(&key, self.answered);
        ((h >> 11) as f64 / (1u64 << 53) as f64) < self.lapse
    }

    fn log_scores(&self, a: Action) -> [f64; 3] {
        let other = ((1.0 - self.confidence) / 2.0).ln();
        let mut s = [other; 3];
        s[a.index()] = self.confidence.ln();
        s
    }
}

impl TeacherBackend for ScriptedOracle {
    fn complete(&mut self, _instruction: &Instruction, ue_queries: &[String], bs_query: &str) -> Result<TeacherResponse> {
        let state = parse_state(ue_queries, bs_query)?;
        let actions = self.decide(&state);
        self.answered += 1;
        Ok(TeacherResponse {
            raw_text: render_answer(&actions),
            log_scores: actions.iter().map(|&a| Some(self.log_scores(a))).collect(),
            actions: actions.into_iter().map(Some).collect(),
        })
    }

    fn name(&self) -> &str {
        "scripted"
    }
}
