//! Token-based protocol: natural-language queries, a teacher backend that
//! answers them, answer parsing with a silent fallback, and teacher action
//! distributions for distillation.

mod llm;
mod prompts;
mod scripted;

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvState};
use crate::error::{Error, Result};
use crate::protocol::SlotPolicy;

pub use llm::{
    candidate_scores, parse_chat_response, ChatClient, ChatClientConfig, ChatReply, FixtureEntry, FixtureLlm,
    LlmClient, LlmTeacher, RecordingLlm, TokenScore,
};
pub use prompts::{templates, PromptTemplates, QueryTemplates, TextGradTemplates};
pub use scripted::{parse_state, ScriptedOracle};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub id: String,
}

impl Instruction {
    /// Rejects empty text and text missing the answer-format clause.
    pub fn new(text: impl Into<String>, id: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if !has_format_clause(&text) {
            return Err(Error::Config(format!(
                "instruction must contain the answer format clause {:?}",
                templates().instruction.format_clause
            )));
        }
        Ok(Self { text, id: id.into() })
    }

    /// The shipped default instruction.
    pub fn default_instruction() -> Self {
        Self::new(templates().instruction.default.clone(), "default").expect("template carries the clause")
    }

    /// The hand-crafted starting instruction for optimization.
    pub fn initial() -> Self {
        Self::new(templates().instruction.initial.clone(), "phi_0").expect("template carries the clause")
    }
}

pub fn has_format_clause(text: &str) -> bool {
    !text.trim().is_empty() && text.contains(&templates().instruction.format_clause)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TeacherResponse {
    pub raw_text: String,
    /// Parsed action per UE; `None` where the answer had no well-formed line.
    pub actions: Vec<Option<Action>>,
    /// Log-scores of the tokens '0', '1', '2' at each UE's action position.
    pub log_scores: Vec<Option<[f64; 3]>>,
}

impl TeacherResponse {
    /// Builds a response from raw text alone (no token scores).
    pub fn from_text(raw_text: impl Into<String>, num_ues: usize) -> Self {
        let raw_text = raw_text.into();
        let actions = parse_action_tokens(&raw_text, num_ues)
            .into_iter()
            .map(|m| m.map(|(a, _)| a))
            .collect();
        Self {
            raw_text,
            actions,
            log_scores: vec![None; num_ues],
        }
    }

    /// Parsed actions with Silent substituted for unparseable UEs.
    pub fn resolved_actions(&self) -> Vec<Action> {
        self.actions.iter().map(|a| a.unwrap_or(Action::Silent)).collect()
    }

    /// Teacher distribution per UE; uniform where the answer failed to parse
    /// or no scores are available.
    pub fn distributions(&self, kappa: f64) -> Vec<[f64; 3]> {
        self.actions
            .iter()
            .enumerate()
            .map(|(ue, a)| {
                let scores = a.and(self.log_scores.get(ue).copied().flatten());
                action_distribution(scores.as_ref(), kappa)
            })
            .collect()
    }
}

/// Anything that can answer a token-protocol query for one slot.
pub trait TeacherBackend {
    fn complete(&mut self, instruction: &Instruction, ue_queries: &[String], bs_query: &str) -> Result<TeacherResponse>;

    /// Name used in logs and run metadata.
    fn name(&self) -> &str;
}

impl<T: TeacherBackend + ?Sized> TeacherBackend for Box<T> {
    fn complete(&mut self, instruction: &Instruction, ue_queries: &[String], bs_query: &str) -> Result<TeacherResponse> {
        (**self).complete(instruction, ue_queries, bs_query)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

pub fn build_ue_query(ue: usize, b: usize) -> String {
    let q = &templates().query;
    let noun = if b == 1 { &q.packet_singular } else { &q.packet_plural };
    q.ue.replace("{ue}", &ue.to_string())
        .replace("{count}", &b.to_string())
        .replace("{noun}", noun)
}

/// BS observation sentence followed by the closing question.
pub fn build_bs_query(b0: usize, num_ues: usize) -> Result<String> {
    let q = &templates().query;
    let sentence = match b0 {
        0 => q.bs_idle.clone(),
        b if b == num_ues + 1 => q.bs_failure.clone(),
        b if b <= num_ues => q.bs_decoded.replace("{ue}", &b.to_string()),
        b => {
            return Err(Error::OutOfRange(format!("channel observation {b} > L+1 = {}", num_ues + 1)));
        }
    };
    Ok(format!("{sentence}\n{}", q.question))
}

/// All queries for one state: UE sentences in order, then the BS query.
pub fn build_queries(state: &EnvState) -> Result<(Vec<String>, String)> {
    let ue = state
        .buffers
        .iter()
        .enumerate()
        .map(|(i, &b)| build_ue_query(i + 1, b))
        .collect();
    Ok((ue, build_bs_query(state.b0, state.num_ues())?))
}

/// User-turn text sent to a chat backend.
pub fn render_query_block(ue_queries: &[String], bs_query: &str) -> String {
    let mut s = ue_queries.join("\n");
    if !s.is_empty() {
        s.push('\n');
    }
    s.push_str(bs_query);
    s
}

pub fn render_answer(actions: &[Action]) -> String {
    let t = &templates().query.answer;
    actions
        .iter()
        .enumerate()
        .map(|(i, a)| t.replace("{ue}", &(i + 1).to_string()).replace("{action}", &a.index().to_string()))
        .collect::<Vec<_>>()
        .join("\n")
}

fn answer_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"UE (\d+): Action (\d+)\b").expect("valid regex"))
}

/// For each UE, the first answer line naming it together with the byte
/// offset of its action digit. Lines whose digit is not an action leave the
/// UE unresolved.
pub fn parse_action_tokens(text: &str, num_ues: usize) -> Vec<Option<(Action, usize)>> {
    let mut out: Vec<Option<(Action, usize)>> = vec![None; num_ues];
    let mut seen = vec![false; num_ues];
    for cap in answer_regex().captures_iter(text) {
        let Ok(ue) = cap[1].parse::<usize>() else { continue };
        if ue == 0 || ue > num_ues || seen[ue - 1] {
            continue;
        }
        seen[ue - 1] = true;
        let digit = cap.get(2).expect("group 2");
        let action = match digit.as_str() {
            "0" => Some(Action::Silent),
            "1" => Some(Action::Transmit),
            "2" => Some(Action::Discard),
            _ => None,
        };
        out[ue - 1] = action.map(|a| (a, digit.start()));
    }
    out
}

/// Per-UE actions; UEs without a well-formed line fall back to Silent.
pub fn parse_actions(text: &str, num_ues: usize) -> Vec<Action> {
    parse_action_tokens(text, num_ues)
        .into_iter()
        .map(|m| m.map_or(Action::Silent, |(a, _)| a))
        .collect()
}

/// softmax(log_scores / kappa); uniform when scores are absent.
pub fn action_distribution(log_scores: Option<&[f64; 3]>, kappa: f64) -> [f64; 3] {
    let Some(s) = log_scores else {
        return [1.0 / 3.0; 3];
    };
    softmax3(s, kappa)
}

pub(crate) fn softmax3(x: &[f64; 3], kappa: f64) -> [f64; 3] {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return [1.0 / 3.0; 3];
    }
    let e = x.map(|v| ((v - m) / kappa).exp());
    let z: f64 = e.iter().sum();
    e.map(|v| v / z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpmStep {
    pub actions: Vec<Action>,
    pub response: TeacherResponse,
    /// The backend failed; every UE stays silent this slot.
    pub flagged: bool,
}

/// One token-protocol slot: build queries from `state`, call the backend once,
/// parse. Backend failures silence every UE and flag the slot.
pub fn tpm_step(state: &EnvState, backend: &mut dyn TeacherBackend, instruction: &Instruction) -> Result<TpmStep> {
    let (ue_queries, bs_query) = build_queries(state)?;
    let l = state.num_ues();
    match backend.complete(instruction, &ue_queries, &bs_query) {
        Ok(response) => {
            let mut actions = response.resolved_actions();
            actions.resize(l, Action::Silent);
            Ok(TpmStep {
                actions,
                response,
                flagged: false,
            })
        }
        Err(_) => Ok(TpmStep {
            actions: vec![Action::Silent; l],
            response: TeacherResponse {
                actions: vec![None; l],
                log_scores: vec![None; l],
                ..Default::default()
            },
            flagged: true,
        }),
    }
}

/// The token-based protocol as a slot policy.
pub struct TpmPolicy<'a> {
    pub backend: &'a mut dyn TeacherBackend,
    pub instruction: &'a Instruction,
    flagged: usize,
}

impl<'a> TpmPolicy<'a> {
    pub fn new(backend: &'a mut dyn TeacherBackend, instruction: &'a Instruction) -> Self {
        Self {
            backend,
            instruction,
            flagged: 0,
        }
    }
}

impl SlotPolicy for TpmPolicy<'_> {
    fn act(&mut self, state: &EnvState) -> Result<Vec<Action>> {
        let step = tpm_step(state, self.backend, self.instruction)?;
        self.flagged += usize::from(step.flagged);
        Ok(step.actions)
    }

    fn flagged_slots(&self) -> usize {
        self.flagged
    }
}
