//! Instruction optimization for the token-based protocol.
//!
//! Each epoch asks a chat model for an answer to fixed training queries
//! under the current instruction, asks it again for a critique of that
//! answer against the reward rules, and finally asks it to rewrite the
//! instruction. Every instruction in the history is scored by protocol
//! goodput and the best one is kept.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{EnvState, RewardConfig, SimConfig};
use crate::error::{Error, Result};
use crate::protocol::run_policy_episode;
use crate::rng::SeedStream;
use crate::teacher::{
    build_queries, has_format_clause, render_query_block, templates, Instruction, LlmClient, TeacherBackend,
    TpmPolicy,
};

/// Feedback text that signals convergence.
pub const CONVERGED: &str = "NO_CHANGE";

const BUNDLED_SCENARIO: &str = include_str!("../templates/textgrad_scenario.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextualObjective {
    pub text: String,
}

impl TextualObjective {
    /// One numbered rule per reward case.
    pub fn from_rewards(r: &RewardConfig) -> Self {
        let t = &templates().textgrad;
        let fill = |s: &str| {
            s.replace("{rho1}", &r.rho1.to_string())
                .replace("{rho2}", &r.rho2.to_string())
                .replace("{rho3}", &r.rho3.to_string())
                .replace("{rho4}", &r.rho4.to_string())
                .replace("{rho5}", &r.rho5.to_string())
        };
        let rules = [
            &t.rule_success,
            &t.rule_discard_decoded,
            &t.rule_discard_undecoded,
            &t.rule_collision,
            &t.rule_idle,
        ];
        let mut text = t.objective_header.clone();
        for (i, rule) in rules.iter().enumerate() {
            text.push_str(&format!("\n{}. {}", i + 1, fill(rule)));
        }
        Self { text }
    }
}

/// Hand-written observations used as the optimizer's training queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextGradScenario {
    #[serde(rename = "observation")]
    pub observations: Vec<EnvState>,
}

impl TextGradScenario {
    pub fn bundled() -> Self {
        Self::from_toml(BUNDLED_SCENARIO).expect("bundled scenario parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if s.observations.is_empty() {
            return Err(Error::Empty("training observations"));
        }
        for o in &s.observations {
            if o.buffers.is_empty() || o.b0 > o.buffers.len() + 1 {
                return Err(Error::Config(format!("invalid observation {o:?}")));
            }
        }
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Query blocks of all observations separated by blank lines.
    pub fn training_queries(&self) -> Result<String> {
        let blocks = self
            .observations
            .iter()
            .map(|o| {
                let (ue, bs) = build_queries(o)?;
                Ok(render_query_block(&ue, &bs))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(blocks.join("\n\n"))
    }
}

pub fn textual_forward(client: &mut dyn LlmClient, instruction: &Instruction, x: &str) -> Result<String> {
    if instruction.text.trim().is_empty() {
        return Err(Error::Empty("instruction"));
    }
    Ok(client.chat(&instruction.text, x)?.text)
}

pub fn feedback_prompt(instruction: &Instruction, x: &str, response: &str, objective: &TextualObjective) -> String {
    templates()
        .textgrad
        .feedback_user
        .replace("{objective}", &objective.text)
        .replace("{instruction}", &instruction.text)
        .replace("{queries}", x)
        .replace("{response}", response)
}

pub fn textual_feedback(
    client: &mut dyn LlmClient,
    instruction: &Instruction,
    x: &str,
    response: &str,
    objective: &TextualObjective,
) -> Result<String> {
    let user = feedback_prompt(instruction, x, response, objective);
    Ok(client.chat(&templates().textgrad.feedback_system, &user)?.text)
}

pub fn is_converged(feedback: &str) -> bool {
    let f = feedback.trim();
    f.is_empty() || f.eq_ignore_ascii_case(CONVERGED)
}

pub fn update_prompt(instruction: &Instruction, feedback: &str) -> String {
    templates()
        .textgrad
        .update_user
        .replace("{instruction}", &instruction.text)
        .replace("{feedback}", feedback)
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateOutcome {
    Accepted(Instruction),
    /// The rewrite dropped the answer-format clause.
    Rejected(String),
}

pub fn textual_update(
    client: &mut dyn LlmClient,
    instruction: &Instruction,
    feedback: &str,
    new_id: &str,
) -> Result<UpdateOutcome> {
    if feedback.trim().is_empty() {
        return Err(Error::Empty("feedback"));
    }
    let text = client
        .chat(&templates().textgrad.update_system, &update_prompt(instruction, feedback))?
        .text
        .trim()
        .to_string();
    if has_format_clause(&text) {
        Ok(UpdateOutcome::Accepted(Instruction::new(text, new_id)?))
    } else {
        Ok(UpdateOutcome::Rejected(text))
    }
}

/// Mean token-protocol goodput of `instruction` over `episodes` episodes.
pub fn evaluate_instruction(
    instruction: &Instruction,
    sim: &SimConfig,
    backend: &mut dyn TeacherBackend,
    episodes: usize,
    streams: &SeedStream,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::Empty("evaluation episodes"));
    }
    let mut total = 0.0;
    for n in 0..episodes {
        let mut policy = TpmPolicy::new(backend, instruction);
        total += run_policy_episode(&mut policy, sim, sim.tti_per_episode, streams, "instruction-eval", n as u64)?
            .goodput();
    }
    Ok(total / episodes as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub instruction: Instruction,
    pub goodput: Option<f64>,
    /// Critique produced at this epoch.
    pub feedback: Option<String>,
    /// Rewrite refused because it lost the answer-format clause; the
    /// previous instruction carries over.
    pub rejected_update: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptOptState {
    pub history: Vec<EpochRecord>,
    pub max_epochs: usize,
    pub converged: bool,
}

impl PromptOptState {
    pub fn new(initial: Instruction, max_epochs: usize) -> Self {
        Self {
            history: vec![EpochRecord {
                epoch: 0,
                instruction: initial,
                goodput: None,
                feedback: None,
                rejected_update: None,
            }],
            max_epochs,
            converged: false,
        }
    }

    /// Index m of the newest instruction.
    pub fn epoch(&self) -> usize {
        self.history.len() - 1
    }

    pub fn current(&self) -> &Instruction {
        &self.history.last().expect("initial instruction").instruction
    }

    pub fn finished(&self) -> bool {
        self.converged || self.epoch() >= self.max_epochs
    }
}

/// Argmax goodput over evaluated instructions; the earliest epoch wins ties.
pub fn select_best(state: &PromptOptState) -> Result<Instruction> {
    let mut best: Option<(&EpochRecord, f64)> = None;
    for rec in &state.history {
        let Some(g) = rec.goodput else { continue };
        if best.map_or(true, |(_, bg)| g > bg) {
            best = Some((rec, g));
        }
    }
    best.map(|(r, _)| r.instruction.clone())
        .ok_or(Error::Empty("evaluated instructions"))
}

/// One epoch: score the current instruction if needed, then forward,
/// feedback and update. On error the state is left as it was.
pub fn textgrad_epoch(
    state: &mut PromptOptState,
    client: &mut dyn LlmClient,
    x: &str,
    objective: &TextualObjective,
    evaluate: &mut dyn FnMut(&Instruction) -> Result<f64>,
) -> Result<()> {
    if state.finished() {
        return Ok(());
    }
    let m = state.epoch();
    let current = state.current().clone();
    let goodput = match state.history[m].goodput {
        Some(g) => g,
        None => evaluate(&current)?,
    };
    let response = textual_forward(client, &current, x)?;
    let feedback = textual_feedback(client, &current, x, &response, objective)?;
    let outcome = if is_converged(&feedback) {
        None
    } else {
        Some(textual_update(client, &current, &feedback, &format!("phi_{}", m + 1))?)
    };
    let rec = &mut state.history[m];
    rec.goodput = Some(goodput);
    rec.feedback = Some(feedback);
    match outcome {
        None => state.converged = true,
        Some(outcome) => {
            let (instruction, rejected_update) = match outcome {
                UpdateOutcome::Accepted(i) => (i, None),
                UpdateOutcome::Rejected(text) => {
                    let mut kept = current;
                    kept.id = format!("phi_{}", m + 1);
                    (kept, Some(text))
                }
            };
            state.history.push(EpochRecord {
                epoch: m + 1,
                instruction,
                goodput: None,
                feedback: None,
                rejected_update,
            });
        }
    }
    Ok(())
}

/// Runs epochs until convergence or `max_epochs`, scores the final
/// instruction and returns the best one.
pub fn run_textgrad(
    state: &mut PromptOptState,
    client: &mut dyn LlmClient,
    x: &str,
    objective: &TextualObjective,
    evaluate: &mut dyn FnMut(&Instruction) -> Result<f64>,
) -> Result<Instruction> {
    while !state.finished() {
        textgrad_epoch(state, client, x, objective, evaluate)?;
    }
    let last = state.history.last_mut().expect("initial instruction");
    if last.goodput.is_none() {
        last.goodput = Some(evaluate(&last.instruction)?);
    }
    select_best(state)
}
