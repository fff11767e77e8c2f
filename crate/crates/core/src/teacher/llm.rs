//! Chat-completion backed teacher, plus fixture replay and recording.
//!
//! Requests use the OpenAI-style `/chat/completions` body:
//! `{"model", "messages": [system, user], "temperature", "logprobs", "top_logprobs"}`.
//! The reply text is `choices[0].message.content`; per-token scores are read
//! from `choices[0].logprobs.content[] = {token, logprob, top_logprobs: [{token, logprob}]}`.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{parse_action_tokens, render_query_block, Instruction, TeacherBackend, TeacherResponse};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub logprob: f64,
    /// Alternative tokens at this position with their log-probabilities.
    #[serde(default)]
    pub top: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub text: String,
    pub tokens: Option<Vec<TokenScore>>,
}

pub trait LlmClient {
    fn chat(&mut self, system: &str, user: &str) -> Result<ChatReply>;
}

impl<T: LlmClient + ?Sized> LlmClient for Box<T> {
    fn chat(&mut self, system: &str, user: &str) -> Result<ChatReply> {
        (**self).chat(system, user)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatClientConfig {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub logprobs: bool,
    pub top_logprobs: u8,
    /// Environment variable holding the bearer token, if any.
    pub token_env: Option<String>,
    pub timeout_secs: u64,
}

impl Default for ChatClientConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            temperature: 0.0,
            logprobs: true,
            top_logprobs: 5,
            token_env: None,
            timeout_secs: 60,
        }
    }
}

pub struct ChatClient {
    cfg: ChatClientConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl ChatClient {
    pub fn new(cfg: ChatClientConfig) -> Result<Self> {
        let token = match &cfg.token_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .build()
            .into();
        Ok(Self { cfg, token, agent })
    }

    pub fn config(&self) -> &ChatClientConfig {
        &self.cfg
    }

    pub fn request_body(&self, system: &str, user: &str) -> Value {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": self.cfg.temperature,
        });
        if self.cfg.logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(self.cfg.top_logprobs);
        }
        body
    }
}

/// Extracts text and token scores from a chat-completion response body.
pub fn parse_chat_response(body: &Value) -> Result<ChatReply> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| Error::Payload("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Payload("response has no message content".into()))?
        .to_string();
    let tokens = choice.pointer("/logprobs/content").and_then(Value::as_array).map(|items| {
        items
            .iter()
            .filter_map(|t| {
                let token = t.get("token")?.as_str()?.to_string();
                let logprob = t.get("logprob")?.as_f64()?;
                let top = t
                    .get("top_logprobs")
                    .and_then(Value::as_array)
                    .map(|alts| {
                        alts.iter()
                            .filter_map(|a| Some((a.get("token")?.as_str()?.to_string(), a.get("logprob")?.as_f64()?)))
                            .collect()
                    })
                    .unwrap_or_default();
                Some(TokenScore { token, logprob, top })
            })
            .collect()
    });
    Ok(ChatReply { text, tokens })
}

impl LlmClient for ChatClient {
    fn chat(&mut self, system: &str, user: &str) -> Result<ChatReply> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .send_json(self.request_body(system, user))
            .map_err(|e| Error::Transport(e.to_string()))?;
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(e.to_string()))?;
        parse_chat_response(&body)
    }
}

/// One recorded exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub system: String,
    pub user: String,
    pub text: String,
    #[serde(default)]
    pub tokens: Option<Vec<TokenScore>>,
}

/// Replays recorded exchanges by exact (system, user) match.
#[derive(Debug, Clone, Default)]
pub struct FixtureLlm {
    pub entries: Vec<FixtureEntry>,
}

impl FixtureLlm {
    pub fn new(entries: Vec<FixtureEntry>) -> Self {
        Self { entries }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(serde_json::from_str(&text)?))
    }
}

impl LlmClient for FixtureLlm {
    fn chat(&mut self, system: &str, user: &str) -> Result<ChatReply> {
        self.entries
            .iter()
            .find(|e| e.system == system && e.user == user)
            .map(|e| ChatReply {
                text: e.text.clone(),
                tokens: e.tokens.clone(),
            })
            .ok_or_else(|| Error::Transport("no recorded response for this request".into()))
    }
}

/// Forwards to an inner client and keeps every successful exchange.
pub struct RecordingLlm<C> {
    pub inner: C,
    pub entries: Vec<FixtureEntry>,
}

impl<C: LlmClient> RecordingLlm<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            entries: Vec::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.entries)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl<C: LlmClient> LlmClient for RecordingLlm<C> {
    fn chat(&mut self, system: &str, user: &str) -> Result<ChatReply> {
        let reply = self.inner.chat(system, user)?;
        self.entries.push(FixtureEntry {
            system: system.into(),
            user: user.into(),
            text: reply.text.clone(),
            tokens: reply.tokens.clone(),
        });
        Ok(reply)
    }
}

/// Teacher backed by a chat model: the instruction is the system turn, the
/// queries form the user turn.
pub struct LlmTeacher<C> {
    pub client: C,
}

impl<C: LlmClient> LlmTeacher<C> {
    pub fn new(client: C) -> Self {
        Self { client }
    }
}

/// Scores of '0', '1', '2' at the token covering byte `offset` of the reply.
/// Candidates missing from the reported alternatives get the smallest
/// reported log-probability.
pub fn candidate_scores(tokens: &[TokenScore], offset: usize) -> Option<[f64; 3]> {
    let mut start = 0;
    let tok = tokens.iter().find(|t| {
        let end = start + t.token.len();
        let hit = offset >= start && offset < end;
        start = end;
        hit
    })?;
    let mut listed: Vec<(&str, f64)> = tok.top.iter().map(|(s, lp)| (s.as_str(), *lp)).collect();
    listed.push((tok.token.as_str(), tok.logprob));
    let floor = listed.iter().map(|(_, lp)| *lp).fold(f64::INFINITY, f64::min);
    let mut out = [floor; 3];
    for (i, digit) in ["0", "1", "2"].iter().enumerate() {
        if let Some((_, lp)) = listed.iter().find(|(s, _)| s.trim() == *digit) {
            out[i] = *lp;
        }
    }
    Some(out)
}

impl<C: LlmClient> TeacherBackend for LlmTeacher<C> {
    fn complete(&mut self, instruction: &Instruction, ue_queries: &[String], bs_query: &str) -> Result<TeacherResponse> {
        let user = render_query_block(ue_queries, bs_query);
        let reply = self.client.chat(&instruction.text, &user)?;
        let parsed = parse_action_tokens(&reply.text, ue_queries.len());
        let log_scores = parsed
            .iter()
            .map(|m| {
                let (_, offset) = (*m)?;
                candidate_scores(reply.tokens.as_deref()?, offset)
            })
            .collect();
        Ok(TeacherResponse {
            raw_text: reply.text,
            actions: parsed.into_iter().map(|m| m.map(|(a, _)| a)).collect(),
            log_scores,
        })
    }

    fn name(&self) -> &str {
        "llm"
    }
}
