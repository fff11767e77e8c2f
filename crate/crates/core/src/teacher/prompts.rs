//! Versioned prompt templates, compiled into the binary.

use std::sync::OnceLock;

use serde::Deserialize;

const TEMPLATE_SOURCE: &str = include_str!("../../templates/prompts.toml");

#[derive(Debug, Clone, Deserialize)]
pub struct PromptTemplates {
    pub version: u32,
    pub instruction: InstructionTemplates,
    pub query: QueryTemplates,
    pub textgrad: TextGradTemplates,
}

#[derive(Debug, Clone, Deserialize)]
pub struct InstructionTemplates {
    pub initial: String,
    pub default: String,
    pub format_clause: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct QueryTemplates {
    pub ue: String,
    pub packet_singular: String,
    pub packet_plural: String,
    pub bs_decoded: String,
    pub bs_idle: String,
    pub bs_failure: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TextGradTemplates {
    pub objective_header: String,
    pub rule_success: String,
    pub rule_discard_decoded: String,
    pub rule_discard_undecoded: String,
    pub rule_collision: String,
    pub rule_idle: String,
    pub feedback_system: String,
    pub feedback_user: String,
    pub update_system: String,
    pub update_user: String,
}

pub fn templates() -> &'static PromptTemplates {
    static T: OnceLock<PromptTemplates> = OnceLock::new();
    T.get_or_init(|| toml::from_str(TEMPLATE_SOURCE).expect("bundled prompt templates parse"))
}
