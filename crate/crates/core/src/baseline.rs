//! Slotted ALOHA reference protocol.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Env, EnvState, SlotOutcome, SlotResult};
use crate::error::{Error, Result};
use crate::protocol::SlotPolicy;
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SAlohaConfig {
    pub transmit_prob: f64,
    /// Remove a decoded packet immediately instead of spending the next
    /// slot on a Discard.
    pub instant_ack: bool,
}

impl Default for SAlohaConfig {
    fn default() -> Self {
        Self {
            transmit_prob: 0.33,
            instant_ack: false,
        }
    }
}

impl SAlohaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.transmit_prob) {
            return Err(Error::Config(format!(
                "transmit probability {} outside [0, 1]",
                self.transmit_prob
            )));
        }
        Ok(())
    }
}

/// One slot of S-ALOHA: a UE whose packet was just decoded discards it
/// (unless acknowledgements are instant),
/// every other backlogged UE transmits with probability `transmit_prob`.
pub fn saloha_step<R: Rng + ?Sized>(state: &EnvState, cfg: &SAlohaConfig, rng: &mut R) -> Vec<Action> {
    state
        .buffers
        .iter()
        .enumerate()
        .map(|(ue, &b)| {
            if b == 0 {
                Action::Silent
            } else if state.b0 == ue + 1 && !cfg.instant_ack {
                Action::Discard
            } else if rng.gen_bool(cfg.transmit_prob) {
                Action::Transmit
            } else {
                Action::Silent
            }
        })
        .collect()
}

pub struct SAlohaPolicy {
    pub cfg: SAlohaConfig,
    rng: StreamRng,
}

impl SAlohaPolicy {
    pub fn new(cfg: SAlohaConfig, rng: StreamRng) -> Self {
        Self { cfg, rng }
    }
}

impl SlotPolicy for SAlohaPolicy {
    fn act(&mut self, state: &EnvState) -> Result<Vec<Action>> {
        Ok(saloha_step(state, &self.cfg, &mut self.rng))
    }

    fn after_slot(&mut self, env: &mut Env, result: &SlotResult) {
        if self.cfg.instant_ack {
            if let SlotOutcome::Success(ue) | SlotOutcome::Duplicate(ue) = result.outcome {
                env.buffer_mut(ue).pop_head();
            }
        }
    }
}
