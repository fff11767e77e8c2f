//! Multiple-access MAC protocol laboratory.
//!
//! A slotted uplink channel ([`env`]) driven by interchangeable protocol
//! engines: a learned message-passing Q-network ([`npm`], [`train`]), a
//! teacher answering natural-language queries ([`teacher`], [`textgrad`]),
//! distillation from the teacher into the network ([`distill`]), and a
//! rank-test switch between the two ([`switch`]). [`metrics`] scores
//! goodput series and [`harness`] runs whole scenarios.

pub mod baseline;
pub mod distill;
pub mod env;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod npm;
pub mod protocol;
pub mod rng;
pub mod switch;
pub mod teacher;
pub mod textgrad;
pub mod train;

pub use error::{Error, Result};
