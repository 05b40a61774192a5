//! Evolving tool-capability policy memory for tool-calling agents.
//!
//! The crate bundles the domain model, the policy bank and its offline
//! reviewer, chat providers (live, record/replay and scripted), executable
//! benchmark domains with injected policy gaps, the conversation runtime and
//! the streaming evaluation protocol.

pub mod bank;
pub mod canonical;
pub mod environment;
pub mod evaluation;
pub mod model;
pub mod provider;
pub mod reviewer;
pub mod runtime;
pub mod scripted;
pub mod value;

pub use model::*;
pub use value::{Decimal, Value};
