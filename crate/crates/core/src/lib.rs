//! Fault attribution for failed multi-agent LLM trajectories.

pub mod attrib;
pub mod cli;
pub mod backend;
pub mod faultlab;
pub mod metrics;
pub mod prompting;
pub mod trace;
