//! Desk-scale production cell run by language-model agents: a deterministic
//! plant simulator, a digital-twin layer that turns signal changes into log
//! lines, a service registry that validates and executes agent commands, an
//! orchestrator that drives it all, and an evaluation harness.

pub mod event_log;
pub mod plant;
pub mod registry;
pub mod time;
pub mod twin;
pub mod agent;
pub mod fixtures;
pub mod orchestrator;
pub mod scenario;
pub mod eval;
