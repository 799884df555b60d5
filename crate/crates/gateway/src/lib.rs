//! HTTP gateway and command-line front door for cellpilot sessions.

pub mod cli;
pub mod server;
pub mod sessions;
