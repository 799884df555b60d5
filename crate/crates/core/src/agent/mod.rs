//! Agent definitions and prompt assembly.

pub mod backend;
pub mod decision;
pub mod oracle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{prompt_digest, Backend, BackendDescriptor, BackendError, BackendKind, ReplayRecord, ScriptedReplay};
pub use decision::{format_decision, parse_decision, parse_plan, Decision, DecisionError, Plan, PlanError, PlanStep};
pub use oracle::{OracleFile, OracleRule, RuleOracle};

use crate::event_log::Subscription;
use crate::registry::Registry;

pub const ACTIONS_HEADING: &str = "Actions you can take:";
pub const INPUT_CUE: &str = "Input:";
pub const OUTPUT_CUE: &str = "Output:";

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum AgentLevel {
    Manager,
    Operator,
}

/// The static sections of an agent prompt. The service catalog and the input
/// slot are filled in per call.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq, Default)]
pub struct PromptTemplate {
    pub role_goal: String,
    #[serde(default)]
    pub context: String,
    #[serde(default)]
    pub behavior_constraints: String,
    #[serde(default)]
    pub io_pattern: String,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct AgentSpec {
    pub id: String,
    pub level: AgentLevel,
    pub prompt: PromptTemplate,
    pub subscription: Subscription,
    /// Names rendered into the prompt's action list, in order.
    #[serde(default)]
    pub allowed_services: Vec<String>,
    /// Further names the procedure text refers to. Accepted, not listed.
    #[serde(default)]
    pub sop_services: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub station: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_agent: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("agent {agent}: service {service:?} is not registered")]
    UnknownService { agent: String, service: String },
    #[error("operator agent {0} has no station")]
    MissingStation(String),
    #[error("agent {0}: subscription window must be at least 1")]
    EmptyWindow(String),
    #[error("agent file: {0}")]
    Format(String),
    #[error("duplicate agent id {0:?}")]
    DuplicateAgent(String),
}

impl AgentSpec {
    pub fn check(&self, registry: &Registry) -> Result<(), AgentError> {
        for service in self.allowed_services.iter().chain(&self.sop_services) {
            if !registry.contains(service) {
                return Err(AgentError::UnknownService { agent: self.id.clone(), service: service.clone() });
            }
        }
        if self.level == AgentLevel::Operator && self.station.is_none() {
            return Err(AgentError::MissingStation(self.id.clone()));
        }
        self.subscription.check().map_err(|_| AgentError::EmptyWindow(self.id.clone()))
    }

    /// Whether `service` (any spelling) may be issued by this agent.
    pub fn permits(&self, registry: &Registry, service: &str) -> bool {
        let Some(canonical) = registry.canonical_name(service) else { return false };
        self.allowed_services.iter().chain(&self.sop_services).any(|s| registry.canonical_name(s) == Some(canonical))
    }

    pub fn catalog(&self, registry: &Registry) -> String {
        registry.render_catalog(&self.allowed_services).unwrap_or_default()
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, Default)]
pub struct AgentsFile {
    pub agents: Vec<AgentSpec>,
}

pub fn load_agents(text: &str, registry: &Registry) -> Result<Vec<AgentSpec>, AgentError> {
    let file: AgentsFile = serde_json::from_str(text).map_err(|e| AgentError::Format(e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    for agent in &file.agents {
        if !seen.insert(agent.id.clone()) {
            return Err(AgentError::DuplicateAgent(agent.id.clone()));
        }
        agent.check(registry)?;
    }
    Ok(file.agents)
}

/// Assembles role/goal, context, action list, behaviour, I/O pattern, then
/// the input slot and the output cue. Empty sections are skipped.
pub fn build_prompt(template: &PromptTemplate, catalog: &str, excerpt: &str) -> String {
    let actions = if catalog.is_empty() { String::new() } else { format!("{ACTIONS_HEADING}\n\n{catalog}") };
    let sections = [
        template.role_goal.as_str(),
        template.context.as_str(),
        actions.as_str(),
        template.behavior_constraints.as_str(),
        template.io_pattern.as_str(),
    ];
    let head: Vec<&str> = sections.into_iter().filter(|s| !s.is_empty()).collect();
    format!("{}\n\n{INPUT_CUE}\n{excerpt}\n{OUTPUT_CUE}\n", head.join("\n\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template() -> PromptTemplate {
        PromptTemplate {
            role_goal: "You are a test agent.".into(),
            context: "A belt.".into(),
            behavior_constraints: "Do things.".into(),
            io_pattern: "Answer in JSON.".into(),
        }
    }

    #[test]
    fn sections_in_order() {
        let p = build_prompt(&template(), "`pass()`: nothing", "[00:00:01] x");
        assert_eq!(
            p,
            "You are a test agent.\n\nA belt.\n\nActions you can take:\n\n`pass()`: nothing\n\nDo things.\n\nAnswer in JSON.\n\nInput:\n[00:00:01] x\nOutput:\n"
        );
    }

    #[test]
    fn empty_excerpt_still_ends_with_cue() {
        let p = build_prompt(&template(), "", "");
        assert!(p.ends_with("Input:\n\nOutput:\n"));
        assert!(!p.contains(ACTIONS_HEADING));
    }

    #[test]
    fn only_the_input_slot_varies() {
        let a = build_prompt(&template(), "c", "[00:00:01] a");
        let b = build_prompt(&template(), "c", "[00:00:01] b");
        let prefix = a.len() - "a\nOutput:\n".len();
        assert_eq!(a[..prefix], b[..prefix]);
        assert_ne!(a, b);
    }
}
