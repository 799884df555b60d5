//! Bundled configuration: the service registry, enrichment rules, agent
//! definitions, oracle rule files, scenarios and golden outputs.

use crate::agent::{load_agents, AgentError, AgentSpec, RuleOracle};
use crate::registry::Registry;
use crate::scenario::{parse_suite, ScenarioSpec, SuiteFile};
use crate::twin::RuleSet;

pub const REGISTRY_JSON: &str = include_str!("../data/registry.json");
pub const RULES_JSON: &str = include_str!("../data/rules.json");
pub const AGENTS_JSON: &str = include_str!("../data/agents.json");
pub const GOLDEN_HANDOVER_LOG: &str = include_str!("../data/golden/handover_log.txt");
pub const GOLDEN_HANDOVER_PROMPT: &str = include_str!("../data/golden/handover_prompt.txt");

const ORACLE_SOP: &str = include_str!("../data/oracle/sop.json");
const ORACLE_FALLBACK: &str = include_str!("../data/oracle/fallback.json");
const ORACLE_ADVERSARIAL: &str = include_str!("../data/oracle/adversarial.json");

const SCENARIOS: &[(&str, &str)] = &[
    ("golden_handover", include_str!("../data/scenarios/golden_handover.json")),
    ("agv_transport", include_str!("../data/scenarios/agv_transport.json")),
    ("stuck_workpiece", include_str!("../data/scenarios/stuck_workpiece.json")),
];

const SUITES: &[(&str, &str)] = &[("suite100", include_str!("../data/suites/suite100.json"))];

/// Oracle rule file by short name: `sop`, `fallback` or `adversarial`.
pub fn oracle_rules(name: &str) -> Option<&'static str> {
    match name {
        "sop" => Some(ORACLE_SOP),
        "fallback" => Some(ORACLE_FALLBACK),
        "adversarial" => Some(ORACLE_ADVERSARIAL),
        _ => None,
    }
}

pub fn scenario_names() -> impl Iterator<Item = &'static str> {
    SCENARIOS.iter().map(|(n, _)| *n)
}

pub fn scenario(name: &str) -> Option<ScenarioSpec> {
    let (_, text) = SCENARIOS.iter().find(|(n, _)| *n == name)?;
    Some(ScenarioSpec::from_json(text).expect("bundled scenario parses"))
}

pub fn suite(name: &str) -> Option<SuiteFile> {
    let (_, text) = SUITES.iter().find(|(n, _)| *n == name)?;
    Some(parse_suite(text).expect("bundled suite parses"))
}

pub fn registry() -> Registry {
    Registry::from_json(REGISTRY_JSON).expect("bundled registry parses")
}

pub fn rules() -> RuleSet {
    RuleSet::from_json(RULES_JSON).expect("bundled rules parse")
}

pub fn agents() -> Vec<AgentSpec> {
    agents_for(&registry()).expect("bundled agents check out")
}

pub fn agents_for(registry: &Registry) -> Result<Vec<AgentSpec>, AgentError> {
    load_agents(AGENTS_JSON, registry)
}

pub fn agent(id: &str) -> Option<AgentSpec> {
    agents().into_iter().find(|a| a.id == id)
}

/// Oracle that follows the written procedure only.
pub fn sop_oracle() -> RuleOracle {
    RuleOracle::from_json("rule_oracle:sop", &[ORACLE_SOP]).expect("bundled oracle parses")
}

/// Procedure rules plus fallbacks for situations the procedure does not cover.
pub fn full_oracle() -> RuleOracle {
    RuleOracle::from_json("rule_oracle", &[ORACLE_SOP, ORACLE_FALLBACK]).expect("bundled oracle parses")
}

pub fn adversarial_oracle() -> RuleOracle {
    RuleOracle::from_json("adversarial", &[ORACLE_ADVERSARIAL]).expect("bundled oracle parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn everything_bundled_loads() {
        let registry = registry();
        assert!(!rules().is_empty());
        assert!(agents_for(&registry).unwrap().len() >= 3);
        for name in scenario_names() {
            scenario(name).unwrap().check_patterns(&registry).unwrap();
        }
        sop_oracle();
        full_oracle();
        adversarial_oracle();
    }
}
