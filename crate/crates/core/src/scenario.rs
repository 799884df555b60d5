//! Scenario files: plant topology, timed actions and faults, end condition and
//! the golden expectations used for scoring.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::{
    AgvUnit, ConveyorStation, FaultSpec, PeerReply, PeerScript, PlantState, PlantTiming, Workpiece,
    DEFAULT_BELT_LENGTH_M, DEFAULT_BELT_SPEED_MPS,
};
use crate::registry::{parse_command, Registry};
use crate::time::Millis;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{location}: {message}")]
pub struct SchemaError {
    pub location: String,
    pub message: String,
}

impl SchemaError {
    pub fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self { location: location.into(), message: message.into() }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Routine,
    Novel,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Routine => "routine",
            Category::Novel => "novel",
        }
    }
}

fn default_length() -> f64 {
    DEFAULT_BELT_LENGTH_M
}
fn default_speed() -> f64 {
    DEFAULT_BELT_SPEED_MPS
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct StationConfig {
    pub id: String,
    #[serde(default = "default_length")]
    pub length_m: f64,
    #[serde(default = "default_speed")]
    pub speed_mps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_agent: Option<String>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct AgvConfig {
    pub id: String,
    pub at: String,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct WorkpieceConfig {
    pub id: String,
    /// Outcome of the RFID processing check. Missing counts as not cleared.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cleared: Option<bool>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
pub struct PlantConfig {
    #[serde(default)]
    pub stations: Vec<StationConfig>,
    #[serde(default)]
    pub agvs: Vec<AgvConfig>,
    #[serde(default)]
    pub workpieces: Vec<WorkpieceConfig>,
    /// Scripted answers of simulated neighbour agents.
    #[serde(default)]
    pub peers: BTreeMap<String, Vec<PeerReply>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<PlantTiming>,
}

impl PlantConfig {
    pub fn build(&self) -> PlantState {
        let mut plant = PlantState::new();
        for s in &self.stations {
            let mut station = ConveyorStation::new(&s.id).with_geometry(s.length_m, s.speed_mps);
            station.next_agent = s.next_agent.clone();
            plant.add_station(station);
        }
        for a in &self.agvs {
            plant.add_agv(AgvUnit::at(&a.id, &a.at));
        }
        for w in &self.workpieces {
            plant.add_workpiece(Workpiece::incoming(&w.id, w.cleared));
        }
        for (peer, replies) in &self.peers {
            plant.peers.insert(peer.clone(), PeerScript { replies: replies.iter().copied().collect() });
        }
        if let Some(timing) = self.timing {
            plant.timing = timing;
        }
        plant
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionKind {
    Spawn { station: String, workpiece: String },
    Remove { workpiece: String },
    Task { text: String },
}

/// Something the environment does at a given time. Times that are not on the
/// 100 ms grid take effect at the next grid point.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct TimedAction {
    pub at_ms: Millis,
    #[serde(flatten)]
    pub action: ActionKind,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct EndCondition {
    pub time_limit_ms: Millis,
    /// Regex over event text; the run finishes once a matching event is logged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_event: Option<String>,
}

fn first() -> usize {
    1
}

/// One point at which an agent is expected to decide.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct GoldenPoint {
    pub id: String,
    /// Regex over event text identifying the triggering event.
    pub trigger: String,
    /// Which matching event counts, starting at 1.
    #[serde(default = "first")]
    pub occurrence: usize,
    pub agent: String,
    /// Command patterns, e.g. `wait(*)` or `conveyor_belt_run(forward, *)`.
    pub acceptable: Vec<String>,
    #[serde(default)]
    pub optimal: Vec<String>,
    /// Terminal points feed the headline effectiveness rate.
    #[serde(default)]
    pub terminal: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
pub struct GoldenSpec {
    #[serde(default)]
    pub points: Vec<GoldenPoint>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub id: String,
    pub category: Category,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub plant: PlantConfig,
    /// Agents taking part; empty means all known agents.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agents: Vec<String>,
    #[serde(default)]
    pub actions: Vec<TimedAction>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    pub end: EndCondition,
    pub golden: GoldenSpec,
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        let spec: ScenarioSpec = serde_json::from_str(text)
            .map_err(|e| SchemaError::new(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        spec.check(&spec.id)?;
        Ok(spec)
    }

    /// Structural checks that serde cannot express. `location` prefixes errors.
    pub fn check(&self, location: &str) -> Result<(), SchemaError> {
        let err = |what: &str, message: String| SchemaError::new(format!("{location}.{what}"), message);
        if self.id.is_empty() {
            return Err(err("id", "scenario id is empty".into()));
        }
        if self.end.time_limit_ms == 0 {
            return Err(err("end.time_limit_ms", "time limit must be positive".into()));
        }
        if let Some(re) = &self.end.terminal_event {
            regex::Regex::new(re).map_err(|e| err("end.terminal_event", e.to_string()))?;
        }
        let stations: BTreeSet<&str> = self.plant.stations.iter().map(|s| s.id.as_str()).collect();
        for (i, a) in self.actions.iter().enumerate() {
            if let ActionKind::Spawn { station, .. } = &a.action {
                if !stations.contains(station.as_str()) {
                    return Err(err(&format!("actions[{i}].station"), format!("unknown station {station:?}")));
                }
            }
        }
        for (i, p) in self.golden.points.iter().enumerate() {
            let here = |field: &str| format!("golden.points[{i}].{field}");
            regex::Regex::new(&p.trigger).map_err(|e| err(&here("trigger"), e.to_string()))?;
            if p.occurrence == 0 {
                return Err(err(&here("occurrence"), "occurrences count from 1".into()));
            }
            if p.acceptable.is_empty() {
                return Err(err(&here("acceptable"), "at least one acceptable command is required".into()));
            }
            for (j, pattern) in p.acceptable.iter().chain(&p.optimal).enumerate() {
                parse_command(pattern).map_err(|e| err(&here(&format!("acceptable[{j}]")), e.to_string()))?;
            }
            for o in &p.optimal {
                if !p.acceptable.contains(o) {
                    return Err(err(&here("optimal"), format!("{o:?} is not among the acceptable commands")));
                }
            }
        }
        Ok(())
    }

    /// Checks every golden pattern against the registry (names exist, arity fits).
    pub fn check_patterns(&self, registry: &Registry) -> Result<(), SchemaError> {
        for (i, p) in self.golden.points.iter().enumerate() {
            for pattern in p.acceptable.iter().chain(&p.optimal) {
                CommandPattern::parse(pattern, registry).map_err(|message| {
                    SchemaError::new(format!("{}.golden.points[{i}]", self.id), message)
                })?;
            }
        }
        Ok(())
    }
}

/// A golden command pattern resolved to the canonical service name.
/// `*` matches any single argument; a lone `*` matches any argument list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommandPattern {
    pub service: String,
    pub args: Option<Vec<String>>,
}

impl CommandPattern {
    pub fn parse(pattern: &str, registry: &Registry) -> Result<Self, String> {
        let draft = parse_command(pattern).map_err(|e| format!("{pattern:?}: {e}"))?;
        if draft.args == ["*"] {
            let service = registry
                .canonical_name(&draft.name)
                .ok_or_else(|| format!("{pattern:?}: unknown service"))?;
            return Ok(Self { service: service.to_string(), args: None });
        }
        let (descriptor, args) = registry.resolve(&draft).map_err(|e| format!("{pattern:?}: {e}"))?;
        if args.len() > descriptor.params.len() {
            return Err(format!("{pattern:?}: too many arguments"));
        }
        Ok(Self { service: descriptor.name.clone(), args: Some(args) })
    }

    pub fn matches(&self, invocation: &crate::registry::Invocation) -> bool {
        if invocation.service != self.service {
            return false;
        }
        let Some(args) = &self.args else { return true };
        args.iter().enumerate().all(|(i, want)| {
            want == "*" || invocation.args.get(i).is_some_and(|got| &got.to_string() == want || got.as_text() == Some(want))
        })
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SuiteFile {
    pub id: String,
    pub scenarios: Vec<ScenarioSpec>,
}

/// Parses a suite and checks scenario ids are unique. Order is file order.
pub fn parse_suite(text: &str) -> Result<SuiteFile, SchemaError> {
    if text.trim().is_empty() {
        return Err(SchemaError::new("line 1 column 0", "suite file is empty"));
    }
    let suite: SuiteFile = serde_json::from_str(text)
        .map_err(|e| SchemaError::new(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    let mut seen = BTreeSet::new();
    for (i, s) in suite.scenarios.iter().enumerate() {
        s.check(&format!("scenarios[{i}]"))?;
        if !seen.insert(s.id.as_str()) {
            return Err(SchemaError::new(format!("scenarios[{i}].id"), format!("duplicate scenario id {:?}", s.id)));
        }
    }
    Ok(suite)
}

pub fn load_suite(path: &std::path::Path) -> Result<SuiteFile, SchemaError> {
    let text = std::fs::read_to_string(path).map_err(|e| SchemaError::new(path.display().to_string(), e.to_string()))?;
    parse_suite(&text).map_err(|e| SchemaError::new(format!("{}: {}", path.display(), e.location), e.message))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{ArgValue, Invocation};

    fn registry() -> Registry {
        Registry::from_json(include_str!("../data/registry.json")).unwrap()
    }

    #[test]
    fn empty_and_duplicate_suites_are_rejected() {
        assert_eq!(parse_suite("").unwrap_err().location, "line 1 column 0");
        let one = include_str!("../data/scenarios/golden_handover.json");
        let doubled = format!("{{\"id\":\"s\",\"scenarios\":[{one},{one}]}}");
        assert_eq!(parse_suite(&doubled).unwrap_err().location, "scenarios[1].id");
        let bad = r#"{"id":"s","scenarios":[{"id":"x"}]}"#;
        assert!(parse_suite(bad).unwrap_err().location.starts_with("line 1"));
    }

    #[test]
    fn patterns() {
        let r = registry();
        let inv = Invocation::new("conveyor_belt_run", vec![ArgValue::Text("forward".into()), ArgValue::Int(10)]);
        assert!(CommandPattern::parse("activate_conveyor(forward, *)", &r).unwrap().matches(&inv));
        assert!(CommandPattern::parse("conveyor_belt_run(*)", &r).unwrap().matches(&inv));
        assert!(!CommandPattern::parse("conveyor_belt_run(backward, 10)", &r).unwrap().matches(&inv));
        let alert = Invocation::new("send_alert_to_human_supervisor", vec![ArgValue::Text("stuck".into())]);
        assert!(CommandPattern::parse("send_alert_to_human_supervisor(*)", &r).unwrap().matches(&alert));
        assert!(!CommandPattern::parse("wait(*)", &r).unwrap().matches(&alert));
        assert!(CommandPattern::parse("teleport(*)", &r).is_err());
    }
}
