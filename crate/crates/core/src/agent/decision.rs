//! Extraction of `{"reason", "command"}` decisions and manager plans from raw
//! model output.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecisionError {
    #[error("no JSON object found in the output")]
    NoJsonFound,
    #[error("missing field {0:?}")]
    MissingField(String),
    #[error("field {0:?} is not a string")]
    NonStringField(String),
    #[error("unexpected field {0:?}")]
    UnexpectedField(String),
}

impl DecisionError {
    pub fn class(&self) -> &'static str {
        match self {
            DecisionError::NoJsonFound => "NoJsonFound",
            DecisionError::MissingField(_) => "MissingField",
            DecisionError::NonStringField(_) => "NonStringField",
            DecisionError::UnexpectedField(_) => "UnexpectedField",
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct Decision {
    pub reason: String,
    pub command: String,
    #[serde(default)]
    pub raw: String,
}

/// Serializes a decision the way the prompt's output pattern shows it.
pub fn format_decision(reason: &str, command: &str) -> String {
    serde_json::json!({ "reason": reason, "command": command }).to_string()
}

/// First JSON object embedded in `text`, skipping prose, code fences and any
/// `{` that does not start a valid object.
pub fn first_json_object(text: &str) -> Option<Map<String, Value>> {
    for (start, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

fn string_field(map: &Map<String, Value>, name: &str) -> Result<String, DecisionError> {
    match map.get(name) {
        None => Err(DecisionError::MissingField(name.to_string())),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(DecisionError::NonStringField(name.to_string())),
    }
}

pub fn parse_decision(raw: &str) -> Result<Decision, DecisionError> {
    let map = first_json_object(raw).ok_or(DecisionError::NoJsonFound)?;
    let reason = string_field(&map, "reason")?;
    let command = string_field(&map, "command")?;
    if let Some(extra) = map.keys().find(|k| *k != "reason" && *k != "command") {
        return Err(DecisionError::UnexpectedField(extra.clone()));
    }
    Ok(Decision { reason, command, raw: raw.to_string() })
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct PlanStep {
    pub id: String,
    pub assignee: String,
    pub instruction: String,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct Plan {
    pub goal: String,
    pub steps: Vec<PlanStep>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("no JSON object found in the output")]
    NoJsonFound,
    #[error("malformed plan: {0}")]
    Malformed(String),
    #[error("plan has no steps")]
    EmptyPlan,
    #[error("step {step} names unknown operator {assignee:?}")]
    UnknownAssignee { step: String, assignee: String },
}

/// Parses `{"goal": ..., "steps": [{"id", "assignee", "instruction"}]}` and
/// checks every assignee against `operators`.
pub fn parse_plan(raw: &str, operators: &[&str]) -> Result<Plan, PlanError> {
    let map = first_json_object(raw).ok_or(PlanError::NoJsonFound)?;
    let plan: Plan = serde_json::from_value(Value::Object(map)).map_err(|e| PlanError::Malformed(e.to_string()))?;
    if plan.steps.is_empty() {
        return Err(PlanError::EmptyPlan);
    }
    for step in &plan.steps {
        if !operators.contains(&step.assignee.as_str()) {
            return Err(PlanError::UnknownAssignee { step: step.id.clone(), assignee: step.assignee.clone() });
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plain_and_fenced() {
        let d = parse_decision(r#"{"reason":"r","command":"pass()"}"#).unwrap();
        assert_eq!((d.reason.as_str(), d.command.as_str()), ("r", "pass()"));
        let fenced = "```json\n{\"reason\":\"r\",\"command\":\"wait(5)\"}\n```";
        assert_eq!(parse_decision(fenced).unwrap().command, "wait(5)");
        let chatty = "Here is my answer: {not json} and {\"reason\": \"x\", \"command\": \"pass()\"} done";
        assert_eq!(parse_decision(chatty).unwrap().reason, "x");
    }

    #[test]
    fn error_classes() {
        assert_eq!(parse_decision("Sure! I will wait."), Err(DecisionError::NoJsonFound));
        assert_eq!(parse_decision(r#"{"reason":"r"}"#), Err(DecisionError::MissingField("command".into())));
        assert_eq!(
            parse_decision(r#"{"reason":"r","command":5}"#),
            Err(DecisionError::NonStringField("command".into()))
        );
        assert_eq!(
            parse_decision(r#"{"reason":"r","command":"pass()","x":1}"#),
            Err(DecisionError::UnexpectedField("x".into()))
        );
    }

    #[test]
    fn plans() {
        let ops = ["op_conveyor", "op_agv"];
        let raw = r#"{"goal":"g","steps":[
            {"id":"1","assignee":"op_conveyor","instruction":"a"},
            {"id":"2","assignee":"op_agv","instruction":"b"}]}"#;
        assert_eq!(parse_plan(raw, &ops).unwrap().steps.len(), 2);
        assert_eq!(parse_plan(r#"{"goal":"g","steps":[]}"#, &ops), Err(PlanError::EmptyPlan));
        assert!(matches!(
            parse_plan(r#"{"goal":"g","steps":[{"id":"1","assignee":"ghost","instruction":"a"}]}"#, &ops),
            Err(PlanError::UnknownAssignee { .. })
        ));
        assert_eq!(parse_plan("no plan", &ops), Err(PlanError::NoJsonFound));
    }

    proptest! {
        #[test]
        fn decision_round_trip(reason in "\\PC{0,40}", command in "\\PC{0,40}") {
            let raw = format_decision(&reason, &command);
            let d = parse_decision(&raw).unwrap();
            prop_assert_eq!(d.reason, reason);
            prop_assert_eq!(d.command, command);
        }
    }
}
