//! Deterministic stand-in for a language model: regex rules over the event
//! log excerpt embedded in the prompt.

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::backend::{Backend, BackendError};
use super::decision::format_decision;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("oracle file: {0}")]
    Format(String),
    #[error("rule {rule}: bad regex {pattern:?}: {message}")]
    BadRegex { rule: String, pattern: String, message: String },
    #[error("rule {0}: needs either command or response")]
    NoOutput(String),
}

/// What a rule answers. `response` is returned verbatim; otherwise reason and
/// command are wrapped into decision JSON.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
pub struct OracleResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct OracleRule {
    pub id: String,
    /// Regex over the prompt text before the input block; selects the agent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    /// Regex over the newest excerpt line, timestamp stripped.
    pub when: String,
    /// Regex over the line before it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after: Option<String>,
    /// Regex that some excerpt line must match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seen: Option<String>,
    /// Regex that no excerpt line may match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unseen: Option<String>,
    #[serde(flatten)]
    pub output: OracleResponse,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
pub struct OracleFile {
    #[serde(default)]
    pub rules: Vec<OracleRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<OracleResponse>,
}

struct Compiled {
    rule: OracleRule,
    prompt: Option<Regex>,
    when: Regex,
    after: Option<Regex>,
    seen: Option<Regex>,
    unseen: Option<Regex>,
}

pub struct RuleOracle {
    name: String,
    rules: Vec<Compiled>,
    default: OracleResponse,
}

fn compile(rule: &str, pattern: &str) -> Result<Regex, OracleError> {
    Regex::new(pattern).map_err(|e| OracleError::BadRegex {
        rule: rule.to_string(),
        pattern: pattern.to_string(),
        message: e.to_string(),
    })
}

fn compile_opt(rule: &str, pattern: &Option<String>) -> Result<Option<Regex>, OracleError> {
    pattern.as_deref().map(|p| compile(rule, p)).transpose()
}

/// Splits a prompt into (head, excerpt lines without timestamps).
pub fn split_prompt(prompt: &str) -> (&str, Vec<&str>) {
    let Some(start) = prompt.rfind("\nInput:\n") else { return (prompt, Vec::new()) };
    let head = prompt[..start].trim_end();
    let body = &prompt[start + "\nInput:\n".len()..];
    let body = body.strip_suffix("\nOutput:\n").or_else(|| body.strip_suffix("Output:\n")).unwrap_or(body);
    let lines = body
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match l.find("] ") {
            Some(i) if l.starts_with('[') => &l[i + 2..],
            _ => l,
        })
        .collect();
    (head, lines)
}

fn substitute(template: &str, captures: &BTreeMap<String, String>) -> String {
    let mut out = template.to_string();
    for (name, value) in captures {
        out = out.replace(&format!("${{{name}}}"), value);
    }
    out
}

fn collect(re: &Regex, text: &str, into: &mut BTreeMap<String, String>) -> bool {
    let Some(caps) = re.captures(text) else { return false };
    for name in re.capture_names().flatten() {
        if let Some(m) = caps.name(name) {
            into.insert(name.to_string(), m.as_str().to_string());
        }
    }
    true
}

impl RuleOracle {
    pub fn new(name: impl Into<String>, files: Vec<OracleFile>) -> Result<Self, OracleError> {
        let mut rules = Vec::new();
        let mut default = None;
        for file in files {
            for rule in file.rules {
                if rule.output.command.is_none() && rule.output.response.is_none() {
                    return Err(OracleError::NoOutput(rule.id));
                }
                rules.push(Compiled {
                    prompt: compile_opt(&rule.id, &rule.prompt)?,
                    when: compile(&rule.id, &rule.when)?,
                    after: compile_opt(&rule.id, &rule.after)?,
                    seen: compile_opt(&rule.id, &rule.seen)?,
                    unseen: compile_opt(&rule.id, &rule.unseen)?,
                    rule,
                });
            }
            if file.default.is_some() {
                default = file.default;
            }
        }
        let default = default.unwrap_or(OracleResponse {
            reason: Some("No rule applies; nothing to do.".into()),
            command: Some("pass()".into()),
            response: None,
        });
        Ok(Self { name: name.into(), rules, default })
    }

    pub fn from_json(name: impl Into<String>, texts: &[&str]) -> Result<Self, OracleError> {
        let files = texts
            .iter()
            .map(|t| serde_json::from_str(t).map_err(|e| OracleError::Format(e.to_string())))
            .collect::<Result<Vec<OracleFile>, _>>()?;
        Self::new(name, files)
    }

    /// Id of the first matching rule and its captures.
    fn select(&self, prompt: &str) -> Option<(&Compiled, BTreeMap<String, String>)> {
        let (head, lines) = split_prompt(prompt);
        let last = *lines.last()?;
        let previous = lines.len().checked_sub(2).map(|i| lines[i]);
        'rules: for c in &self.rules {
            let mut caps = BTreeMap::new();
            if c.prompt.as_ref().is_some_and(|re| !re.is_match(head)) {
                continue;
            }
            if !collect(&c.when, last, &mut caps) {
                continue;
            }
            if let Some(re) = &c.after {
                match previous {
                    Some(p) if collect(re, p, &mut caps) => {}
                    _ => continue,
                }
            }
            if let Some(re) = &c.seen {
                let mut hit = false;
                for line in lines.iter().rev() {
                    if collect(re, line, &mut caps) {
                        hit = true;
                        break;
                    }
                }
                if !hit {
                    continue 'rules;
                }
            }
            if c.unseen.as_ref().is_some_and(|re| lines.iter().any(|l| re.is_match(l))) {
                continue;
            }
            return Some((c, caps));
        }
        None
    }

    /// Id of the rule that would answer `prompt`, `None` for the default.
    pub fn matching_rule(&self, prompt: &str) -> Option<&str> {
        self.select(prompt).map(|(c, _)| c.rule.id.as_str())
    }

    pub fn respond(&self, prompt: &str) -> String {
        let (output, caps) = match self.select(prompt) {
            Some((c, caps)) => (&c.rule.output, caps),
            None => (&self.default, BTreeMap::new()),
        };
        if let Some(raw) = &output.response {
            return substitute(raw, &caps);
        }
        let reason = substitute(output.reason.as_deref().unwrap_or(""), &caps);
        let command = substitute(output.command.as_deref().unwrap_or("pass()"), &caps);
        format_decision(&reason, &command)
    }
}

impl Backend for RuleOracle {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn complete(&mut self, prompt: &str) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        Ok(self.respond(prompt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle() -> RuleOracle {
        RuleOracle::from_json(
            "t",
            &[r#"{"rules":[
                {"id":"busy","when":"busy processing","command":"wait(5)","reason":"busy"},
                {"id":"again","when":"calls the operation 'wait\\(5\\)'","after":"busy","command":"ask_next_operator()","reason":"r"},
                {"id":"go","when":"^AGV (?P<agv>\\S+) loads","seen":"to (?P<dest>\\w+)\\.$","command":"move_to(${dest})","reason":"${agv}"},
                {"id":"prose","prompt":"grumpy","when":".","response":"No."}
            ]}"#],
        )
        .unwrap()
    }

    fn prompt(head: &str, lines: &[&str]) -> String {
        format!("{head}\n\nInput:\n{}\nOutput:\n", lines.join("\n"))
    }

    #[test]
    fn last_line_and_context() {
        let o = oracle();
        let p = prompt("x", &["[00:00:21] The next operator agent is busy processing another workpiece."]);
        assert_eq!(o.respond(&p), r#"{"command":"wait(5)","reason":"busy"}"#);
        let p = prompt(
            "x",
            &["[00:00:21] The next operator agent is busy processing another workpiece.", "[00:00:21] Operator agent calls the operation 'wait(5)'."],
        );
        assert_eq!(o.matching_rule(&p), Some("again"));
        let p = prompt("x", &["[00:00:21] Operator agent calls the operation 'wait(5)'."]);
        assert_eq!(o.matching_rule(&p), None);
    }

    #[test]
    fn captures_fill_templates() {
        let o = oracle();
        let p = prompt("x", &["[00:01:00] Plan step 2 for op_agv: Transport workpiece W1 to conveyor2.", "[00:01:30] AGV agv1 loads workpiece W1."]);
        assert_eq!(o.respond(&p), r#"{"command":"move_to(conveyor2)","reason":"agv1"}"#);
    }

    #[test]
    fn prompt_selector_and_default() {
        let o = oracle();
        assert_eq!(o.respond(&prompt("grumpy agent", &["[00:00:01] anything"])), "No.");
        assert!(o.respond(&prompt("x", &[])).contains("pass()"));
    }

    #[test]
    fn split_strips_timestamps() {
        let (head, lines) = split_prompt("a\n\nInput:\n\n// x\n\nOutput:\n\nb\n\nInput:\n[00:00:14] one\n[00:00:15] two\nOutput:\n");
        assert!(head.ends_with('b'));
        assert_eq!(lines, ["one", "two"]);
    }
}
