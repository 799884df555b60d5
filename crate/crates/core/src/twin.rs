//! Digital-twin data layer: the signal pool and the observer that turns raw
//! signal changes into natural-language event drafts.
//!
//! Rules are declarative. Each rule names an address glob (`*` matches one
//! dotted segment, `**` any number of segments), optional tests on the old
//! and new value, optional guards on the current value of other signals, and
//! a text template. Templates may use these placeholders:
//!
//! | placeholder   | value                                   |
//! |---------------|-----------------------------------------|
//! | `{unit}`      | first address segment (station or AGV)  |
//! | `{component}` | second address segment                  |
//! | `{tag}`       | last address segment                    |
//! | `{address}`   | full address                            |
//! | `{old}`       | previous value (empty when none)        |
//! | `{new}`       | new value                               |

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_log::EventDraft;
use crate::time::Millis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TwinError {
    #[error("write to {address} at {at} ms precedes the last write at {last} ms")]
    TimeRegression { address: String, at: Millis, last: Millis },
    #[error("invalid signal address {0:?}")]
    InvalidAddress(String),
    #[error("rule id {0:?} is already registered")]
    DuplicateRuleId(String),
    #[error("rule {rule:?}: {message}")]
    TemplateResolutionFailure { rule: String, message: String },
    #[error("rule {rule:?}: invalid address pattern {pattern:?}")]
    InvalidPattern { rule: String, pattern: String },
    #[error("rule file: {0}")]
    Format(String),
}

/// Value carried by a signal.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(untagged)]
pub enum SignalValue {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl SignalValue {
    pub fn text(value: impl Into<String>) -> Self {
        SignalValue::Text(value.into())
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            SignalValue::Bool(b) => Some(*b),
            _ => None,
        }
    }
}

impl fmt::Display for SignalValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalValue::Bool(b) => write!(f, "{b}"),
            SignalValue::Number(n) => write!(f, "{n}"),
            SignalValue::Text(t) => f.write_str(t),
        }
    }
}

impl From<bool> for SignalValue {
    fn from(value: bool) -> Self {
        SignalValue::Bool(value)
    }
}

impl From<&str> for SignalValue {
    fn from(value: &str) -> Self {
        SignalValue::Text(value.to_string())
    }
}

fn address_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z0-9_]+(\.[A-Za-z0-9_]+)*$").unwrap())
}

pub fn is_valid_address(address: &str) -> bool {
    address_regex().is_match(address)
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Signal {
    pub address: String,
    pub value: SignalValue,
    pub at: Millis,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SignalChange {
    pub address: String,
    /// `None` for the first write of an address.
    pub old_value: Option<SignalValue>,
    pub new_value: SignalValue,
    pub at: Millis,
}

/// Centralized signal store: current value per address plus the append-only
/// change history.
#[derive(Serialize, Clone, Debug, Default)]
pub struct DataPool {
    current: BTreeMap<String, Signal>,
    history: Vec<SignalChange>,
    last_write: Millis,
}

impl DataPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Writes a value. Returns the change when the value differs from the
    /// stored one (or the address was unknown).
    pub fn update_signal(
        &mut self,
        address: &str,
        value: SignalValue,
        at: Millis,
    ) -> Result<Option<SignalChange>, TwinError> {
        if !is_valid_address(address) {
            return Err(TwinError::InvalidAddress(address.to_string()));
        }
        if at < self.last_write {
            return Err(TwinError::TimeRegression {
                address: address.to_string(),
                at,
                last: self.last_write,
            });
        }
        self.last_write = at;
        let old_value = match self.current.get(address) {
            Some(signal) if signal.value == value => return Ok(None),
            Some(signal) => Some(signal.value.clone()),
            None => None,
        };
        self.current.insert(
            address.to_string(),
            Signal { address: address.to_string(), value: value.clone(), at },
        );
        let change = SignalChange { address: address.to_string(), old_value, new_value: value, at };
        self.history.push(change.clone());
        Ok(Some(change))
    }

    /// Writes every change's new value; returns the changes the pool accepted
    /// as real changes, in input order.
    pub fn apply(&mut self, changes: &[SignalChange]) -> Result<Vec<SignalChange>, TwinError> {
        let mut accepted = Vec::new();
        for change in changes {
            if let Some(c) = self.update_signal(&change.address, change.new_value.clone(), change.at)? {
                accepted.push(c);
            }
        }
        Ok(accepted)
    }

    pub fn get(&self, address: &str) -> Option<&SignalValue> {
        self.current.get(address).map(|s| &s.value)
    }

    pub fn current(&self) -> &BTreeMap<String, Signal> {
        &self.current
    }

    pub fn history(&self) -> &[SignalChange] {
        &self.history
    }
}

/// Equality test against a signal value, `{"eq": v}` or `{"ne": v}`.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(rename_all = "lowercase")]
pub enum ValueTest {
    Eq(SignalValue),
    Ne(SignalValue),
}

impl ValueTest {
    fn accepts(&self, value: Option<&SignalValue>) -> bool {
        match self {
            ValueTest::Eq(expected) => value == Some(expected),
            ValueTest::Ne(expected) => value != Some(expected),
        }
    }
}

/// Condition on the current pool value of another signal. The address may
/// use the template placeholders of the matched change.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Guard {
    pub address: String,
    #[serde(flatten)]
    pub test: ValueTest,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ChangeMatch {
    pub address: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<ValueTest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<ValueTest>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub when: Vec<Guard>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct EnrichmentRule {
    pub id: String,
    #[serde(rename = "match")]
    pub matcher: ChangeMatch,
    pub template: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default = "default_source")]
    pub source: String,
}

fn default_source() -> String {
    "data_observer".to_string()
}

const PLACEHOLDERS: [&str; 6] = ["unit", "component", "tag", "address", "old", "new"];

fn check_template(rule: &str, template: &str) -> Result<(), TwinError> {
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| TwinError::TemplateResolutionFailure {
            rule: rule.to_string(),
            message: format!("unclosed placeholder in {template:?}"),
        })?;
        let name = &after[..close];
        if !PLACEHOLDERS.contains(&name) {
            return Err(TwinError::TemplateResolutionFailure {
                rule: rule.to_string(),
                message: format!("unknown placeholder {{{name}}}"),
            });
        }
        rest = &after[close + 1..];
    }
    if rest.contains('}') {
        return Err(TwinError::TemplateResolutionFailure {
            rule: rule.to_string(),
            message: format!("stray '}}' in {template:?}"),
        });
    }
    Ok(())
}

fn fill(template: &str, change: &SignalChange) -> String {
    let segments: Vec<&str> = change.address.split('.').collect();
    let old = change.old_value.as_ref().map(ToString::to_string).unwrap_or_default();
    template
        .replace("{unit}", segments.first().copied().unwrap_or(""))
        .replace("{component}", segments.get(1).copied().unwrap_or(""))
        .replace("{tag}", segments.last().copied().unwrap_or(""))
        .replace("{address}", &change.address)
        .replace("{old}", &old)
        .replace("{new}", &change.new_value.to_string())
}

fn glob_to_regex(pattern: &str) -> Option<Regex> {
    if pattern.is_empty() {
        return None;
    }
    if pattern == "**" {
        return Regex::new(r"^[A-Za-z0-9_]+(\.[A-Za-z0-9_]+)*$").ok();
    }
    let mut out = String::from("^");
    let mut leading_any = false;
    for (i, segment) in pattern.split('.').enumerate() {
        if segment.is_empty() {
            return None;
        }
        if segment == "**" {
            // zero or more whole segments, including the separator
            if i == 0 {
                out.push_str(r"(?:[A-Za-z0-9_]+\.)*");
                leading_any = true;
            } else {
                out.push_str(r"(?:\.[A-Za-z0-9_]+)*");
            }
            continue;
        }
        if i > 0 && !(i == 1 && leading_any) {
            out.push_str(r"\.");
        }
        for ch in segment.chars() {
            match ch {
                '*' => out.push_str("[A-Za-z0-9_]*"),
                c if c.is_ascii_alphanumeric() || c == '_' => out.push(c),
                _ => return None,
            }
        }
    }
    out.push('$');
    Regex::new(&out).ok()
}

/// Ordered rule list. Evaluation order is list order; every matching rule fires.
#[derive(Clone, Debug, Default)]
pub struct RuleSet {
    rules: Vec<EnrichmentRule>,
    compiled: Vec<Regex>,
}

#[derive(Deserialize)]
struct RuleFile {
    rules: Vec<EnrichmentRule>,
}

impl RuleSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads a rule file `{"rules": [...]}`; each rule goes through `register_rule`.
    pub fn from_json(text: &str) -> Result<Self, TwinError> {
        let file: RuleFile = serde_json::from_str(text).map_err(|e| TwinError::Format(e.to_string()))?;
        let mut set = RuleSet::new();
        for rule in file.rules {
            set.register_rule(rule)?;
        }
        Ok(set)
    }

    pub fn register_rule(&mut self, rule: EnrichmentRule) -> Result<(), TwinError> {
        if self.rules.iter().any(|r| r.id == rule.id) {
            return Err(TwinError::DuplicateRuleId(rule.id));
        }
        let compiled = glob_to_regex(&rule.matcher.address).ok_or_else(|| TwinError::InvalidPattern {
            rule: rule.id.clone(),
            pattern: rule.matcher.address.clone(),
        })?;
        check_template(&rule.id, &rule.template)?;
        for tag in &rule.tags {
            check_template(&rule.id, tag)?;
        }
        for guard in &rule.matcher.when {
            check_template(&rule.id, &guard.address)?;
        }
        self.rules.push(rule);
        self.compiled.push(compiled);
        Ok(())
    }

    pub fn rules(&self) -> &[EnrichmentRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    fn matches(&self, index: usize, change: &SignalChange, pool: &DataPool) -> bool {
        let rule = &self.rules[index];
        if !self.compiled[index].is_match(&change.address) {
            return false;
        }
        if let Some(test) = &rule.matcher.from {
            if !test.accepts(change.old_value.as_ref()) {
                return false;
            }
        }
        if let Some(test) = &rule.matcher.to {
            if !test.accepts(Some(&change.new_value)) {
                return false;
            }
        }
        rule.matcher.when.iter().all(|guard| {
            let address = fill(&guard.address, change);
            guard.test.accepts(pool.get(&address))
        })
    }

    /// Enriches changes into event drafts. Drafts are ordered by time, then by
    /// change order, then by rule order. Guards read `pool`, which should
    /// already contain the changes.
    pub fn observe(&self, changes: &[SignalChange], pool: &DataPool) -> Vec<EventDraft> {
        let mut indexed: Vec<(usize, &SignalChange)> = changes.iter().enumerate().collect();
        indexed.sort_by_key(|(i, c)| (c.at, *i));
        let mut drafts = Vec::new();
        for (_, change) in indexed {
            for index in 0..self.rules.len() {
                if !self.matches(index, change, pool) {
                    continue;
                }
                let rule = &self.rules[index];
                let mut seen = HashSet::new();
                let tags = rule
                    .tags
                    .iter()
                    .map(|t| fill(t, change))
                    .filter(|t| seen.insert(t.clone()))
                    .collect();
                drafts.push(EventDraft {
                    at: change.at,
                    text: fill(&rule.template, change),
                    source: rule.source.clone(),
                    tags,
                });
            }
        }
        drafts
    }
}
