//! Text-generation backends behind one interface.

use std::collections::VecDeque;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::oracle::{OracleError, RuleOracle};
use crate::fixtures;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("replay script has no response left for prompt digest {0}")]
    ReplayExhausted(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("backend configuration: {0}")]
    Config(String),
}

impl From<OracleError> for BackendError {
    fn from(e: OracleError) -> Self {
        BackendError::Config(e.to_string())
    }
}

pub trait Backend: Send {
    fn name(&self) -> String;
    fn complete(&mut self, prompt: &str) -> Result<String, BackendError>;
}

/// Hex SHA-256 of the prompt bytes.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct ReplayRecord {
    pub digest: String,
    pub response: String,
}

/// Returns recorded responses in order, each for the first unused record with
/// the prompt's digest.
#[derive(Clone, Debug, Default)]
pub struct ScriptedReplay {
    name: String,
    records: VecDeque<ReplayRecord>,
}

impl ScriptedReplay {
    pub fn new(name: impl Into<String>, records: Vec<ReplayRecord>) -> Self {
        Self { name: name.into(), records: records.into() }
    }

    pub fn remaining(&self) -> usize {
        self.records.len()
    }
}

impl Backend for ScriptedReplay {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn complete(&mut self, prompt: &str) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        let digest = prompt_digest(prompt);
        let index = self
            .records
            .iter()
            .position(|r| r.digest == digest)
            .ok_or(BackendError::ReplayExhausted(digest))?;
        Ok(self.records.remove(index).expect("index in range").response)
    }
}

/// OpenAI-compatible chat-completion client. One user message per call.
pub struct RemoteApi {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    temperature: f64,
    max_output_tokens: u32,
    retries: u32,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for RemoteApi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteApi")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("temperature", &self.temperature)
            .finish()
    }
}

impl RemoteApi {
    pub fn new(descriptor: &BackendDescriptor) -> Result<Self, BackendError> {
        let endpoint = descriptor.endpoint.clone().ok_or_else(|| BackendError::Config("remote backend needs an endpoint".into()))?;
        let model = descriptor.model.clone().ok_or_else(|| BackendError::Config("remote backend needs a model".into()))?;
        let endpoint = if endpoint.ends_with("/chat/completions") {
            endpoint
        } else {
            format!("{}/chat/completions", endpoint.trim_end_matches('/'))
        };
        let api_key = std::env::var(&descriptor.api_key_env).ok().filter(|k| !k.is_empty());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(descriptor.timeout_s))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            endpoint,
            model,
            api_key,
            temperature: descriptor.temperature,
            max_output_tokens: descriptor.max_output_tokens,
            retries: descriptor.retries,
            client,
        })
    }

    fn attempt(&self, prompt: &str) -> Result<String, BackendError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
        });
        let mut request = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| BackendError::BackendUnavailable(e.without_url().to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(BackendError::BackendUnavailable(format!("HTTP {status}")));
        }
        let value: serde_json::Value =
            response.json().map_err(|e| BackendError::BackendUnavailable(format!("bad response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::BackendUnavailable("response has no message content".into()))
    }
}

impl Backend for RemoteApi {
    fn name(&self) -> String {
        format!("remote:{}", self.model)
    }

    fn complete(&mut self, prompt: &str) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        let mut last = None;
        for attempt in 0..=self.retries {
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "remote backend call failed");
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    RemoteApi,
    ScriptedReplay,
    RuleOracle,
}

fn default_tokens() -> u32 {
    256
}
fn default_retries() -> u32 {
    2
}
fn default_key_env() -> String {
    "CELLPILOT_API_KEY".into()
}
fn default_timeout() -> u64 {
    60
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    /// Report label; defaults to the descriptor string.
    #[serde(default)]
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Transcript path for scripted replay.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<String>,
    /// Oracle rule sets: built-in names (`sop`, `fallback`, `adversarial`) or file paths.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<String>,
    #[serde(default = "default_tokens")]
    pub max_output_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
}

impl BackendDescriptor {
    fn base(kind: BackendKind, label: &str) -> Self {
        Self {
            kind,
            label: label.to_string(),
            endpoint: None,
            model: None,
            script: None,
            rules: Vec::new(),
            max_output_tokens: default_tokens(),
            temperature: 0.0,
            retries: default_retries(),
            api_key_env: default_key_env(),
            timeout_s: default_timeout(),
        }
    }

    pub fn oracle(label: &str, rules: &[&str]) -> Self {
        let mut d = Self::base(BackendKind::RuleOracle, label);
        d.rules = rules.iter().map(|r| r.to_string()).collect();
        d
    }

    /// Parses the short command-line forms:
    ///
    /// * `rule_oracle` (procedure plus fallback rules), `rule_oracle:sop`,
    ///   `rule_oracle:<rules.json>[,<more.json>]`
    /// * `adversarial`
    /// * `replay:<transcript.jsonl>`
    /// * `remote:<model>@<endpoint>`
    /// * `@<descriptor.json>`
    pub fn parse(text: &str) -> Result<Self, BackendError> {
        let text = text.trim();
        if let Some(path) = text.strip_prefix('@') {
            let raw = std::fs::read_to_string(path).map_err(|e| BackendError::Config(format!("{path}: {e}")))?;
            let mut d: Self = serde_json::from_str(&raw).map_err(|e| BackendError::Config(format!("{path}: {e}")))?;
            if d.label.is_empty() {
                d.label = text.to_string();
            }
            return Ok(d);
        }
        match text {
            "rule_oracle" => return Ok(Self::oracle(text, &["sop", "fallback"])),
            "adversarial" => return Ok(Self::oracle(text, &["adversarial"])),
            _ => {}
        }
        if let Some(rest) = text.strip_prefix("rule_oracle:") {
            let rules: Vec<&str> = rest.split(',').filter(|s| !s.is_empty()).collect();
            if rules.is_empty() {
                return Err(BackendError::Config("rule_oracle: needs at least one rule set".into()));
            }
            return Ok(Self::oracle(text, &rules));
        }
        if let Some(path) = text.strip_prefix("replay:") {
            let mut d = Self::base(BackendKind::ScriptedReplay, text);
            d.script = Some(path.to_string());
            return Ok(d);
        }
        if let Some(rest) = text.strip_prefix("remote:") {
            let (model, endpoint) = rest
                .split_once('@')
                .ok_or_else(|| BackendError::Config("expected remote:<model>@<endpoint>".into()))?;
            let mut d = Self::base(BackendKind::RemoteApi, text);
            d.model = Some(model.to_string());
            d.endpoint = Some(endpoint.to_string());
            return Ok(d);
        }
        Err(BackendError::Config(format!("unknown backend descriptor {text:?}")))
    }

    /// Instantiates a fresh backend. Replay scripts are read from the transcript file.
    pub fn build(&self) -> Result<Box<dyn Backend>, BackendError> {
        match self.kind {
            BackendKind::RuleOracle => {
                let texts = self
                    .rules
                    .iter()
                    .map(|r| match fixtures::oracle_rules(r) {
                        Some(text) => Ok(text.to_string()),
                        None => std::fs::read_to_string(r).map_err(|e| BackendError::Config(format!("{r}: {e}"))),
                    })
                    .collect::<Result<Vec<String>, _>>()?;
                let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
                Ok(Box::new(RuleOracle::from_json(self.label.clone(), &refs)?))
            }
            BackendKind::ScriptedReplay => {
                let path = self.script.as_deref().ok_or_else(|| BackendError::Config("replay needs a script".into()))?;
                let raw = std::fs::read_to_string(path).map_err(|e| BackendError::Config(format!("{path}: {e}")))?;
                let transcript = crate::orchestrator::Transcript::from_jsonl(&raw)
                    .map_err(|e| BackendError::Config(format!("{path}: {e}")))?;
                Ok(Box::new(ScriptedReplay::new(self.label.clone(), transcript.replay_records())))
            }
            BackendKind::RemoteApi => Ok(Box::new(RemoteApi::new(self)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_matches_digest_and_exhausts() {
        let mut r = ScriptedReplay::new(
            "r",
            vec![ReplayRecord { digest: prompt_digest("p1"), response: "a".into() }],
        );
        assert_eq!(
            r.complete("p2"),
            Err(BackendError::ReplayExhausted(prompt_digest("p2")))
        );
        assert_eq!(r.complete("p1").unwrap(), "a");
        assert!(matches!(r.complete("p1"), Err(BackendError::ReplayExhausted(_))));
    }

    #[test]
    fn descriptor_forms() {
        assert_eq!(BackendDescriptor::parse("rule_oracle").unwrap().rules, ["sop", "fallback"]);
        assert_eq!(BackendDescriptor::parse("rule_oracle:sop").unwrap().rules, ["sop"]);
        let remote = BackendDescriptor::parse("remote:gpt-4o@http://localhost:9/v1").unwrap();
        assert_eq!(remote.kind, BackendKind::RemoteApi);
        assert_eq!(remote.model.as_deref(), Some("gpt-4o"));
        assert_eq!(remote.temperature, 0.0);
        assert_eq!(BackendDescriptor::parse("replay:t.jsonl").unwrap().script.as_deref(), Some("t.jsonl"));
        assert!(BackendDescriptor::parse("gpt").is_err());
    }

    #[test]
    fn unreachable_remote_is_unavailable() {
        let mut d = BackendDescriptor::parse("remote:m@http://127.0.0.1:9").unwrap();
        d.retries = 0;
        d.timeout_s = 2;
        let mut b = d.build().unwrap();
        assert!(matches!(b.complete("hello"), Err(BackendError::BackendUnavailable(_))));
        assert!(!format!("{:?}", RemoteApi::new(&d).unwrap()).contains("Bearer"));
    }
}
