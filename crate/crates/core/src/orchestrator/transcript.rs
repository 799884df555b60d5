//! Line-delimited session transcripts.

use serde::{Deserialize, Serialize};

use super::{ApprovalAction, RunConfig, RunStatus};
use crate::agent::{Plan, ReplayRecord};
use crate::event_log::EventRecord;
use crate::registry::{ExecutionResult, Invocation};
use crate::scenario::ScenarioSpec;
use crate::time::Millis;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TranscriptRecord {
    Header {
        scenario: Box<ScenarioSpec>,
        backend: String,
        config: RunConfig,
    },
    Event {
        record: EventRecord,
    },
    Prompt {
        at: Millis,
        agent: String,
        decision: u64,
        log_seq: u64,
        digest: String,
        text: String,
    },
    Response {
        at: Millis,
        agent: String,
        decision: u64,
        raw: String,
    },
    BackendFailure {
        at: Millis,
        agent: String,
        decision: u64,
        error: String,
    },
    Decision {
        at: Millis,
        agent: String,
        decision: u64,
        reason: String,
        command: String,
    },
    Verdict {
        at: Millis,
        agent: String,
        decision: u64,
        log_seq: u64,
        executable: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        class: Option<String>,
        detail: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        invocation: Option<Invocation>,
    },
    Approval {
        at: Millis,
        approval: u64,
        agent: String,
        decision: u64,
        action: ApprovalAction,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        actor: Option<String>,
    },
    Execution {
        at: Millis,
        agent: String,
        decision: u64,
        result: ExecutionResult,
    },
    Plan {
        at: Millis,
        agent: String,
        decision: u64,
        plan: Plan,
    },
    PlanFailure {
        at: Millis,
        agent: String,
        decision: u64,
        error: String,
    },
    Outcome {
        at: Millis,
        status: RunStatus,
        detail: String,
    },
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
pub struct Transcript {
    pub records: Vec<TranscriptRecord>,
}

impl Transcript {
    pub fn push(&mut self, record: TranscriptRecord) {
        self.records.push(record);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("transcript records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { records })
    }

    pub fn header(&self) -> Option<(&ScenarioSpec, &str, &RunConfig)> {
        self.records.iter().find_map(|r| match r {
            TranscriptRecord::Header { scenario, backend, config } => Some((scenario.as_ref(), backend.as_str(), config)),
            _ => None,
        })
    }

    /// (prompt digest, response) pairs in call order.
    pub fn replay_records(&self) -> Vec<ReplayRecord> {
        let mut out = Vec::new();
        let mut digest = None;
        for r in &self.records {
            match r {
                TranscriptRecord::Prompt { digest: d, .. } => digest = Some(d.clone()),
                TranscriptRecord::Response { raw, .. } => {
                    if let Some(d) = digest.take() {
                        out.push(ReplayRecord { digest: d, response: raw.clone() });
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Event records in log order.
    pub fn events(&self) -> impl Iterator<Item = &EventRecord> {
        self.records.iter().filter_map(|r| match r {
            TranscriptRecord::Event { record } => Some(record),
            _ => None,
        })
    }

    pub fn outcome(&self) -> Option<RunStatus> {
        self.records.iter().rev().find_map(|r| match r {
            TranscriptRecord::Outcome { status, .. } => Some(*status),
            _ => None,
        })
    }

    /// JSONL of everything but the header, for comparing runs with different backends.
    pub fn body_jsonl(&self) -> String {
        let body = Transcript {
            records: self
                .records
                .iter()
                .filter(|r| !matches!(r, TranscriptRecord::Header { .. }))
                .cloned()
                .collect(),
        };
        body.to_jsonl()
    }
}

/// First differing line of two transcript bodies, 1-based, with both sides.
pub fn first_difference(a: &str, b: &str) -> Option<(usize, String, String)> {
    let mut left = a.lines();
    let mut right = b.lines();
    let mut line = 0;
    loop {
        line += 1;
        match (left.next(), right.next()) {
            (None, None) => return None,
            (l, r) if l == r => continue,
            (l, r) => return Some((line, l.unwrap_or("<end>").to_string(), r.unwrap_or("<end>").to_string())),
        }
    }
}
