//! Chronological event log memory with tag-based subscriptions.
//!
//! Every record is instantaneous. Durative facts appear as two records, an
//! opening one ("holds the workpiece") and a closing one ("releases the
//! workpiece"); [`EventLog::state_pair_check`] lists openings that were never
//! closed.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{format_timestamp, Millis};

pub const DEFAULT_WINDOW: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EventLogError {
    #[error("event at {at} ms precedes the last record at {last} ms")]
    TimeRegression { at: Millis, last: Millis },
    #[error("event text must be a single line: {0:?}")]
    MultilineText(String),
    #[error("subscription window must be at least 1")]
    EmptyWindow,
}

/// An event before it is sequenced into the log.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct EventDraft {
    pub at: Millis,
    pub text: String,
    pub source: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl EventDraft {
    pub fn new(at: Millis, source: impl Into<String>, text: impl Into<String>, tags: Vec<String>) -> Self {
        Self { at, text: text.into(), source: source.into(), tags }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub seq: u64,
    pub at: Millis,
    pub timestamp_text: String,
    pub source: String,
    pub text: String,
    pub tags: Vec<String>,
}

impl EventRecord {
    /// `[HH:MM:SS] text`, the form used in prompt excerpts.
    pub fn line(&self) -> String {
        format!("{} {}", self.timestamp_text, self.text)
    }
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

/// An agent's interest scope. An empty tag list subscribes to everything.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Subscription {
    pub agent_id: String,
    #[serde(default)]
    pub include_tags: Vec<String>,
    #[serde(default = "default_window")]
    pub window: usize,
}

impl Subscription {
    pub fn new(agent_id: impl Into<String>, include_tags: Vec<String>, window: usize) -> Result<Self, EventLogError> {
        let sub = Self { agent_id: agent_id.into(), include_tags, window };
        sub.check()?;
        Ok(sub)
    }

    pub fn all(agent_id: impl Into<String>) -> Self {
        Self { agent_id: agent_id.into(), include_tags: Vec::new(), window: DEFAULT_WINDOW }
    }

    pub fn check(&self) -> Result<(), EventLogError> {
        if self.window == 0 {
            Err(EventLogError::EmptyWindow)
        } else {
            Ok(())
        }
    }

    pub fn matches(&self, record: &EventRecord) -> bool {
        self.include_tags.is_empty() || record.tags.iter().any(|t| self.include_tags.contains(t))
    }
}

/// Append-only log. Sequence numbers start at 1.
#[derive(Clone, Debug, Default)]
pub struct EventLog {
    records: Vec<EventRecord>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, draft: EventDraft) -> Result<&EventRecord, EventLogError> {
        if draft.text.contains(['\n', '\r']) {
            return Err(EventLogError::MultilineText(draft.text));
        }
        if let Some(last) = self.records.last() {
            if draft.at < last.at {
                return Err(EventLogError::TimeRegression { at: draft.at, last: last.at });
            }
        }
        let record = EventRecord {
            seq: self.records.len() as u64 + 1,
            at: draft.at,
            timestamp_text: format_timestamp(draft.at),
            source: draft.source,
            text: draft.text,
            tags: draft.tags,
        };
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_seq(&self) -> u64 {
        self.records.len() as u64
    }

    /// Records with `seq > since`, oldest first.
    pub fn since(&self, since: u64) -> &[EventRecord] {
        let start = (since as usize).min(self.records.len());
        &self.records[start..]
    }

    /// The last `window` records visible to the subscription, one per line,
    /// oldest first. No trailing newline.
    pub fn excerpt(&self, subscription: &Subscription) -> String {
        let mut picked: Vec<&EventRecord> = self
            .records
            .iter()
            .rev()
            .filter(|r| subscription.matches(r))
            .take(subscription.window.max(1))
            .collect();
        picked.reverse();
        picked.iter().map(|r| r.line()).collect::<Vec<_>>().join("\n")
    }

    /// Opening records (text contains `open_pattern`) without a later closing
    /// record (text contains `close_pattern`). Closings pair with the oldest
    /// unmatched opening.
    pub fn state_pair_check(&self, open_pattern: &str, close_pattern: &str) -> Vec<&EventRecord> {
        let mut open: Vec<&EventRecord> = Vec::new();
        for record in &self.records {
            if record.text.contains(open_pattern) {
                open.push(record);
            } else if record.text.contains(close_pattern) && !open.is_empty() {
                open.remove(0);
            }
        }
        open
    }

    /// Line-delimited JSON export, one record per line.
    pub fn export_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for record in &self.records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draft(at: Millis, text: &str, tags: &[&str]) -> EventDraft {
        EventDraft::new(at, "test", text, tags.iter().map(|t| t.to_string()).collect())
    }

    #[test]
    fn append_formats_timestamps() {
        let mut log = EventLog::new();
        assert_eq!(log.append(draft(14_000, "a", &[])).unwrap().timestamp_text, "[00:00:14]");
        assert_eq!(log.append(draft(3_600_000, "b", &[])).unwrap().timestamp_text, "[01:00:00]");
    }

    #[test]
    fn equal_times_keep_seq_order() {
        let mut log = EventLog::new();
        log.append(draft(19_000, "first", &[])).unwrap();
        log.append(draft(19_000, "second", &[])).unwrap();
        let seqs: Vec<_> = log.records().iter().map(|r| (r.seq, r.text.as_str())).collect();
        assert_eq!(seqs, [(1, "first"), (2, "second")]);
    }

    #[test]
    fn append_rejects_regression_and_newlines() {
        let mut log = EventLog::new();
        log.append(draft(5_000, "a", &[])).unwrap();
        assert_eq!(
            log.append(draft(4_999, "b", &[])).unwrap_err(),
            EventLogError::TimeRegression { at: 4_999, last: 5_000 }
        );
        assert!(matches!(log.append(draft(6_000, "x\ny", &[])), Err(EventLogError::MultilineText(_))));
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn excerpt_filters_and_windows() {
        let mut log = EventLog::new();
        assert_eq!(log.excerpt(&Subscription::all("a")), "");
        for i in 0..5 {
            log.append(draft(i * 1000, &format!("c{i}"), &["conveyor1"])).unwrap();
        }
        let agv = Subscription::new("a", vec!["agv".into()], 50).unwrap();
        assert_eq!(log.excerpt(&agv), "");
        let last_two = Subscription::new("a", vec!["conveyor1".into()], 2).unwrap();
        assert_eq!(log.excerpt(&last_two), "[00:00:03] c3\n[00:00:04] c4");
        assert_eq!(log.excerpt(&last_two), log.excerpt(&last_two));
    }

    #[test]
    fn zero_window_is_invalid() {
        assert_eq!(Subscription::new("a", vec![], 0).unwrap_err(), EventLogError::EmptyWindow);
    }

    #[test]
    fn since_partitions() {
        let mut log = EventLog::new();
        for i in 0..4 {
            log.append(draft(i, "x", &[])).unwrap();
        }
        assert_eq!(log.since(0).len(), 4);
        assert_eq!(log.since(3)[0].seq, 4);
        assert!(log.since(9).is_empty());
    }

    #[test]
    fn pair_check() {
        let mut log = EventLog::new();
        assert!(log.state_pair_check("holds", "releases").is_empty());
        log.append(draft(0, "the material holder holds the workpiece", &[])).unwrap();
        log.append(draft(5_000, "the material holder releases the workpiece", &[])).unwrap();
        assert!(log.state_pair_check("holds", "releases").is_empty());
        log.append(draft(6_000, "the material holder holds the workpiece", &[])).unwrap();
        let open = log.state_pair_check("holds", "releases");
        assert_eq!(open.len(), 1);
        assert_eq!(open[0].seq, 3);
    }
}
