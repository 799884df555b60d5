//! Live sessions: each owns one plant and is driven on its own thread, with
//! an event mirror that readers can poll without touching the session lock.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use cellpilot::agent::BackendDescriptor;
use cellpilot::event_log::EventRecord;
use cellpilot::eval::EvalSetup;
use cellpilot::fixtures;
use cellpilot::orchestrator::{ApprovalMode, EventSink, OrchestratorError, RunConfig, RunStatus, Session};
use cellpilot::scenario::{load_suite, ScenarioSpec, SuiteFile};
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

/// Virtual milliseconds advanced per driver tick when pacing is on.
const TICK_MS: u64 = 100;

/// Bundled scenario name, `<dir>/<name>.json`, or a path to a scenario file.
pub fn resolve_scenario(name: &str, dir: Option<&Path>) -> Result<ScenarioSpec, String> {
    if let Some(spec) = fixtures::scenario(name) {
        return Ok(spec);
    }
    let mut candidates = Vec::new();
    if let Some(dir) = dir {
        candidates.push(dir.join(format!("{name}.json")));
    }
    candidates.push(PathBuf::from(name));
    for path in candidates {
        if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            return ScenarioSpec::from_json(&text).map_err(|e| format!("{}: {e}", path.display()));
        }
    }
    Err(format!("unknown scenario {name:?}"))
}

/// Bundled suite name or a path to a suite file.
pub fn resolve_suite(name: &str) -> Result<SuiteFile, String> {
    if let Some(suite) = fixtures::suite(name) {
        return Ok(suite);
    }
    load_suite(Path::new(name)).map_err(|e| e.to_string())
}

#[derive(Default)]
pub struct EventMirror {
    records: RwLock<Vec<EventRecord>>,
    notify: Notify,
}

impl EventMirror {
    /// Records with seq greater than `since`, in order.
    pub fn since(&self, since: u64) -> Vec<EventRecord> {
        let records = self.records.read().unwrap();
        let start = (since as usize).min(records.len());
        records[start..].to_vec()
    }

    pub fn last_seq(&self) -> u64 {
        self.records.read().unwrap().len() as u64
    }

    /// Resolves when a record is published after this call.
    pub async fn changed(&self) {
        self.notify.notified().await
    }
}

struct MirrorSink(Arc<EventMirror>);

impl EventSink for MirrorSink {
    fn publish(&mut self, record: &EventRecord) {
        self.0.records.write().unwrap().push(record.clone());
        self.0.notify.notify_waiters();
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum HandleStatus {
    Running,
    AwaitingApproval,
    Finished,
    Failed,
}

impl From<RunStatus> for HandleStatus {
    fn from(s: RunStatus) -> Self {
        match s {
            RunStatus::Running => HandleStatus::Running,
            RunStatus::AwaitingApproval => HandleStatus::AwaitingApproval,
            RunStatus::Finished | RunStatus::TimeLimit | RunStatus::MaxDecisions => HandleStatus::Finished,
            RunStatus::Deadlock => HandleStatus::Failed,
        }
    }
}

#[derive(Serialize, Clone, Debug)]
pub struct SessionHandle {
    pub id: String,
    pub scenario: String,
    pub status: HandleStatus,
    pub run_status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Unix milliseconds.
    pub created_at: u64,
    pub backend: String,
}

pub struct LiveSession {
    pub id: String,
    pub scenario: String,
    pub backend: String,
    pub created_at: u64,
    /// Virtual ms per wall-clock ms; 0 runs unpaced.
    pub speed: f64,
    pub session: Mutex<Session>,
    pub mirror: Arc<EventMirror>,
    status: RwLock<(RunStatus, Option<String>)>,
    driving: AtomicBool,
}

impl LiveSession {
    pub fn handle(&self) -> SessionHandle {
        let (run_status, error) = self.status.read().unwrap().clone();
        SessionHandle {
            id: self.id.clone(),
            scenario: self.scenario.clone(),
            status: run_status.into(),
            run_status,
            error,
            created_at: self.created_at,
            backend: self.backend.clone(),
        }
    }

    pub fn run_status(&self) -> RunStatus {
        self.status.read().unwrap().0
    }

    fn record(&self, outcome: &Result<RunStatus, OrchestratorError>) {
        let value = match outcome {
            Ok(s) => (*s, None),
            Err(OrchestratorError::ScenarioDeadlock { .. }) => (RunStatus::Deadlock, outcome.as_ref().err().map(|e| e.to_string())),
            Err(e) => (RunStatus::Deadlock, Some(e.to_string())),
        };
        *self.status.write().unwrap() = value;
    }

    /// Re-reads the status after a handler changed the session.
    pub fn refresh(&self) {
        let status = self.session.lock().unwrap().status();
        let mut guard = self.status.write().unwrap();
        if guard.1.is_none() {
            guard.0 = status;
        }
    }

    /// Starts the driver thread unless one is running.
    pub fn kick(self: &Arc<Self>) {
        if self.driving.swap(true, Ordering::SeqCst) {
            return;
        }
        let live = Arc::clone(self);
        std::thread::spawn(move || live.drive());
    }

    fn drive(self: Arc<Self>) {
        loop {
            let outcome = {
                let mut session = self.session.lock().unwrap();
                if self.speed > 0.0 {
                    let next = session.now() + TICK_MS;
                    session.run_until(next)
                } else {
                    session.run()
                }
            };
            self.record(&outcome);
            if outcome == Ok(RunStatus::Running) {
                std::thread::sleep(Duration::from_secs_f64(TICK_MS as f64 / self.speed / 1000.0));
                continue;
            }
            self.driving.store(false, Ordering::SeqCst);
            // a handler may have unblocked the session while we were stopping
            let runnable = self.session.lock().unwrap().status() == RunStatus::Running;
            if !runnable || self.driving.swap(true, Ordering::SeqCst) {
                return;
            }
        }
    }
}

#[derive(Deserialize, Debug, Default)]
pub struct CreateSession {
    pub scenario: String,
    #[serde(default)]
    pub backend: Option<String>,
    #[serde(default)]
    pub approval: Option<ApprovalMode>,
    #[serde(default)]
    pub speed: Option<f64>,
    #[serde(default)]
    pub config: Option<RunConfig>,
}

pub struct SessionManager {
    sessions: RwLock<BTreeMap<String, Arc<LiveSession>>>,
    next_id: AtomicU64,
    pub setup: EvalSetup,
    pub default_backend: String,
    pub scenario_dir: Option<PathBuf>,
    pub default_speed: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum CreateError {
    #[error("{0}")]
    Scenario(String),
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Setup(String),
}

impl SessionManager {
    pub fn new(setup: EvalSetup, default_backend: impl Into<String>, scenario_dir: Option<PathBuf>, default_speed: f64) -> Self {
        Self {
            sessions: RwLock::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
            setup,
            default_backend: default_backend.into(),
            scenario_dir,
            default_speed,
        }
    }

    pub fn create(&self, req: CreateSession) -> Result<Arc<LiveSession>, CreateError> {
        let scenario = resolve_scenario(&req.scenario, self.scenario_dir.as_deref()).map_err(CreateError::Scenario)?;
        let descriptor_text = req.backend.unwrap_or_else(|| self.default_backend.clone());
        let descriptor = BackendDescriptor::parse(&descriptor_text).map_err(|e| CreateError::Backend(e.to_string()))?;
        let backend = descriptor.build().map_err(|e| CreateError::Backend(e.to_string()))?;
        let mut config = req.config.unwrap_or_else(|| self.setup.config.clone());
        if let Some(mode) = req.approval {
            config.approval_mode = mode;
        }
        let speed = req.speed.unwrap_or(self.default_speed);
        if !(speed.is_finite() && speed >= 0.0) {
            return Err(CreateError::Setup(format!("speed must be a non-negative number, got {speed}")));
        }
        let mut session = Session::new(
            scenario.clone(),
            config,
            self.setup.registry.clone(),
            self.setup.rules.clone(),
            &self.setup.agents,
            backend,
        )
        .map_err(|e| CreateError::Setup(e.to_string()))?;
        let mirror = Arc::new(EventMirror::default());
        session.set_sink(Box::new(MirrorSink(Arc::clone(&mirror))));
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let live = Arc::new(LiveSession {
            id: id.clone(),
            scenario: scenario.id.clone(),
            backend: descriptor.label.clone(),
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0),
            speed,
            session: Mutex::new(session),
            mirror,
            status: RwLock::new((RunStatus::Running, None)),
            driving: AtomicBool::new(false),
        });
        self.sessions.write().unwrap().insert(id, Arc::clone(&live));
        live.kick();
        Ok(live)
    }

    pub fn get(&self, id: &str) -> Option<Arc<LiveSession>> {
        self.sessions.read().unwrap().get(id).cloned()
    }

    pub fn list(&self) -> Vec<SessionHandle> {
        self.sessions.read().unwrap().values().map(|s| s.handle()).collect()
    }
}

/// Gateway-wide approval id: `<session>-a<n>`.
pub fn approval_key(session: &str, id: u64) -> String {
    format!("{session}-a{id}")
}

pub fn parse_approval_key(key: &str) -> Option<(&str, u64)> {
    let (session, n) = key.rsplit_once("-a")?;
    Some((session, n.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn approval_keys_round_trip() {
        assert_eq!(parse_approval_key(&approval_key("s12", 3)), Some(("s12", 3)));
        assert_eq!(parse_approval_key("s1-ax"), None);
        assert_eq!(parse_approval_key("nope"), None);
    }

    #[test]
    fn unpaced_session_runs_to_completion() {
        let m = SessionManager::new(EvalSetup::bundled(), "rule_oracle", None, 0.0);
        let live = m.create(CreateSession { scenario: "golden_handover".into(), ..Default::default() }).unwrap();
        for _ in 0..200 {
            if live.handle().status == HandleStatus::Finished {
                break;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        assert_eq!(live.handle().status, HandleStatus::Finished);
        let first = &live.mirror.since(0)[0];
        assert_eq!(first.line(), "[00:00:14] Sensor BG56 detects an object at the entrance.");
    }

    #[test]
    fn unknown_scenario_is_refused() {
        let m = SessionManager::new(EvalSetup::bundled(), "rule_oracle", None, 0.0);
        let err = m.create(CreateSession { scenario: "nope".into(), ..Default::default() }).err().unwrap();
        assert!(matches!(err, CreateError::Scenario(_)));
    }
}
