//! The control loop: plant steps feed the data pool, the observer turns
//! changes into log lines, subscribed agents are prompted, their commands are
//! validated, optionally approved, and executed.

mod transcript;

use std::collections::VecDeque;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use transcript::{first_difference, Transcript, TranscriptRecord};

use crate::agent::{
    build_prompt, parse_decision, parse_plan, prompt_digest, AgentLevel, AgentSpec, Backend, Plan, PlanStep,
    ScriptedReplay,
};
use crate::event_log::{EventDraft, EventLog, EventLogError, EventRecord};
use crate::plant::{PlantError, PlantState, SUB_STEP_MS};
use crate::registry::{execute, ExecutionResult, Invocation, Registry};
use crate::scenario::{ActionKind, ScenarioSpec, TimedAction};
use crate::time::Millis;
use crate::twin::{DataPool, RuleSet, SignalChange, TwinError};

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalMode {
    #[default]
    Auto,
    Human,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecisionTrigger {
    #[default]
    OnEvent,
    /// Waits until no new matching event arrived for `ms` before prompting.
    OnEventDebounced { ms: Millis },
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum InferencePause {
    /// Virtual time stands still while an agent thinks.
    #[default]
    PauseClock,
    /// Time runs on for `inference_latency_ms`; the command executes afterwards.
    BufferEvents,
}

fn default_latency() -> Millis {
    1_000
}
fn default_max_decisions() -> u64 {
    200
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct RunConfig {
    #[serde(default)]
    pub approval_mode: ApprovalMode,
    #[serde(default)]
    pub decision_trigger: DecisionTrigger,
    #[serde(default)]
    pub inference_pause: InferencePause,
    #[serde(default = "default_latency")]
    pub inference_latency_ms: Millis,
    #[serde(default = "default_max_decisions")]
    pub max_decisions: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            approval_mode: ApprovalMode::Auto,
            decision_trigger: DecisionTrigger::OnEvent,
            inference_pause: InferencePause::PauseClock,
            inference_latency_ms: default_latency(),
            max_decisions: default_max_decisions(),
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    AwaitingApproval,
    Finished,
    TimeLimit,
    MaxDecisions,
    Deadlock,
}

impl RunStatus {
    pub fn is_done(self) -> bool {
        !matches!(self, RunStatus::Running | RunStatus::AwaitingApproval)
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalAction {
    Requested,
    Approved,
    Rejected,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalStatus {
    Pending,
    Approved,
    Rejected,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Approved,
    Rejected,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct PendingApproval {
    pub id: u64,
    pub agent: String,
    pub decision: u64,
    pub reason: String,
    pub invocation: Invocation,
    pub created_at: Millis,
    pub status: ApprovalStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_by: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ExecutionResult>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestratorError {
    #[error("scenario deadlock at {at} ms: nothing left to happen and the terminal event never occurred")]
    ScenarioDeadlock { at: Millis },
    #[error("setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Log(#[from] EventLogError),
    #[error(transparent)]
    Twin(#[from] TwinError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("unknown approval {0}")]
    UnknownApproval(u64),
    #[error("approval {0} is already resolved")]
    AlreadyResolved(u64),
    #[error("task text is empty")]
    EmptyTask,
    #[error("no manager agent in this session")]
    NoManager,
    #[error("plan could not be parsed: {0}")]
    PlanParseFailure(String),
}

/// Receives every appended record, e.g. to mirror the log for readers that
/// must not wait for the session lock.
pub trait EventSink: Send {
    fn publish(&mut self, record: &EventRecord);
}

struct InFlight {
    execute_at: Millis,
    decision: u64,
    reason: String,
    invocation: Invocation,
}

struct AgentState {
    spec: AgentSpec,
    last_seen: u64,
    hold_until: Option<Millis>,
    debounce_at: Option<Millis>,
    in_flight: Option<InFlight>,
    active_step: Option<PlanStep>,
}

#[derive(Serialize, Clone, Debug, PartialEq)]
pub struct AgentSnapshot {
    pub id: String,
    pub level: AgentLevel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub station: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hold_until: Option<Millis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub active_step: Option<PlanStep>,
}

#[derive(Serialize, Clone, Debug)]
pub struct SessionState<'a> {
    pub scenario: &'a str,
    pub at: Millis,
    pub status: RunStatus,
    pub plant: &'a PlantState,
    pub signals: crate::plant::SignalSnapshot,
    pub agents: Vec<AgentSnapshot>,
    pub plans: &'a [Plan],
    pub alerts: &'a [String],
    pub pending_approvals: Vec<&'a PendingApproval>,
}

pub struct Session {
    scenario: ScenarioSpec,
    config: RunConfig,
    registry: Registry,
    rules: RuleSet,
    backend: Box<dyn Backend>,
    agents: Vec<AgentState>,
    plant: PlantState,
    pool: DataPool,
    log: EventLog,
    pending_events: Vec<EventDraft>,
    actions: VecDeque<TimedAction>,
    approvals: Vec<PendingApproval>,
    transcript: Transcript,
    terminal: Option<Regex>,
    terminal_hit: bool,
    status: RunStatus,
    next_decision: u64,
    decisions: u64,
    plans: Vec<Plan>,
    alerts: Vec<String>,
    sink: Option<Box<dyn EventSink>>,
    pause_at: Option<Millis>,
}

impl Session {
    pub fn new(
        scenario: ScenarioSpec,
        config: RunConfig,
        registry: Registry,
        rules: RuleSet,
        agents: &[AgentSpec],
        backend: Box<dyn Backend>,
    ) -> Result<Self, OrchestratorError> {
        if config.max_decisions == 0 {
            return Err(OrchestratorError::Setup("max_decisions must be at least 1".into()));
        }
        let mut chosen: Vec<AgentSpec> = if scenario.agents.is_empty() {
            agents.to_vec()
        } else {
            scenario
                .agents
                .iter()
                .map(|id| {
                    agents
                        .iter()
                        .find(|a| &a.id == id)
                        .cloned()
                        .ok_or_else(|| OrchestratorError::Setup(format!("unknown agent {id:?}")))
                })
                .collect::<Result<_, _>>()?
        };
        chosen.sort_by(|a, b| a.id.cmp(&b.id));
        for a in &chosen {
            a.check(&registry).map_err(|e| OrchestratorError::Setup(e.to_string()))?;
        }
        scenario.check_patterns(&registry).map_err(|e| OrchestratorError::Setup(e.to_string()))?;
        let mut plant = scenario.plant.build();
        for a in &chosen {
            if let (Some(station), Some(next)) = (&a.station, &a.next_agent) {
                if let Some(st) = plant.stations.get_mut(station) {
                    st.next_agent.get_or_insert_with(|| next.clone());
                }
            }
        }
        for fault in &scenario.faults {
            plant.inject_fault(fault.clone())?;
        }
        let mut pool = DataPool::new();
        for (address, value) in plant.read_signals() {
            pool.update_signal(&address, value, 0)?;
        }
        let terminal = scenario
            .end
            .terminal_event
            .as_deref()
            .map(Regex::new)
            .transpose()
            .map_err(|e| OrchestratorError::Setup(e.to_string()))?;
        let mut actions: Vec<TimedAction> = scenario.actions.clone();
        actions.sort_by_key(|a| a.at_ms);
        let mut transcript = Transcript::default();
        transcript.push(TranscriptRecord::Header {
            scenario: Box::new(scenario.clone()),
            backend: backend.name(),
            config: config.clone(),
        });
        Ok(Self {
            agents: chosen
                .into_iter()
                .map(|spec| AgentState {
                    spec,
                    last_seen: 0,
                    hold_until: None,
                    debounce_at: None,
                    in_flight: None,
                    active_step: None,
                })
                .collect(),
            scenario,
            config,
            registry,
            rules,
            backend,
            plant,
            pool,
            log: EventLog::new(),
            pending_events: Vec::new(),
            actions: actions.into(),
            approvals: Vec::new(),
            transcript,
            terminal,
            terminal_hit: false,
            status: RunStatus::Running,
            next_decision: 1,
            decisions: 0,
            plans: Vec::new(),
            alerts: Vec::new(),
            sink: None,
            pause_at: None,
        })
    }

    /// Installs a sink and replays the records logged so far into it.
    pub fn set_sink(&mut self, mut sink: Box<dyn EventSink>) {
        for record in self.log.records() {
            sink.publish(record);
        }
        self.sink = Some(sink);
    }

    pub fn scenario(&self) -> &ScenarioSpec {
        &self.scenario
    }
    pub fn config(&self) -> &RunConfig {
        &self.config
    }
    pub fn log(&self) -> &EventLog {
        &self.log
    }
    pub fn plant(&self) -> &PlantState {
        &self.plant
    }
    pub fn pool(&self) -> &DataPool {
        &self.pool
    }
    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }
    pub fn status(&self) -> RunStatus {
        self.status
    }
    pub fn now(&self) -> Millis {
        self.plant.now()
    }
    pub fn approvals(&self) -> &[PendingApproval] {
        &self.approvals
    }
    pub fn plans(&self) -> &[Plan] {
        &self.plans
    }
    pub fn alerts(&self) -> &[String] {
        &self.alerts
    }
    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn state(&self) -> SessionState<'_> {
        SessionState {
            scenario: &self.scenario.id,
            at: self.now(),
            status: self.status,
            plant: &self.plant,
            signals: self.plant.read_signals(),
            agents: self
                .agents
                .iter()
                .map(|a| AgentSnapshot {
                    id: a.spec.id.clone(),
                    level: a.spec.level,
                    station: a.spec.station.clone(),
                    hold_until: a.hold_until,
                    active_step: a.active_step.clone(),
                })
                .collect(),
            plans: &self.plans,
            alerts: &self.alerts,
            pending_approvals: self.approvals.iter().filter(|a| a.status == ApprovalStatus::Pending).collect(),
        }
    }

    fn time_limit(&self) -> Millis {
        self.scenario.end.time_limit_ms
    }

    /// Runs until the scenario ends or an approval is needed. Call again after
    /// resolving the approval.
    pub fn run(&mut self) -> Result<RunStatus, OrchestratorError> {
        self.pause_at = None;
        self.drive()
    }

    /// Like [`Session::run`], but returns `Running` once virtual time reaches `at`.
    pub fn run_until(&mut self, at: Millis) -> Result<RunStatus, OrchestratorError> {
        self.pause_at = Some(at);
        let status = self.drive();
        self.pause_at = None;
        status
    }

    fn drive(&mut self) -> Result<RunStatus, OrchestratorError> {
        loop {
            match self.status {
                RunStatus::Running => {}
                RunStatus::AwaitingApproval => {
                    if self.has_pending_approval() {
                        return Ok(RunStatus::AwaitingApproval);
                    }
                    self.status = RunStatus::Running;
                }
                RunStatus::Deadlock => return Err(OrchestratorError::ScenarioDeadlock { at: self.now() }),
                done => return Ok(done),
            }
            self.settle()?;
            match self.status {
                RunStatus::Running => {}
                RunStatus::Deadlock => return Err(OrchestratorError::ScenarioDeadlock { at: self.now() }),
                other => return Ok(other),
            }
            if self.now() >= self.time_limit() {
                self.finish(RunStatus::TimeLimit, "time limit reached");
                return Ok(self.status);
            }
            if self.quiescent() {
                if self.terminal.is_some() {
                    self.finish(RunStatus::Deadlock, "no events, timers or actions left before the terminal event");
                    return Err(OrchestratorError::ScenarioDeadlock { at: self.now() });
                }
                self.finish(RunStatus::Finished, "quiescent");
                return Ok(self.status);
            }
            if self.pause_at.is_some_and(|p| self.now() >= p) {
                return Ok(RunStatus::Running);
            }
            self.step()?;
        }
    }

    fn has_pending_approval(&self) -> bool {
        self.approvals.iter().any(|a| a.status == ApprovalStatus::Pending)
    }

    fn finish(&mut self, status: RunStatus, detail: &str) {
        self.status = status;
        self.transcript.push(TranscriptRecord::Outcome { at: self.now(), status, detail: detail.to_string() });
    }

    fn quiescent(&self) -> bool {
        self.plant.is_idle()
            && self.pending_events.is_empty()
            && self.actions.is_empty()
            && self
                .agents
                .iter()
                .all(|a| a.hold_until.is_none() && a.in_flight.is_none() && a.debounce_at.is_none())
    }

    fn step(&mut self) -> Result<(), OrchestratorError> {
        let changes = self.plant.advance(SUB_STEP_MS);
        self.deliver_due()?;
        self.ingest(&changes)
    }

    fn append(&mut self, draft: EventDraft) -> Result<(), OrchestratorError> {
        let record = self.log.append(draft)?.clone();
        if self.terminal.as_ref().is_some_and(|re| re.is_match(&record.text)) {
            self.terminal_hit = true;
        }
        if let Some(sink) = self.sink.as_mut() {
            sink.publish(&record);
        }
        self.transcript.push(TranscriptRecord::Event { record });
        Ok(())
    }

    fn ingest(&mut self, changes: &[SignalChange]) -> Result<(), OrchestratorError> {
        if changes.is_empty() {
            return Ok(());
        }
        let applied = self.pool.apply(changes)?;
        for draft in self.rules.observe(&applied, &self.pool) {
            self.append(draft)?;
        }
        Ok(())
    }

    fn deliver_due(&mut self) -> Result<(), OrchestratorError> {
        let now = self.now();
        let (due, later): (Vec<EventDraft>, Vec<EventDraft>) =
            std::mem::take(&mut self.pending_events).into_iter().partition(|e| e.at <= now);
        self.pending_events = later;
        for draft in due {
            self.append(draft)?;
        }
        Ok(())
    }

    fn check_terminal(&mut self) -> bool {
        if self.terminal_hit && self.status == RunStatus::Running {
            self.finish(RunStatus::Finished, "terminal event logged");
        }
        self.status != RunStatus::Running
    }

    /// Handles everything due at the current instant until no agent is triggered.
    fn settle(&mut self) -> Result<(), OrchestratorError> {
        loop {
            self.deliver_due()?;
            while self.actions.front().is_some_and(|a| a.at_ms <= self.now()) {
                let action = self.actions.pop_front().expect("checked");
                self.perform(action)?;
                if self.check_terminal() {
                    return Ok(());
                }
            }
            if self.check_terminal() {
                return Ok(());
            }
            for i in 0..self.agents.len() {
                if self.agents[i].in_flight.as_ref().is_some_and(|f| f.execute_at <= self.now()) {
                    let f = self.agents[i].in_flight.take().expect("checked");
                    self.dispatch(i, f.decision, f.reason, f.invocation)?;
                    if self.check_terminal() {
                        return Ok(());
                    }
                }
            }
            let ready = self.triggered();
            if ready.is_empty() {
                return Ok(());
            }
            for i in ready {
                if self.decisions >= self.config.max_decisions {
                    self.finish(RunStatus::MaxDecisions, "decision cap reached");
                    return Ok(());
                }
                self.decide(i)?;
                if self.check_terminal() {
                    return Ok(());
                }
            }
        }
    }

    fn perform(&mut self, action: TimedAction) -> Result<(), OrchestratorError> {
        match action.action {
            ActionKind::Spawn { station, workpiece } => {
                let changes = self.plant.spawn_workpiece(&station, &workpiece)?;
                self.ingest(&changes)
            }
            ActionKind::Remove { workpiece } => {
                let changes = self.plant.remove_workpiece(&workpiece)?;
                self.ingest(&changes)
            }
            ActionKind::Task { text } => match self.handle_user_task(&text) {
                Ok(_) | Err(OrchestratorError::PlanParseFailure(_)) => Ok(()),
                Err(e) => Err(e),
            },
        }
    }

    /// Operator agents due for a decision, ascending id.
    fn triggered(&mut self) -> Vec<usize> {
        let now = self.now();
        let mut ready = Vec::new();
        for (i, agent) in self.agents.iter_mut().enumerate() {
            if agent.spec.level != AgentLevel::Operator || agent.in_flight.is_some() {
                continue;
            }
            if let Some(until) = agent.hold_until {
                if until > now {
                    continue;
                }
                ready.push(i);
                continue;
            }
            let fresh = self
                .log
                .since(agent.last_seen)
                .iter()
                .any(|r| r.source != agent.spec.id && agent.spec.subscription.matches(r));
            match self.config.decision_trigger {
                DecisionTrigger::OnEvent => {
                    if fresh {
                        ready.push(i);
                    }
                }
                DecisionTrigger::OnEventDebounced { ms } => {
                    if fresh {
                        // every new event pushes the deadline out again
                        agent.debounce_at = Some(now + ms);
                        agent.last_seen = self.log.last_seq();
                    }
                    if agent.debounce_at.is_some_and(|t| t <= now) {
                        ready.push(i);
                    }
                }
            }
        }
        ready
    }

    fn decide(&mut self, i: usize) -> Result<(), OrchestratorError> {
        let now = self.now();
        let decision = self.next_decision;
        self.next_decision += 1;
        self.decisions += 1;
        let agent = &mut self.agents[i];
        agent.hold_until = None;
        agent.debounce_at = None;
        let excerpt = self.log.excerpt(&agent.spec.subscription);
        let prompt = build_prompt(&agent.spec.prompt, &agent.spec.catalog(&self.registry), &excerpt);
        let log_seq = self.log.last_seq();
        agent.last_seen = log_seq;
        let id = agent.spec.id.clone();
        self.transcript.push(TranscriptRecord::Prompt {
            at: now,
            agent: id.clone(),
            decision,
            log_seq,
            digest: prompt_digest(&prompt),
            text: prompt.clone(),
        });
        let raw = match self.backend.complete(&prompt) {
            Ok(raw) => raw,
            Err(e) => {
                tracing::warn!(agent = %id, error = %e, "backend failed");
                self.transcript.push(TranscriptRecord::BackendFailure {
                    at: now,
                    agent: id.clone(),
                    decision,
                    error: e.to_string(),
                });
                self.verdict(now, &id, decision, log_seq, Err(("BackendFailure".into(), e.to_string())));
                return Ok(());
            }
        };
        self.transcript.push(TranscriptRecord::Response { at: now, agent: id.clone(), decision, raw: raw.clone() });
        let parsed = match parse_decision(&raw) {
            Ok(d) => d,
            Err(e) => {
                self.verdict(now, &id, decision, log_seq, Err((e.class().into(), e.to_string())));
                return Ok(());
            }
        };
        self.transcript.push(TranscriptRecord::Decision {
            at: now,
            agent: id.clone(),
            decision,
            reason: parsed.reason.clone(),
            command: parsed.command.clone(),
        });
        let spec = &self.agents[i].spec;
        let validated = match self.registry.parse_and_validate(&parsed.command) {
            Ok(inv) if spec.permits(&self.registry, &inv.service) => Ok(inv),
            Ok(inv) => Err(("NotPermitted".to_string(), format!("{} is not among the services of {}", inv.service, spec.id))),
            Err(e) => Err((e.class().to_string(), e.to_string())),
        };
        let station = spec.station.clone();
        let Ok(invocation) = validated else {
            self.verdict(now, &id, decision, log_seq, validated.map(|_| unreachable!()));
            return Ok(());
        };
        let invocation = invocation.issued(&id, now, station.as_deref());
        self.verdict(now, &id, decision, log_seq, Ok(invocation.clone()));
        match self.config.inference_pause {
            InferencePause::PauseClock => self.dispatch(i, decision, parsed.reason, invocation),
            InferencePause::BufferEvents => {
                self.agents[i].in_flight = Some(InFlight {
                    execute_at: now + self.config.inference_latency_ms,
                    decision,
                    reason: parsed.reason,
                    invocation,
                });
                Ok(())
            }
        }
    }

    fn verdict(&mut self, at: Millis, agent: &str, decision: u64, log_seq: u64, outcome: Result<Invocation, (String, String)>) {
        let record = match outcome {
            Ok(inv) => TranscriptRecord::Verdict {
                at,
                agent: agent.to_string(),
                decision,
                log_seq,
                executable: true,
                class: None,
                detail: inv.to_string(),
                invocation: Some(inv),
            },
            Err((class, detail)) => TranscriptRecord::Verdict {
                at,
                agent: agent.to_string(),
                decision,
                log_seq,
                executable: false,
                class: Some(class),
                detail,
                invocation: None,
            },
        };
        self.transcript.push(record);
    }

    /// Sends a validated command through the approval gate, or executes it.
    fn dispatch(&mut self, i: usize, decision: u64, reason: String, mut invocation: Invocation) -> Result<(), OrchestratorError> {
        let now = self.now();
        invocation.at = now;
        let no_op = self.registry.get(&invocation.service).is_some_and(|d| d.effect == crate::registry::Effect::NoOp);
        if self.config.approval_mode == ApprovalMode::Human && !no_op {
            let id = self.approvals.len() as u64 + 1;
            let agent = self.agents[i].spec.id.clone();
            self.transcript.push(TranscriptRecord::Approval {
                at: now,
                approval: id,
                agent: agent.clone(),
                decision,
                action: ApprovalAction::Requested,
                actor: None,
            });
            self.approvals.push(PendingApproval {
                id,
                agent,
                decision,
                reason,
                invocation,
                created_at: now,
                status: ApprovalStatus::Pending,
                resolved_by: None,
                result: None,
            });
            self.status = RunStatus::AwaitingApproval;
            return Ok(());
        }
        self.execute_now(i, decision, &invocation).map(|_| ())
    }

    fn execute_now(&mut self, i: usize, decision: u64, invocation: &Invocation) -> Result<ExecutionResult, OrchestratorError> {
        let now = self.now();
        let result = execute(&self.registry, &mut self.plant, invocation);
        self.transcript.push(TranscriptRecord::Execution {
            at: now,
            agent: self.agents[i].spec.id.clone(),
            decision,
            result: result.clone(),
        });
        if let Some(a) = result.announcement.clone() {
            self.append(a)?;
        }
        self.ingest(&result.signal_changes)?;
        for e in result.emitted_events.iter().cloned() {
            if e.at <= now {
                self.append(e)?;
            } else {
                self.pending_events.push(e);
                self.pending_events.sort_by_key(|e| e.at);
            }
        }
        if let Some(until) = result.hold_until {
            self.agents[i].hold_until = Some(until);
        }
        if let Some(alert) = &result.alert {
            self.alerts.push(alert.clone());
        }
        Ok(result)
    }

    /// Resolves a pending approval. Approved commands execute at the current
    /// virtual time; rejected ones only leave a log line.
    pub fn resolve_approval(&mut self, id: u64, verdict: Verdict, actor: &str) -> Result<Option<ExecutionResult>, OrchestratorError> {
        let index = self.approvals.iter().position(|a| a.id == id).ok_or(OrchestratorError::UnknownApproval(id))?;
        if self.approvals[index].status != ApprovalStatus::Pending {
            return Err(OrchestratorError::AlreadyResolved(id));
        }
        let now = self.now();
        let approval = self.approvals[index].clone();
        let agent_index = self.agents.iter().position(|a| a.spec.id == approval.agent).expect("approval agent exists");
        let action = match verdict {
            Verdict::Approved => ApprovalAction::Approved,
            Verdict::Rejected => ApprovalAction::Rejected,
        };
        self.transcript.push(TranscriptRecord::Approval {
            at: now,
            approval: id,
            agent: approval.agent.clone(),
            decision: approval.decision,
            action,
            actor: Some(actor.to_string()),
        });
        self.approvals[index].resolved_by = Some(actor.to_string());
        let result = match verdict {
            Verdict::Approved => {
                self.approvals[index].status = ApprovalStatus::Approved;
                let mut inv = approval.invocation.clone();
                inv.at = now;
                let result = self.execute_now(agent_index, approval.decision, &inv)?;
                self.approvals[index].result = Some(result.clone());
                Some(result)
            }
            Verdict::Rejected => {
                self.approvals[index].status = ApprovalStatus::Rejected;
                let inv = &approval.invocation;
                let mut tags: Vec<String> = inv.station.iter().cloned().collect();
                tags.push(approval.agent.clone());
                self.append(EventDraft::new(
                    now,
                    "supervisor",
                    format!("Command '{inv}' rejected by supervisor {actor}."),
                    tags,
                ))?;
                None
            }
        };
        if self.status == RunStatus::AwaitingApproval && !self.has_pending_approval() {
            self.status = RunStatus::Running;
        }
        self.check_terminal();
        Ok(result)
    }

    /// Logs the task, asks the manager for a plan and logs one line per step
    /// for its assignee.
    pub fn handle_user_task(&mut self, text: &str) -> Result<Plan, OrchestratorError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(OrchestratorError::EmptyTask);
        }
        let m = self
            .agents
            .iter()
            .position(|a| a.spec.level == AgentLevel::Manager)
            .ok_or(OrchestratorError::NoManager)?;
        let now = self.now();
        let manager = self.agents[m].spec.id.clone();
        let one_line = text.split_whitespace().collect::<Vec<_>>().join(" ");
        self.append(EventDraft::new(now, "user", format!("User task received: {one_line}"), vec![manager.clone()]))?;
        let decision = self.next_decision;
        self.next_decision += 1;
        let spec = &self.agents[m].spec;
        let excerpt = self.log.excerpt(&spec.subscription);
        let prompt = build_prompt(&spec.prompt, &spec.catalog(&self.registry), &excerpt);
        let log_seq = self.log.last_seq();
        self.agents[m].last_seen = log_seq;
        self.transcript.push(TranscriptRecord::Prompt {
            at: now,
            agent: manager.clone(),
            decision,
            log_seq,
            digest: prompt_digest(&prompt),
            text: prompt.clone(),
        });
        let operators: Vec<String> = self
            .agents
            .iter()
            .filter(|a| a.spec.level == AgentLevel::Operator)
            .map(|a| a.spec.id.clone())
            .collect();
        let refs: Vec<&str> = operators.iter().map(String::as_str).collect();
        let parsed = match self.backend.complete(&prompt) {
            Ok(raw) => {
                self.transcript.push(TranscriptRecord::Response { at: now, agent: manager.clone(), decision, raw: raw.clone() });
                parse_plan(&raw, &refs).map_err(|e| e.to_string())
            }
            Err(e) => Err(e.to_string()),
        };
        let plan = match parsed {
            Ok(plan) => plan,
            Err(error) => {
                self.transcript.push(TranscriptRecord::PlanFailure { at: now, agent: manager.clone(), decision, error: error.clone() });
                self.append(EventDraft::new(now, &manager, format!("Plan could not be created: {error}"), vec![manager.clone()]))?;
                return Err(OrchestratorError::PlanParseFailure(error));
            }
        };
        self.transcript.push(TranscriptRecord::Plan { at: now, agent: manager.clone(), decision, plan: plan.clone() });
        for step in &plan.steps {
            let instruction = step.instruction.split_whitespace().collect::<Vec<_>>().join(" ");
            self.append(EventDraft::new(
                now,
                &manager,
                format!("Plan step {} for {}: {}", step.id, step.assignee, instruction),
                vec![step.assignee.clone()],
            ))?;
            if let Some(a) = self.agents.iter_mut().find(|a| a.spec.id == step.assignee) {
                a.active_step.get_or_insert_with(|| step.clone());
            }
        }
        self.plans.push(plan.clone());
        if matches!(self.status, RunStatus::Finished) && !self.terminal_hit && self.now() < self.time_limit() {
            self.status = RunStatus::Running;
        }
        Ok(plan)
    }
}

/// Re-runs a recorded transcript against its recorded responses (and
/// recorded approval verdicts) and returns the new transcript.
pub fn replay(
    original: &Transcript,
    registry: Registry,
    rules: RuleSet,
    agents: &[AgentSpec],
    backend_name: &str,
) -> Result<Transcript, OrchestratorError> {
    let (scenario, _, config) = original.header().ok_or_else(|| OrchestratorError::Setup("transcript has no header".into()))?;
    let backend = ScriptedReplay::new(backend_name, original.replay_records());
    let mut session = Session::new(scenario.clone(), config.clone(), registry, rules, agents, Box::new(backend))?;
    let mut verdicts = original.records.iter().filter_map(|r| match r {
        TranscriptRecord::Approval { approval, action, actor, .. } if *action != ApprovalAction::Requested => {
            Some((*approval, *action, actor.clone().unwrap_or_default()))
        }
        _ => None,
    });
    loop {
        match session.run() {
            Ok(RunStatus::AwaitingApproval) => {
                let Some((id, action, actor)) = verdicts.next() else { break };
                let verdict = if action == ApprovalAction::Approved { Verdict::Approved } else { Verdict::Rejected };
                session.resolve_approval(id, verdict, &actor)?;
            }
            Ok(_) | Err(OrchestratorError::ScenarioDeadlock { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(session.transcript)
}

impl Session {
    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn session(name: &str, backend: Box<dyn Backend>, config: RunConfig) -> Session {
        Session::new(
            fixtures::scenario(name).unwrap(),
            config,
            fixtures::registry(),
            fixtures::rules(),
            &fixtures::agents(),
            backend,
        )
        .unwrap()
    }

    fn lines(s: &Session) -> String {
        s.log().records().iter().map(|r| r.line() + "\n").collect()
    }

    #[test]
    fn handover_run_reproduces_golden_log() {
        let mut s = session("golden_handover", Box::new(fixtures::full_oracle()), RunConfig::default());
        assert_eq!(s.run().unwrap(), RunStatus::Finished);
        assert!(lines(&s).starts_with(fixtures::GOLDEN_HANDOVER_LOG));
        let prompts: Vec<&str> = s
            .transcript()
            .records
            .iter()
            .filter_map(|r| match r {
                TranscriptRecord::Prompt { text, .. } => Some(text.as_str()),
                _ => None,
            })
            .collect();
        assert!(prompts.contains(&fixtures::GOLDEN_HANDOVER_PROMPT));
    }

    fn full(name: &str) -> Session {
        session(name, Box::new(fixtures::full_oracle()), RunConfig::default())
    }

    fn texts(s: &Session) -> Vec<String> {
        s.log().records().iter().map(|r| r.text.clone()).collect()
    }

    #[test]
    fn stuck_workpiece_waits_then_alerts() {
        let mut s = full("stuck_workpiece");
        assert_eq!(s.run().unwrap(), RunStatus::Finished);
        let t = texts(&s);
        let wait = t.iter().position(|l| l.contains("'wait(5)'")).unwrap();
        let stop = t.iter().position(|l| l == "The conveyor stops.").unwrap();
        assert!(wait < stop);
        assert!(t.last().unwrap().starts_with("Alert sent to human supervisor"));
        assert_eq!(s.alerts().len(), 1);
    }

    #[test]
    fn procedure_only_agent_deadlocks_on_stuck_workpiece() {
        let mut s = session("stuck_workpiece", Box::new(fixtures::sop_oracle()), RunConfig::default());
        assert!(matches!(s.run(), Err(OrchestratorError::ScenarioDeadlock { at: 24_300 })));
        assert_eq!(s.transcript().outcome(), Some(RunStatus::Deadlock));
    }

    #[test]
    fn manager_plan_drives_agv_transport() {
        let mut s = full("agv_transport");
        assert_eq!(s.run().unwrap(), RunStatus::Finished);
        let t = texts(&s);
        assert_eq!(t[0], "User task received: Transport workpiece W1 to conveyor2.");
        assert!(t[1].starts_with("Plan step 1 for op_conveyor:"));
        assert_eq!(t[2], "Plan step 2 for op_agv: Transport workpiece W1 to conveyor2.");
        // unloading puts W1 at the entrance of conveyor2 in the same step
        assert!(t.iter().rev().take(2).any(|l| l == "AGV agv1 unloads workpiece W1."));
        assert_eq!(s.plans().len(), 1);
        // transit takes 8 s after the 20.1 s handover
        assert_eq!(s.now(), 28_100);
    }

    #[test]
    fn human_mode_stops_for_every_actuation() {
        let config = RunConfig { approval_mode: ApprovalMode::Human, ..RunConfig::default() };
        let mut s = session("golden_handover", Box::new(fixtures::full_oracle()), config);
        let mut approved = 0;
        loop {
            match s.run().unwrap() {
                RunStatus::AwaitingApproval => {
                    let id = s.approvals().iter().find(|a| a.status == ApprovalStatus::Pending).unwrap().id;
                    s.resolve_approval(id, Verdict::Approved, "alice").unwrap();
                    approved += 1;
                }
                other => {
                    assert_eq!(other, RunStatus::Finished);
                    break;
                }
            }
        }
        // belt, holder, rfid read, two inquiries, wait, release
        assert_eq!(approved, 7);
        assert!(lines(&s).starts_with(fixtures::GOLDEN_HANDOVER_LOG));
        assert_eq!(s.resolve_approval(1, Verdict::Approved, "alice"), Err(OrchestratorError::AlreadyResolved(1)));
        assert_eq!(s.resolve_approval(99, Verdict::Approved, "alice"), Err(OrchestratorError::UnknownApproval(99)));
    }

    #[test]
    fn rejected_command_is_logged_and_not_executed() {
        let config = RunConfig { approval_mode: ApprovalMode::Human, ..RunConfig::default() };
        let mut s = session("golden_handover", Box::new(fixtures::full_oracle()), config);
        assert_eq!(s.run().unwrap(), RunStatus::AwaitingApproval);
        assert!(s.resolve_approval(1, Verdict::Rejected, "bob").unwrap().is_none());
        assert_eq!(
            texts(&s).last().unwrap(),
            "Command 'conveyor_belt_run(forward, 10)' rejected by supervisor bob."
        );
        assert!(s.plant().is_idle() || s.plant().stations["conveyor1"].belt_state == crate::plant::BeltState::Stopped);
    }

    #[test]
    fn replay_reproduces_transcript() {
        let mut s = full("golden_handover");
        s.run().unwrap();
        let original = s.into_transcript();
        let again = replay(&original, fixtures::registry(), fixtures::rules(), &fixtures::agents(), "rule_oracle").unwrap();
        assert_eq!(first_difference(&original.body_jsonl(), &again.body_jsonl()), None);
        let parsed = Transcript::from_jsonl(&original.to_jsonl()).unwrap();
        assert_eq!(parsed, original);
    }

    #[test]
    fn buffered_inference_lets_time_run() {
        let config = RunConfig { inference_pause: InferencePause::BufferEvents, inference_latency_ms: 500, ..RunConfig::default() };
        let mut s = session("golden_handover", Box::new(fixtures::full_oracle()), config);
        assert_eq!(s.run().unwrap(), RunStatus::Finished);
        let belt = s.log().records().iter().find(|r| r.text.contains("conveyor_belt_run")).unwrap();
        assert_eq!(belt.at, 14_800);
        assert!(texts(&s).last().unwrap().starts_with("The workpiece W1 is handed over"));
    }

    #[test]
    fn decision_cap_ends_run() {
        let config = RunConfig { max_decisions: 2, ..RunConfig::default() };
        let mut s = session("golden_handover", Box::new(fixtures::full_oracle()), config);
        assert_eq!(s.run().unwrap(), RunStatus::MaxDecisions);
    }

    #[test]
    fn adversarial_output_is_not_executable() {
        let mut s = session("golden_handover", Box::new(fixtures::adversarial_oracle()), RunConfig::default());
        let _ = s.run();
        let verdicts: Vec<bool> = s
            .transcript()
            .records
            .iter()
            .filter_map(|r| match r {
                TranscriptRecord::Verdict { executable, .. } => Some(*executable),
                _ => None,
            })
            .collect();
        assert!(!verdicts.is_empty());
        assert!(verdicts.iter().all(|e| !e));
    }

    #[test]
    fn stepwise_run_matches_full_run() {
        let mut full = full("golden_handover");
        full.run().unwrap();
        let mut s = session("golden_handover", Box::new(fixtures::full_oracle()), RunConfig::default());
        let mut t = 0;
        while s.run_until(t).unwrap() == RunStatus::Running {
            assert!(s.now() >= t);
            t += 700;
        }
        assert_eq!(s.transcript().to_jsonl(), full.transcript().to_jsonl());
    }

    #[test]
    fn task_without_manager_is_refused() {
        let mut s = full("golden_handover");
        assert_eq!(s.handle_user_task("  "), Err(OrchestratorError::EmptyTask));
        assert_eq!(s.handle_user_task("do it"), Err(OrchestratorError::NoManager));
    }
}
