//! Runtime execution of validated invocations.

use serde::{Deserialize, Serialize};

use super::{Effect, Invocation, Registry};
use crate::event_log::EventDraft;
use crate::plant::{PeerStatus, PlantState};
use crate::time::Millis;
use crate::twin::SignalChange;

/// Placeholder argument of `communicate_with_agent` meaning "the station's next agent".
pub const NEXT_AGENT: &str = "next";

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionStatus {
    Ok,
    Rejected,
    Failed,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct Handover {
    pub workpiece: String,
    pub from_agent: String,
    pub to_agent: String,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ExecutionResult {
    pub status: ExecutionStatus,
    /// The "Operator agent calls the operation ..." line, if the service announces itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub announcement: Option<EventDraft>,
    /// Raw plant changes caused by the call. The caller feeds them to the observer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub signal_changes: Vec<SignalChange>,
    /// Coordination and alert events. Peer replies may lie in the future.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub emitted_events: Vec<EventDraft>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hold_until: Option<Millis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alert: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handover: Option<Handover>,
    pub detail: String,
}

impl ExecutionResult {
    fn new(status: ExecutionStatus, detail: impl Into<String>) -> Self {
        Self {
            status,
            announcement: None,
            signal_changes: Vec::new(),
            emitted_events: Vec::new(),
            hold_until: None,
            alert: None,
            handover: None,
            detail: detail.into(),
        }
    }

    pub fn rejected(detail: impl Into<String>) -> Self {
        Self::new(ExecutionStatus::Rejected, detail)
    }

    pub fn is_ok(&self) -> bool {
        self.status == ExecutionStatus::Ok
    }
}

fn tags(inv: &Invocation, extra: &[&str]) -> Vec<String> {
    let mut out: Vec<String> = inv.station.iter().cloned().collect();
    if !inv.issued_by.is_empty() {
        out.push(inv.issued_by.clone());
    }
    for t in extra {
        if !out.iter().any(|o| o == t) {
            out.push(t.to_string());
        }
    }
    out
}

fn draft(inv: &Invocation, at: Millis, source: &str, text: String, extra: &[&str]) -> EventDraft {
    EventDraft::new(at, source, text, tags(inv, extra))
}

/// Executes a validated invocation at `invocation.at`. Only actuation and
/// sensing services touch the plant, and only when they succeed.
pub fn execute(registry: &Registry, plant: &mut PlantState, invocation: &Invocation) -> ExecutionResult {
    let Some(descriptor) = registry.get(&invocation.service) else {
        return ExecutionResult::rejected(format!("unknown service {:?}", invocation.service));
    };
    let inv = invocation;
    let at = inv.at;
    let agent = inv.issued_by.as_str();
    let mut result = ExecutionResult::new(ExecutionStatus::Ok, "");
    if descriptor.announce {
        result.announcement = Some(draft(inv, at, agent, format!("Operator agent calls the operation '{inv}'."), &[]));
    }
    match descriptor.effect {
        Effect::NoOp => result.detail = "no operation".into(),
        Effect::Timing => {
            let seconds = inv.int_arg(0).unwrap_or(0).max(0) as Millis;
            result.hold_until = Some(at + seconds * 1000);
            result.detail = format!("hold until {} ms", at + seconds * 1000);
        }
        Effect::Alert => {
            let issue = inv.text_arg(0).unwrap_or("unspecified issue").to_string();
            result
                .emitted_events
                .push(draft(inv, at, agent, format!("Alert sent to human supervisor: {issue}"), &["alert"]));
            result.detail = format!("alert: {issue}");
            result.alert = Some(issue);
        }
        Effect::Communication => communicate(plant, inv, &mut result),
        Effect::Actuation | Effect::Sensing => {
            if inv.service == "release_workpiece_to_next_agent" {
                let Some(station) = inv.station.as_deref() else {
                    return failed(inv, result, "no station");
                };
                match plant.hand_over(station) {
                    Ok((info, changes)) => {
                        result.signal_changes = changes;
                        result.emitted_events.push(draft(
                            inv,
                            at,
                            agent,
                            format!("The workpiece {} is handed over to the next operator agent.", info.workpiece),
                            &[info.next_agent.as_str()],
                        ));
                        result.detail = format!("{} handed over to {}", info.workpiece, info.next_agent);
                        result.handover = Some(Handover {
                            workpiece: info.workpiece,
                            from_agent: agent.to_string(),
                            to_agent: info.next_agent,
                        });
                    }
                    Err(e) => return failed(inv, result, &e.to_string()),
                }
            } else {
                match plant.apply_actuation(inv) {
                    Ok(changes) => {
                        result.detail = format!("{} signal change(s)", changes.len());
                        result.signal_changes = changes;
                    }
                    Err(e) => return failed(inv, result, &e.to_string()),
                }
            }
        }
    }
    result
}

fn failed(inv: &Invocation, mut result: ExecutionResult, why: &str) -> ExecutionResult {
    result.status = ExecutionStatus::Failed;
    result.detail = why.to_string();
    result.emitted_events.push(draft(
        inv,
        inv.at,
        &inv.issued_by,
        format!("The operation '{inv}' could not be carried out: {why}."),
        &[],
    ));
    result
}

fn communicate(plant: &mut PlantState, inv: &Invocation, result: &mut ExecutionResult) {
    let requested = inv.text_arg(0).unwrap_or(NEXT_AGENT);
    let is_next = requested == NEXT_AGENT;
    let target = if is_next {
        match inv.station.as_deref().and_then(|s| plant.stations.get(s)).and_then(|s| s.next_agent.clone()) {
            Some(t) => t,
            None => {
                let r = failed(inv, result.clone(), "no next agent configured");
                *result = r;
                return;
            }
        }
    } else {
        requested.to_string()
    };
    let agent = inv.issued_by.as_str();
    let opening = if is_next {
        "Communication initiated with the next operator to determine the subsequent action.".to_string()
    } else {
        format!("Communication initiated with agent {target} to determine the subsequent action.")
    };
    result.emitted_events.push(draft(inv, inv.at, agent, opening, &[]));
    let reply = plant.next_peer_reply(&target);
    let subject = if is_next { "The next operator agent".to_string() } else { format!("Agent {target}") };
    let text = match reply.status {
        PeerStatus::Busy => format!("{subject} is busy processing another workpiece."),
        PeerStatus::Ready => format!("{subject} is ready."),
    };
    result.emitted_events.push(draft(inv, inv.at + reply.latency_ms, &target, text, &[]));
    result.detail = format!("{target} answered {:?}", reply.status).to_lowercase();
}
