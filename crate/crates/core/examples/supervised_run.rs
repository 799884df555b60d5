//! Human-in-the-loop approvals: every actuation waits for a supervisor.
//! This supervisor approves everything and logs what it saw.

use cellpilot::fixtures;
use cellpilot::orchestrator::{ApprovalMode, ApprovalStatus, RunConfig, RunStatus, Session, Verdict};

fn main() {
    let config = RunConfig { approval_mode: ApprovalMode::Human, ..RunConfig::default() };
    let mut session = Session::new(
        fixtures::scenario("stuck_workpiece").unwrap(),
        config,
        fixtures::registry(),
        fixtures::rules(),
        &fixtures::agents(),
        Box::new(fixtures::full_oracle()),
    )
    .unwrap();
    loop {
        match session.run() {
            Ok(RunStatus::AwaitingApproval) => {
                let pending: Vec<_> =
                    session.approvals().iter().filter(|a| a.status == ApprovalStatus::Pending).cloned().collect();
                for a in pending {
                    println!("approval {} at {} ms: {} wants {} ({})", a.id, a.created_at, a.agent, a.invocation, a.reason);
                    session.resolve_approval(a.id, Verdict::Approved, "example").unwrap();
                }
            }
            other => {
                println!("run ended: {other:?}");
                break;
            }
        }
    }
    for r in session.log().records() {
        println!("{}", r.line());
    }
}
