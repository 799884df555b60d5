//! Runs the bundled hand-over scenario with the rule oracle and prints the
//! event log next to every agent decision.

use cellpilot::fixtures;
use cellpilot::orchestrator::{RunConfig, Session, TranscriptRecord};

fn main() {
    let scenario = std::env::args().nth(1).unwrap_or_else(|| "golden_handover".into());
    let spec = fixtures::scenario(&scenario).unwrap_or_else(|| panic!("unknown scenario {scenario}"));
    let mut session = Session::new(
        spec,
        RunConfig::default(),
        fixtures::registry(),
        fixtures::rules(),
        &fixtures::agents(),
        Box::new(fixtures::full_oracle()),
    )
    .unwrap();
    let status = session.run();
    for record in &session.transcript().records {
        match record {
            TranscriptRecord::Event { record } => println!("{}", record.line()),
            TranscriptRecord::Decision { agent, command, reason, .. } => println!("    {agent} -> {command}    # {reason}"),
            TranscriptRecord::Verdict { executable: false, detail, .. } => println!("    rejected: {detail}"),
            _ => {}
        }
    }
    println!("status: {status:?}");
}
