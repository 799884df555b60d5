//! Builds the conveyor operator's prompt for the first lines of the golden
//! run and checks it against the stored copy.

use cellpilot::agent::build_prompt;
use cellpilot::event_log::{EventDraft, EventLog};
use cellpilot::fixtures;
use cellpilot::time::parse_timestamp;

fn main() {
    let registry = fixtures::registry();
    let agent = fixtures::agent("op_conveyor").expect("bundled operator");
    let mut log = EventLog::new();
    for line in fixtures::GOLDEN_HANDOVER_LOG.lines() {
        let (stamp, text) = line.split_once(' ').unwrap();
        let tags = vec!["conveyor1".to_string()];
        log.append(EventDraft::new(parse_timestamp(stamp).unwrap() * 1000, "twin", text, tags)).unwrap();
    }
    let prompt = build_prompt(&agent.prompt, &agent.catalog(&registry), &log.excerpt(&agent.subscription));
    println!("{prompt}");
    eprintln!("matches stored prompt: {}", prompt == fixtures::GOLDEN_HANDOVER_PROMPT);
}
