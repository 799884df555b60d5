//! Records a run, replays it from the recorded responses alone and diffs
//! the two transcripts.

use cellpilot::fixtures;
use cellpilot::orchestrator::{first_difference, replay, RunConfig, Session};

fn main() {
    let mut session = Session::new(
        fixtures::scenario("stuck_workpiece").unwrap(),
        RunConfig::default(),
        fixtures::registry(),
        fixtures::rules(),
        &fixtures::agents(),
        Box::new(fixtures::full_oracle()),
    )
    .unwrap();
    session.run().unwrap();
    let original = session.into_transcript();
    let again = replay(&original, fixtures::registry(), fixtures::rules(), &fixtures::agents(), "replay").unwrap();
    match first_difference(&original.body_jsonl(), &again.body_jsonl()) {
        None => println!("identical: {} records", again.records.len()),
        Some((line, was, now)) => println!("differs at line {line}\n- {was}\n+ {now}"),
    }
}
