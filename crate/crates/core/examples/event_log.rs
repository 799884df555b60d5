//! Appending to the log, filtering by subscription and exporting JSON lines.

use cellpilot::event_log::{EventDraft, EventLog, Subscription};

fn main() {
    let mut log = EventLog::new();
    let tagged = |t: &[&str]| t.iter().map(|s| s.to_string()).collect();
    log.append(EventDraft::new(14_000, "twin", "Sensor BG56 detects an object at the entrance.", tagged(&["conveyor1"]))).unwrap();
    log.append(EventDraft::new(15_000, "twin", "Holder H1 secures the workpiece.", tagged(&["conveyor1"]))).unwrap();
    log.append(EventDraft::new(15_000, "agv1", "AGV agv1 starts moving.", tagged(&["agv1"]))).unwrap();
    log.append(EventDraft::new(17_000, "twin", "Holder H1 releases the workpiece.", tagged(&["conveyor1"]))).unwrap();

    // out-of-order appends are refused
    let late = log.append(EventDraft::new(1_000, "twin", "too late", vec![]));
    println!("late append: {}", late.unwrap_err());

    let sub = Subscription::new("op_conveyor1", vec!["conveyor1".into()], 2).unwrap();
    println!("-- excerpt for {} (window {})", sub.agent_id, sub.window);
    println!("{}", log.excerpt(&sub));
    println!("-- since seq 2");
    for r in log.since(2) {
        println!("{}", r.line());
    }
    println!("unmatched holds: {}", log.state_pair_check("Holder H1 secures", "Holder H1 releases").len());
    log.export_jsonl(std::io::stdout().lock()).unwrap();
}
