//! Parses agent command strings against the bundled service registry.

use cellpilot::fixtures;

fn main() {
    let registry = fixtures::registry();
    let inputs = [
        "conveyor_belt_run(forward, 10)",
        "activate_conveyor(forward, 10)",
        "release_ready_workpiece_to_next_agent()",
        "send_alert_to_human_supervisor(\"W1 stuck on conveyor1\")",
        "conveyor_belt_run(forward",
        "open_pod_bay_doors()",
        "wait()",
        "conveyor_belt_run(sideways, 10)",
    ];
    for text in inputs {
        match registry.parse_and_validate(text) {
            Ok(inv) => println!("ok    {text:<58} -> {inv}"),
            Err(e) => println!("{:<14}{text:<50} {e}", e.class()),
        }
    }
}
