//! Writes the bundled 100-scenario suite: 50 routine flows and 50 faults the
//! written procedure does not cover.
//!
//!     cargo run -p cellpilot --example generate_suite [-- OUT]

use cellpilot::scenario::{parse_suite, ScenarioSpec, SuiteFile};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

const SEED: u64 = 20241019;

/// (length m, speed m/s) pairs whose travel time stays well inside the 10 s belt run.
const GEOMETRIES: &[(f64, f64)] = &[(1.0, 0.2), (1.5, 0.2), (0.8, 0.1), (1.0, 0.25), (1.2, 0.2), (0.6, 0.1)];

fn travel_ms(length: f64, speed: f64) -> u64 {
    (((length - 0.05) / speed) * 1000.0).round() as u64
}

/// Multiple of 100 ms in [lo, hi).
fn tick(rng: &mut StdRng, lo: u64, hi: u64) -> u64 {
    rng.gen_range(lo / 100..hi / 100) * 100
}

fn point(id: &str, trigger: &str, occurrence: usize, agent: &str, acceptable: &[&str], optimal: &[&str], terminal: bool) -> Value {
    json!({
        "id": id, "trigger": trigger, "occurrence": occurrence, "agent": agent,
        "acceptable": acceptable, "optimal": optimal, "terminal": terminal,
    })
}

fn entrance_points() -> Vec<Value> {
    vec![point("entrance", "^Sensor BG56 detects", 1, "op_conveyor", &["conveyor_belt_run(forward, *)"], &["conveyor_belt_run(forward, *)"], false)]
}

fn ready_points() -> Vec<Value> {
    vec![point("ready", "^Sensor BG51 at the ready position", 1, "op_conveyor", &["activate_material_holder()"], &["activate_material_holder()"], false)]
}

struct Cell {
    length: f64,
    speed: f64,
    spawn: u64,
    workpiece: String,
}

fn cell(rng: &mut StdRng, n: usize) -> Cell {
    let (length, speed) = *GEOMETRIES.choose(rng).unwrap();
    Cell { length, speed, spawn: tick(rng, 1_000, 30_000), workpiece: format!("W{}", n + 1) }
}

fn conveyor_scenario(id: String, category: &str, description: String, c: &Cell, cleared: bool, peers: Value, faults: Value, terminal: &str, points: Vec<Value>) -> Value {
    let limit = c.spawn + 60_000;
    json!({
        "id": id,
        "category": category,
        "description": description,
        "plant": {
            "stations": [{"id": "conveyor1", "length_m": c.length, "speed_mps": c.speed, "next_agent": "op_next"}],
            "workpieces": [{"id": c.workpiece, "cleared": cleared}],
            "peers": {"op_next": peers},
        },
        "agents": ["op_conveyor"],
        "actions": [{"at_ms": c.spawn, "kind": "spawn", "station": "conveyor1", "workpiece": c.workpiece}],
        "faults": faults,
        "end": {"time_limit_ms": limit, "terminal_event": terminal},
        "golden": {"points": points},
    })
}

fn routine_flow(rng: &mut StdRng, n: usize) -> Value {
    let c = cell(rng, n);
    let busy = n % 4;
    let mut peers: Vec<Value> = (0..busy)
        .map(|_| json!({"status": "busy", "latency_ms": tick(rng, 200, 2_000)}))
        .collect();
    peers.push(json!({"status": "ready", "latency_ms": tick(rng, 0, 1_000)}));
    let mut points = entrance_points();
    points.extend(ready_points());
    points.push(point("cleared", "^RFID check is successful", 1, "op_conveyor", &["communicate_with_agent(*)"], &["communicate_with_agent(*)"], false));
    for i in 1..=busy {
        points.push(point(&format!("busy{i}"), "^The next operator agent is busy", i, "op_conveyor", &["wait(*)"], &["wait(*)"], false));
    }
    points.push(point("handover", "^The next operator agent is ready\\.$", 1, "op_conveyor", &["release_workpiece_to_next_agent()"], &["release_workpiece_to_next_agent()"], true));
    conveyor_scenario(
        format!("routine_flow_{:02}", n + 1),
        "routine",
        format!("{} enters a {} m belt at {} m/s; the next operator is busy {busy} time(s) first.", c.workpiece, c.length, c.speed),
        &c,
        true,
        Value::Array(peers),
        json!([]),
        "^The workpiece \\S+ is handed over to the next operator agent\\.$",
        points,
    )
}

fn routine_agv(rng: &mut StdRng, n: usize) -> Value {
    let (length, speed) = *GEOMETRIES.choose(rng).unwrap();
    let task_at = tick(rng, 500, 5_000);
    let spawn = task_at + tick(rng, 1_000, 20_000);
    let destination = ["conveyor2", "conveyor3"][n % 2];
    let workpiece = format!("W{}", n + 1);
    json!({
        "id": format!("routine_agv_{:02}", n + 1),
        "category": "routine",
        "description": format!("A user task sends {workpiece} from conveyor1 to {destination} on agv1."),
        "plant": {
            "stations": [
                {"id": "conveyor1", "length_m": length, "speed_mps": speed, "next_agent": "op_agv"},
                {"id": "conveyor2"},
                {"id": "conveyor3"},
            ],
            "agvs": [{"id": "agv1", "at": "conveyor1"}],
            "workpieces": [{"id": workpiece, "cleared": true}],
            "peers": {"op_agv": [{"status": "ready", "latency_ms": 0}]},
            "timing": {"agv_transit_ms": tick(rng, 4_000, 12_000), "rfid_check_ms": 1_000, "overdue_grace_ms": 1_000},
        },
        "agents": ["manager", "op_agv", "op_conveyor"],
        "actions": [
            {"at_ms": task_at, "kind": "task", "text": format!("Transport workpiece {workpiece} to {destination}.")},
            {"at_ms": spawn, "kind": "spawn", "station": "conveyor1", "workpiece": workpiece},
        ],
        "end": {"time_limit_ms": spawn + 60_000, "terminal_event": "^AGV \\S+ unloads workpiece"},
        "golden": {"points": [
            entrance_points().remove(0),
            ready_points().remove(0),
            point("handover", "^The workpiece \\S+ is handed over", 1, "op_agv", &["load_workpiece()"], &["load_workpiece()"], false),
            point("loaded", "^AGV agv1 loads workpiece", 1, "op_agv", &[&format!("move_to({destination})")], &[&format!("move_to({destination})")], false),
            point("arrived", &format!("^AGV agv1 arrives at {destination}"), 1, "op_agv", &["unload_workpiece()"], &["unload_workpiece()"], true),
        ]},
    })
}

fn alert_points(trigger: &str) -> Vec<Value> {
    let mut points = entrance_points();
    points.push(point("overdue", "^The workpiece has not reached the ready position", 1, "op_conveyor", &["wait(*)", "send_alert_to_human_supervisor(*)"], &["wait(*)"], false));
    points.push(point("stopped", trigger, 1, "op_conveyor", &["send_alert_to_human_supervisor(*)"], &["send_alert_to_human_supervisor(*)"], true));
    points
}

const ALERT: &str = "^Alert sent to human supervisor";

fn novel_stuck(rng: &mut StdRng, n: usize) -> Value {
    let c = cell(rng, n);
    let at = c.spawn + tick(rng, 300, travel_ms(c.length, c.speed) - 500);
    conveyor_scenario(
        format!("novel_stuck_{:02}", n + 1),
        "novel",
        format!("{} gets stuck {:.1} s after entering; the belt runs out without BG51 firing.", c.workpiece, (at - c.spawn) as f64 / 1000.0),
        &c,
        true,
        json!([{"status": "ready", "latency_ms": 0}]),
        json!([{"kind": "stuck_workpiece", "target": c.workpiece, "at_ms": at}]),
        ALERT,
        alert_points("^The conveyor stops\\.$"),
    )
}

fn novel_dropout(rng: &mut StdRng, n: usize) -> Value {
    let c = cell(rng, n);
    let at = c.spawn + tick(rng, 100, travel_ms(c.length, c.speed) - 500);
    conveyor_scenario(
        format!("novel_dropout_{:02}", n + 1),
        "novel",
        format!("BG51 stops reporting; {} reaches the belt end unseen.", c.workpiece),
        &c,
        true,
        json!([{"status": "ready", "latency_ms": 0}]),
        json!([{"kind": "sensor_dropout", "target": "conveyor1.BG51", "at_ms": at}]),
        ALERT,
        alert_points("^The conveyor stops\\.$"),
    )
}

fn novel_rfid(rng: &mut StdRng, n: usize) -> Value {
    let c = cell(rng, n);
    let mut points = entrance_points();
    points.extend(ready_points());
    points.push(point("rejected", "^RFID check failed", 1, "op_conveyor", &["deactivate_material_holder()", "send_alert_to_human_supervisor(*)"], &["deactivate_material_holder()"], false));
    points.push(point("released", "^Holder H1 releases the workpiece", 1, "op_conveyor", &["send_alert_to_human_supervisor(*)"], &["send_alert_to_human_supervisor(*)"], true));
    conveyor_scenario(
        format!("novel_rfid_{:02}", n + 1),
        "novel",
        format!("{} is not cleared for processing by the RFID check.", c.workpiece),
        &c,
        false,
        json!([{"status": "ready", "latency_ms": 0}]),
        json!([]),
        ALERT,
        points,
    )
}

fn novel_signal(rng: &mut StdRng, n: usize, kind: &str, tag: &str, trigger: &str) -> Value {
    let c = cell(rng, n);
    // strictly between the entrance and the ready sensor, off the event instants
    let at = c.spawn + tick(rng, 500, travel_ms(c.length, c.speed) - 200) + 50;
    let mut points = entrance_points();
    points.push(point(kind, trigger, 1, "op_conveyor", &["send_alert_to_human_supervisor(*)"], &["send_alert_to_human_supervisor(*)"], true));
    conveyor_scenario(
        format!("novel_{kind}_{:02}", n + 1),
        "novel",
        format!("Conveyor C1 raises {tag} while {} is on its way.", c.workpiece),
        &c,
        true,
        json!([{"status": "ready", "latency_ms": 0}]),
        json!([{"kind": "custom", "target": format!("conveyor1.C1.{tag}"), "value": true, "at_ms": at}]),
        ALERT,
        points,
    )
}

fn main() {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/data/suites/suite100.json").to_string());
    let mut rng = StdRng::seed_from_u64(SEED);
    let mut scenarios = Vec::new();
    scenarios.extend((0..40).map(|n| routine_flow(&mut rng, n)));
    scenarios.extend((0..10).map(|n| routine_agv(&mut rng, n)));
    scenarios.extend((0..15).map(|n| novel_stuck(&mut rng, n)));
    scenarios.extend((0..10).map(|n| novel_dropout(&mut rng, n)));
    scenarios.extend((0..10).map(|n| novel_rfid(&mut rng, n)));
    scenarios.extend((0..8).map(|n| novel_signal(&mut rng, n, "overheat", "overheat", "^Motor of conveyor C1 reports overtemperature")));
    scenarios.extend((0..7).map(|n| novel_signal(&mut rng, n, "estop", "estop", "^Emergency stop of conveyor C1")));

    let scenarios: Vec<ScenarioSpec> = scenarios
        .into_iter()
        .map(|v| serde_json::from_value::<ScenarioSpec>(v).expect("generated scenario is well-formed"))
        .collect();
    let suite = SuiteFile { id: "suite100".into(), scenarios };
    let text = serde_json::to_string_pretty(&suite).unwrap() + "\n";
    parse_suite(&text).expect("suite passes its own checks");
    std::fs::write(&out, text).expect("write suite");
    println!("wrote {} scenarios to {out}", suite.scenarios.len());
}
