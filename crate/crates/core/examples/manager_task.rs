//! A manager agent splits a user task into operator steps; the AGV scenario
//! then plays it out.

use cellpilot::fixtures;
use cellpilot::orchestrator::{RunConfig, Session};

fn main() {
    let mut session = Session::new(
        fixtures::scenario("agv_transport").unwrap(),
        RunConfig::default(),
        fixtures::registry(),
        fixtures::rules(),
        &fixtures::agents(),
        Box::new(fixtures::full_oracle()),
    )
    .unwrap();
    let status = session.run().unwrap();
    for plan in session.plans() {
        for step in &plan.steps {
            println!("plan step {} -> {}: {}", step.id, step.assignee, step.instruction);
        }
    }
    for r in session.log().records() {
        println!("{}", r.line());
    }
    println!("status {status:?} at {} ms", session.now());
}
