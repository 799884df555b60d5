//! Raw signal writes go into the data pool; the bundled rules turn the
//! changes into the sentences agents read.

use cellpilot::fixtures;
use cellpilot::twin::{DataPool, SignalValue};

fn main() {
    let rules = fixtures::rules();
    let mut pool = DataPool::new();
    let writes = [
        ("conveyor1.BG56.detected", SignalValue::Bool(false), 0),
        ("conveyor1.H1.engaged", SignalValue::Bool(false), 0),
        ("conveyor1.C1.state", SignalValue::text("stopped"), 0),
        ("conveyor1.C1.state", SignalValue::text("forward"), 14_000),
        ("conveyor1.BG56.detected", SignalValue::Bool(true), 14_000),
        ("conveyor1.H1.engaged", SignalValue::Bool(true), 15_000),
        ("conveyor1.H1.engaged", SignalValue::Bool(false), 17_000),
    ];
    for (address, value, at) in writes {
        let Some(change) = pool.update_signal(address, value, at).unwrap() else { continue };
        for draft in rules.observe(&[change], &pool) {
            println!("{} ms [{}] {}  tags={:?}", draft.at, draft.source, draft.text, draft.tags);
        }
    }
    println!("{} signals, {} changes in history", pool.current().len(), pool.history().len());
}
