//! Scores the rule oracle and the adversarial baseline on the bundled
//! 100-scenario suite.

use cellpilot::agent::BackendDescriptor;
use cellpilot::eval::{render_table, run_suite, EvalSetup};
use cellpilot::fixtures;

fn main() {
    let suite = fixtures::suite("suite100").unwrap();
    let setup = EvalSetup::bundled();
    let mut reports = Vec::new();
    for name in ["rule_oracle", "rule_oracle:sop", "adversarial"] {
        let (report, _) = run_suite(&suite, &BackendDescriptor::parse(name).unwrap(), &setup).unwrap();
        reports.push(report);
    }
    print!("{}", render_table(&reports));
}
