use cellpilot::agent::BackendDescriptor;
use cellpilot::eval::{run_scenario, EvalSetup};
use cellpilot::fixtures;
use cellpilot::orchestrator::{first_difference, replay, RunStatus};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn suite_runs_replay_identically(index in 0..100usize) {
        let suite = fixtures::suite("suite100").unwrap();
        let setup = EvalSetup::bundled();
        let original = run_scenario(&suite.scenarios[index], &BackendDescriptor::parse("rule_oracle").unwrap(), &setup).unwrap();
        let again = replay(&original, setup.registry, setup.rules, &setup.agents, "replay").unwrap();
        prop_assert_eq!(first_difference(&original.body_jsonl(), &again.body_jsonl()), None);
    }
}

#[test]
fn bundled_scenarios_finish_with_the_full_oracle() {
    let setup = EvalSetup::bundled();
    for name in fixtures::scenario_names() {
        let t = run_scenario(&fixtures::scenario(name).unwrap(), &BackendDescriptor::parse("rule_oracle").unwrap(), &setup).unwrap();
        assert_eq!(t.outcome(), Some(RunStatus::Finished), "{name}");
    }
}

#[test]
fn suite_scenarios_pass_schema_and_pattern_checks() {
    let registry = fixtures::registry();
    let suite = fixtures::suite("suite100").unwrap();
    let mut ids = std::collections::BTreeSet::new();
    for s in &suite.scenarios {
        s.check(&s.id).unwrap();
        s.check_patterns(&registry).unwrap();
        assert!(ids.insert(s.id.clone()), "duplicate id {}", s.id);
    }
}
