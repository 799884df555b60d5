use cellpilot::plant::{ConveyorStation, Location, PlantState, SUB_STEP_MS};
use cellpilot::registry::{ArgValue, Invocation};
use proptest::prelude::*;

#[derive(Clone, Debug)]
enum Op {
    Spawn,
    Run { forward: bool, secs: i64 },
    Stop,
    Hold(bool),
    Advance(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::Spawn),
        (any::<bool>(), 1..20i64).prop_map(|(forward, secs)| Op::Run { forward, secs }),
        Just(Op::Stop),
        any::<bool>().prop_map(Op::Hold),
        (1..60u64).prop_map(Op::Advance),
    ]
}

fn apply(plant: &mut PlantState, op: &Op, spawned: &mut usize) {
    let now = plant.now();
    let call = |service: &str, args: Vec<ArgValue>| Invocation::new(service, args).issued("op", now, Some("c1"));
    let _ = match op {
        Op::Spawn => {
            *spawned += 1;
            plant.spawn_workpiece("c1", &format!("W{spawned}")).map(|_| ())
        }
        Op::Run { forward, secs } => {
            let dir = if *forward { "forward" } else { "backward" };
            plant.apply_actuation(&call("conveyor_belt_run", vec![ArgValue::Text(dir.into()), ArgValue::Int(*secs)])).map(|_| ())
        }
        Op::Stop => plant.apply_actuation(&call("conveyor_belt_stop", vec![])).map(|_| ()),
        Op::Hold(true) => plant.apply_actuation(&call("activate_material_holder", vec![])).map(|_| ()),
        Op::Hold(false) => plant.apply_actuation(&call("deactivate_material_holder", vec![])).map(|_| ()),
        Op::Advance(steps) => {
            plant.advance(steps * SUB_STEP_MS);
            Ok(())
        }
    };
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn sensors_follow_geometry(
        length_dm in 3..25i64,
        speed_cms in 5..40i64,
        ops in proptest::collection::vec(op(), 1..50),
    ) {
        let mut plant = PlantState::new();
        plant.add_station(ConveyorStation::new("c1").with_geometry(length_dm as f64 / 10.0, speed_cms as f64 / 100.0));
        let length_um = plant.station("c1").unwrap().belt_length_um;
        let mut spawned = 0;
        let mut last_now = 0;
        for op in &ops {
            let before = plant.now();
            apply(&mut plant, op, &mut spawned);
            if let Op::Advance(steps) = op {
                prop_assert_eq!(plant.now(), before + steps * SUB_STEP_MS);
            }
            prop_assert!(plant.now() >= last_now);
            last_now = plant.now();
            let st = plant.station("c1").unwrap();
            prop_assert_eq!((st.entrance_sensor, st.ready_sensor), plant.sensor_predicate("c1"));
            for w in plant.workpieces.values() {
                if let Location::Belt { offset_um, .. } = &w.location {
                    prop_assert!((0..=length_um).contains(offset_um), "{} at {} um", w.id, offset_um);
                }
            }
        }
    }

    #[test]
    fn engaged_holder_pins_workpieces(forward in any::<bool>(), secs in 1..15i64, steps in 1..100u64) {
        let mut plant = PlantState::new();
        plant.add_station(ConveyorStation::new("c1"));
        plant.spawn_workpiece("c1", "W1").unwrap();
        let call = |plant: &PlantState, service: &str, args: Vec<ArgValue>| {
            Invocation::new(service, args).issued("op", plant.now(), Some("c1"))
        };
        let run = call(&plant, "conveyor_belt_run", vec![ArgValue::Text("forward".into()), ArgValue::Int(10)]);
        plant.apply_actuation(&run).unwrap();
        while !plant.station("c1").unwrap().ready_sensor {
            plant.advance(SUB_STEP_MS);
        }
        let hold = call(&plant, "activate_material_holder", vec![]);
        plant.apply_actuation(&hold).unwrap();
        let dir = if forward { "forward" } else { "backward" };
        let again = call(&plant, "conveyor_belt_run", vec![ArgValue::Text(dir.into()), ArgValue::Int(secs)]);
        let _ = plant.apply_actuation(&again);
        let start = plant.offset_m("W1");
        plant.advance(steps * SUB_STEP_MS);
        prop_assert_eq!(plant.offset_m("W1"), start);
        prop_assert!(plant.station("c1").unwrap().ready_sensor);
    }
}
