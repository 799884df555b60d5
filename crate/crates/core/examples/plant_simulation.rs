//! Drives one conveyor by hand and prints the sensor edges as the workpiece
//! travels from the entrance to the ready position.

use cellpilot::plant::{ConveyorStation, PlantState};
use cellpilot::registry::{ArgValue, Invocation};

fn main() {
    let mut plant = PlantState::new();
    plant.add_station(ConveyorStation::new("conveyor1").with_geometry(1.0, 0.2));

    for change in plant.spawn_workpiece("conveyor1", "W1").unwrap() {
        println!("{:>6} ms  {} = {:?}", change.at, change.address, change.new_value);
    }
    let run = Invocation::new("conveyor_belt_run", vec![ArgValue::Text("forward".into()), ArgValue::Int(10)])
        .issued("op_conveyor", plant.now(), Some("conveyor1"));
    plant.apply_actuation(&run).unwrap();

    while plant.now() < 12_000 {
        for change in plant.advance(500) {
            println!("{:>6} ms  {} = {:?}", change.at, change.address, change.new_value);
        }
    }
    let station = plant.station("conveyor1").unwrap();
    println!(
        "W1 at {:.2} m, entrance={} ready={}",
        plant.offset_m("W1").unwrap(),
        station.entrance_sensor,
        station.ready_sensor
    );
}
