//! Runs the golden scenario against an OpenAI-compatible endpoint.
//!
//!     CELLPILOT_API_KEY=... cargo run --example remote_backend -- gpt-4o https://api.openai.com/v1
//!
//! Without arguments it only prints the descriptor it would use.

use cellpilot::agent::BackendDescriptor;
use cellpilot::eval::{run_scenario, score_executable, EvalSetup};
use cellpilot::fixtures;

fn main() {
    let mut args = std::env::args().skip(1);
    let model = args.next().unwrap_or_else(|| "gpt-4o".into());
    let endpoint = args.next();
    let descriptor = BackendDescriptor::parse(&format!(
        "remote:{model}@{}",
        endpoint.as_deref().unwrap_or("https://api.openai.com/v1")
    ))
    .unwrap();
    println!("{}", serde_json::to_string_pretty(&descriptor).unwrap());
    if endpoint.is_none() {
        return;
    }
    let transcript = run_scenario(&fixtures::scenario("golden_handover").unwrap(), &descriptor, &EvalSetup::bundled()).unwrap();
    for r in transcript.events() {
        println!("{}", r.line());
    }
    println!("executable: {}", score_executable(&transcript));
}
