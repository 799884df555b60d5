//! `cellpilot run | eval | replay | serve`.

use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use cellpilot::agent::BackendDescriptor;
use cellpilot::eval::{render_json, render_table, run_suite, EvalSetup, Thresholds};
use cellpilot::orchestrator::{
    first_difference, replay, ApprovalMode, ApprovalStatus, OrchestratorError, RunConfig, RunStatus, Session, Transcript,
    Verdict,
};
use clap::{Parser, Subcommand, ValueEnum};

use crate::sessions::{resolve_scenario, resolve_suite, SessionManager};

#[derive(Parser, Debug)]
#[command(name = "cellpilot", version, about = "Run, evaluate and serve agent-controlled production cell scenarios")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Approve {
    Auto,
    Human,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one scenario and print its transcript (JSON lines).
    Run {
        /// Bundled scenario name or path to a scenario file.
        scenario: String,
        #[arg(long, default_value = "rule_oracle")]
        backend: String,
        #[arg(long, value_enum, default_value = "auto")]
        approve: Approve,
        /// Print the event log instead of the transcript.
        #[arg(long)]
        log: bool,
        /// Also write the transcript here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional run configuration (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score one or more backends on a suite and print the report.
    Eval {
        /// Bundled suite name or path to a suite file.
        suite: String,
        /// Backend descriptor; repeat to compare several.
        #[arg(long, required = true)]
        backend: Vec<String>,
        /// Write the structured report here.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Fail when any backend's per-decision executable rate is lower (0..1).
        #[arg(long)]
        min_executable: Option<f64>,
        /// Fail when any backend's terminal effectiveness rate is lower (0..1).
        #[arg(long)]
        min_effective: Option<f64>,
    },
    /// Re-run a transcript against its recorded responses and diff.
    Replay { transcript: PathBuf },
    /// Start the HTTP gateway.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Default backend for new sessions.
        #[arg(long, default_value = "rule_oracle")]
        backend: String,
        /// Extra directory searched for `<name>.json` scenarios.
        #[arg(long)]
        scenario_dir: Option<PathBuf>,
        /// Virtual ms per wall-clock ms for new sessions; 0 runs unpaced.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("CELLPILOT_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Run { scenario, backend, approve, log, out, config } => run(&scenario, &backend, approve, log, out, config),
        Command::Eval { suite, backend, json, min_executable, min_effective } => {
            eval(&suite, &backend, json, Thresholds { executable: min_executable, effective: min_effective })
        }
        Command::Replay { transcript } => replay_cmd(&transcript),
        Command::Serve { port, host, backend, scenario_dir, speed } => serve(&host, port, &backend, scenario_dir, speed),
    }
}

fn run(scenario: &str, backend: &str, approve: Approve, log: bool, out: Option<PathBuf>, config: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let spec = resolve_scenario(scenario, None).map_err(anyhow::Error::msg)?;
    let descriptor = BackendDescriptor::parse(backend)?;
    let mut setup = EvalSetup::bundled();
    if let Some(path) = config {
        let text = std::fs::read_to_string(&path).with_context(|| path.display().to_string())?;
        setup.config = serde_json::from_str::<RunConfig>(&text).with_context(|| path.display().to_string())?;
    }
    if let Approve::Human = approve {
        setup.config.approval_mode = ApprovalMode::Human;
    }
    let mut session = Session::new(spec, setup.config, setup.registry, setup.rules, &setup.agents, descriptor.build()?)?;
    let stdin = std::io::stdin();
    let mut answers = stdin.lock().lines();
    let outcome = loop {
        match session.run() {
            Ok(RunStatus::AwaitingApproval) => {
                let pending: Vec<_> = session.approvals().iter().filter(|a| a.status == ApprovalStatus::Pending).cloned().collect();
                for a in pending {
                    eprint!("[approval {}] {} wants '{}' ({}). approve? [y/N] ", a.id, a.agent, a.invocation, a.reason);
                    std::io::stderr().flush().ok();
                    let answer = answers.next().and_then(Result::ok).unwrap_or_default();
                    let verdict = if matches!(answer.trim(), "y" | "Y" | "yes") { Verdict::Approved } else { Verdict::Rejected };
                    session.resolve_approval(a.id, verdict, "cli")?;
                }
            }
            Ok(status) => break Ok(status),
            Err(OrchestratorError::ScenarioDeadlock { at }) => break Err(at),
            Err(e) => return Err(e.into()),
        }
    };
    let transcript = session.transcript();
    if let Some(path) = out {
        std::fs::write(&path, transcript.to_jsonl()).with_context(|| path.display().to_string())?;
    }
    let mut stdout = std::io::stdout().lock();
    if log {
        for r in session.log().records() {
            writeln!(stdout, "{}", r.line())?;
        }
    } else {
        stdout.write_all(transcript.to_jsonl().as_bytes())?;
    }
    match outcome {
        Ok(status) => {
            eprintln!("run finished: {}", serde_json::to_value(status)?.as_str().unwrap_or_default());
            Ok(ExitCode::SUCCESS)
        }
        Err(at) => {
            eprintln!("scenario deadlock at {at} ms (transcript kept)");
            Ok(ExitCode::from(3))
        }
    }
}

fn eval(suite: &str, backends: &[String], json: Option<PathBuf>, thresholds: Thresholds) -> anyhow::Result<ExitCode> {
    for (name, v) in [("--min-executable", thresholds.executable), ("--min-effective", thresholds.effective)] {
        if v.is_some_and(|v| !(0.0..=1.0).contains(&v)) {
            bail!("{name} must lie in [0, 1]");
        }
    }
    let suite = resolve_suite(suite).map_err(anyhow::Error::msg)?;
    let setup = EvalSetup::bundled();
    let mut reports = Vec::new();
    for b in backends {
        let (report, _) = run_suite(&suite, &BackendDescriptor::parse(b)?, &setup)?;
        reports.push(report);
    }
    print!("{}", render_table(&reports));
    if let Some(path) = json {
        std::fs::write(&path, render_json(&reports)).with_context(|| path.display().to_string())?;
    }
    let violations = thresholds.violations(&reports);
    for v in &violations {
        eprintln!("below threshold: {v}");
    }
    Ok(if violations.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn replay_cmd(path: &PathBuf) -> anyhow::Result<ExitCode> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let original = Transcript::from_jsonl(&text).with_context(|| path.display().to_string())?;
    let (_, backend, _) = original.header().context("transcript has no header")?;
    let setup = EvalSetup::bundled();
    let again = replay(&original, setup.registry, setup.rules, &setup.agents, backend)?;
    match first_difference(&original.body_jsonl(), &again.body_jsonl()) {
        None => {
            println!("replay identical: {} records", again.records.len());
            Ok(ExitCode::SUCCESS)
        }
        Some((line, was, now)) => {
            println!("replay differs at body line {line}\n- {was}\n+ {now}");
            Ok(ExitCode::FAILURE)
        }
    }
}

fn serve(host: &str, port: u16, backend: &str, scenario_dir: Option<PathBuf>, speed: f64) -> anyhow::Result<ExitCode> {
    BackendDescriptor::parse(backend)?;
    if !(speed.is_finite() && speed >= 0.0) {
        bail!("--speed must be a non-negative number");
    }
    let addr: SocketAddr = format!("{host}:{port}").parse().context("listen address")?;
    let manager = SessionManager::new(EvalSetup::bundled(), backend, scenario_dir, speed);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(crate::server::serve(manager, addr))?;
    Ok(ExitCode::SUCCESS)
}
