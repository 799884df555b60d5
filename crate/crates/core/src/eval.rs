//! Two-level scoring of agent runs: is each output an executable command,
//! and does the command taken at each golden decision point address the
//! situation.

use std::collections::BTreeMap;
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentSpec, BackendDescriptor, BackendError};
use crate::orchestrator::{OrchestratorError, RunConfig, RunStatus, Session, Transcript, TranscriptRecord, Verdict};
use crate::registry::{ExecutionStatus, Invocation, Registry};
use crate::scenario::{Category, CommandPattern, GoldenPoint, GoldenSpec, ScenarioSpec, SuiteFile};
use crate::twin::RuleSet;

/// A ratio kept as counts so reports can be summed exactly.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(num <= den, "fraction {num}/{den} above one");
        Self { num, den }
    }

    pub fn value(self) -> Option<f64> {
        (self.den > 0).then(|| self.num as f64 / self.den as f64)
    }

    pub fn add(self, other: Fraction) -> Fraction {
        Fraction { num: self.num + other.num, den: self.den + other.den }
    }

    fn count(hit: bool) -> Fraction {
        Fraction { num: hit as u64, den: 1 }
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.value() {
            Some(v) => write!(f, "{:.0}%", v * 100.0),
            None => f.write_str("n/a"),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("scenario {scenario}: {source}")]
    Run { scenario: String, source: OrchestratorError },
    #[error("golden point {point}: {message}")]
    Golden { point: String, message: String },
}

/// Share of agent outputs that parsed as a decision (or plan) and validated.
pub fn score_executable(transcript: &Transcript) -> Fraction {
    let mut out = Fraction::default();
    for r in &transcript.records {
        match r {
            TranscriptRecord::Verdict { executable, .. } => out = out.add(Fraction::count(*executable)),
            TranscriptRecord::Plan { .. } => out = out.add(Fraction::count(true)),
            TranscriptRecord::PlanFailure { .. } => out = out.add(Fraction::count(false)),
            _ => {}
        }
    }
    out
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct PointOutcome {
    pub id: String,
    pub terminal: bool,
    /// The triggering event occurred and the agent decided afterwards.
    pub matched: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    pub executed: bool,
    pub effective: bool,
    pub optimal: bool,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
pub struct EffectivenessScore {
    pub points: Vec<PointOutcome>,
}

impl EffectivenessScore {
    fn rate(&self, terminal: bool) -> Fraction {
        self.points
            .iter()
            .filter(|p| p.terminal == terminal)
            .fold(Fraction::default(), |acc, p| acc.add(Fraction::count(p.effective)))
    }

    pub fn terminal(&self) -> Fraction {
        self.rate(true)
    }

    pub fn intermediate(&self) -> Fraction {
        self.rate(false)
    }

    pub fn unmatched(&self) -> Vec<&str> {
        self.points.iter().filter(|p| !p.matched).map(|p| p.id.as_str()).collect()
    }
}

/// Finds, for every golden point, the first decision its agent took after
/// the triggering event and checks that it validated, ran without error and
/// matches an acceptable pattern. Points whose trigger never occurred count
/// as not effective and are listed as unmatched.
pub fn score_effectiveness(
    transcript: &Transcript,
    golden: &GoldenSpec,
    registry: &Registry,
) -> Result<EffectivenessScore, EvalError> {
    let events: Vec<_> = transcript.events().collect();
    let mut points = Vec::with_capacity(golden.points.len());
    for point in &golden.points {
        let patterns = compile(point, registry)?;
        let trigger = Regex::new(&point.trigger)
            .map_err(|e| EvalError::Golden { point: point.id.clone(), message: e.to_string() })?;
        let hit = events.iter().filter(|e| trigger.is_match(&e.text)).nth(point.occurrence.saturating_sub(1));
        let mut outcome = PointOutcome {
            id: point.id.clone(),
            terminal: point.terminal,
            matched: false,
            command: None,
            executed: false,
            effective: false,
            optimal: false,
        };
        if let Some(event) = hit {
            if let Some((decision, invocation, command)) = decision_after(transcript, &point.agent, event.seq) {
                outcome.matched = true;
                outcome.command = command;
                if let Some(inv) = invocation {
                    outcome.executed = executed_ok(transcript, &point.agent, decision);
                    let acceptable = patterns.0.iter().any(|p| p.matches(&inv));
                    outcome.effective = outcome.executed && acceptable;
                    outcome.optimal = outcome.effective && patterns.1.iter().any(|p| p.matches(&inv));
                }
            }
        }
        points.push(outcome);
    }
    Ok(EffectivenessScore { points })
}

fn compile(point: &GoldenPoint, registry: &Registry) -> Result<(Vec<CommandPattern>, Vec<CommandPattern>), EvalError> {
    let parse = |list: &[String]| {
        list.iter()
            .map(|p| CommandPattern::parse(p, registry))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|message| EvalError::Golden { point: point.id.clone(), message })
    };
    Ok((parse(&point.acceptable)?, parse(&point.optimal)?))
}

/// (decision id, validated invocation, raw command) of the first decision
/// `agent` made with the triggering event already in view.
fn decision_after(transcript: &Transcript, agent: &str, seq: u64) -> Option<(u64, Option<Invocation>, Option<String>)> {
    let (decision, invocation) = transcript.records.iter().find_map(|r| match r {
        TranscriptRecord::Verdict { agent: a, decision, log_seq, invocation, .. } if a == agent && *log_seq >= seq => {
            Some((*decision, invocation.clone()))
        }
        _ => None,
    })?;
    let command = transcript.records.iter().find_map(|r| match r {
        TranscriptRecord::Decision { decision: d, command, .. } if *d == decision => Some(command.clone()),
        _ => None,
    });
    Some((decision, invocation, command))
}

fn executed_ok(transcript: &Transcript, agent: &str, decision: u64) -> bool {
    transcript.records.iter().any(|r| {
        matches!(r, TranscriptRecord::Execution { agent: a, decision: d, result, .. }
            if a == agent && *d == decision && result.status == ExecutionStatus::Ok)
    })
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ScenarioRow {
    pub id: String,
    pub category: Category,
    pub status: RunStatus,
    pub executable: Fraction,
    /// None when the scenario has no golden points and is left out of effectiveness.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effectiveness: Option<EffectivenessScore>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Scores one finished run. Pure: depends only on the transcript and golden data.
pub fn score_scenario(scenario: &ScenarioSpec, transcript: &Transcript, registry: &Registry) -> Result<ScenarioRow, EvalError> {
    let mut warnings = Vec::new();
    let effectiveness = if scenario.golden.points.is_empty() {
        warnings.push("no golden decision points; excluded from effectiveness".to_string());
        None
    } else {
        let score = score_effectiveness(transcript, &scenario.golden, registry)?;
        for id in score.unmatched() {
            warnings.push(format!("decision point {id} never reached"));
        }
        Some(score)
    };
    Ok(ScenarioRow {
        id: scenario.id.clone(),
        category: scenario.category,
        status: transcript.outcome().unwrap_or(RunStatus::Running),
        executable: score_executable(transcript),
        effectiveness,
        warnings,
    })
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
pub struct CategoryReport {
    pub scenarios: u64,
    /// Per decision.
    pub executable: Fraction,
    /// Scenarios in which every output was executable.
    pub executable_scenarios: Fraction,
    /// Terminal decision points: the headline rate.
    pub effective: Fraction,
    pub effective_intermediate: Fraction,
    pub deadlocks: u64,
}

impl CategoryReport {
    fn add(&mut self, row: &ScenarioRow) {
        self.scenarios += 1;
        self.executable = self.executable.add(row.executable);
        self.executable_scenarios = self.executable_scenarios.add(Fraction::count(row.executable.num == row.executable.den));
        if let Some(e) = &row.effectiveness {
            self.effective = self.effective.add(e.terminal());
            self.effective_intermediate = self.effective_intermediate.add(e.intermediate());
        }
        self.deadlocks += (row.status == RunStatus::Deadlock) as u64;
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct BackendReport {
    pub backend: String,
    pub overall: CategoryReport,
    pub categories: BTreeMap<Category, CategoryReport>,
    pub rows: Vec<ScenarioRow>,
}

impl BackendReport {
    pub fn from_rows(backend: impl Into<String>, rows: Vec<ScenarioRow>) -> Self {
        let mut overall = CategoryReport::default();
        let mut categories: BTreeMap<Category, CategoryReport> = BTreeMap::new();
        for row in &rows {
            overall.add(row);
            categories.entry(row.category).or_default().add(row);
        }
        Self { backend: backend.into(), overall, categories, rows }
    }

    pub fn n_decisions(&self) -> u64 {
        self.overall.executable.den
    }
}

/// Everything needed to run scenarios besides the backend.
#[derive(Clone)]
pub struct EvalSetup {
    pub registry: Registry,
    pub rules: RuleSet,
    pub agents: Vec<AgentSpec>,
    pub config: RunConfig,
}

impl EvalSetup {
    pub fn bundled() -> Self {
        Self {
            registry: crate::fixtures::registry(),
            rules: crate::fixtures::rules(),
            agents: crate::fixtures::agents(),
            config: RunConfig::default(),
        }
    }
}

/// Runs one scenario to its end. Deadlocks end the run like any other
/// outcome. Pending approvals are granted as actor `eval`.
pub fn run_scenario(scenario: &ScenarioSpec, backend: &BackendDescriptor, setup: &EvalSetup) -> Result<Transcript, EvalError> {
    let run_err = |source| EvalError::Run { scenario: scenario.id.clone(), source };
    let mut session = Session::new(
        scenario.clone(),
        setup.config.clone(),
        setup.registry.clone(),
        setup.rules.clone(),
        &setup.agents,
        backend.build()?,
    )
    .map_err(run_err)?;
    loop {
        match session.run() {
            Ok(RunStatus::AwaitingApproval) => {
                let pending: Vec<u64> = session
                    .approvals()
                    .iter()
                    .filter(|a| a.status == crate::orchestrator::ApprovalStatus::Pending)
                    .map(|a| a.id)
                    .collect();
                for id in pending {
                    session.resolve_approval(id, Verdict::Approved, "eval").map_err(run_err)?;
                }
            }
            Ok(_) | Err(OrchestratorError::ScenarioDeadlock { .. }) => break,
            Err(e) => return Err(run_err(e)),
        }
    }
    Ok(session.into_transcript())
}

/// Runs and scores every scenario of the suite against one backend.
pub fn run_suite(
    suite: &SuiteFile,
    backend: &BackendDescriptor,
    setup: &EvalSetup,
) -> Result<(BackendReport, Vec<Transcript>), EvalError> {
    let mut rows = Vec::with_capacity(suite.scenarios.len());
    let mut transcripts = Vec::with_capacity(suite.scenarios.len());
    for scenario in &suite.scenarios {
        let transcript = run_scenario(scenario, backend, setup)?;
        let row = score_scenario(scenario, &transcript, &setup.registry)?;
        for w in &row.warnings {
            if row.effectiveness.is_none() {
                tracing::warn!(scenario = %row.id, "{w}");
            } else {
                tracing::debug!(scenario = %row.id, "{w}");
            }
        }
        rows.push(row);
        transcripts.push(transcript);
    }
    Ok((BackendReport::from_rows(backend.label.clone(), rows), transcripts))
}

/// One row per backend and category, rates as whole percentages.
pub fn render_table(reports: &[BackendReport]) -> String {
    let header = ["backend", "category", "scenarios", "decisions", "executable", "exec/scenario", "effective", "intermediate"];
    let mut rows: Vec<[String; 8]> = Vec::new();
    for r in reports {
        let mut push = |category: &str, c: &CategoryReport| {
            rows.push([
                r.backend.clone(),
                category.to_string(),
                c.scenarios.to_string(),
                c.executable.den.to_string(),
                c.executable.to_string(),
                c.executable_scenarios.to_string(),
                c.effective.to_string(),
                c.effective_intermediate.to_string(),
            ]);
        };
        for (category, c) in &r.categories {
            push(category.as_str(), c);
        }
        push("all", &r.overall);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|row| row[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(padded.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec());
    for row in &rows {
        line(row.iter().map(String::as_str).collect());
    }
    out
}

pub fn render_json(reports: &[BackendReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize")
}

/// Minimum rates for CI use, as fractions in [0, 1].
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Default)]
pub struct Thresholds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executable: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective: Option<f64>,
}

impl Thresholds {
    /// Human-readable shortfalls; empty when every backend meets every bound.
    pub fn violations(&self, reports: &[BackendReport]) -> Vec<String> {
        let mut out = Vec::new();
        for r in reports {
            let checks = [("executable", self.executable, r.overall.executable), ("effective", self.effective, r.overall.effective)];
            for (name, min, got) in checks {
                let Some(min) = min else { continue };
                if got.value().unwrap_or(0.0) < min {
                    out.push(format!("{}: {name} rate {got} below {:.0}%", r.backend, min * 100.0));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use proptest::prelude::*;

    fn verdict(decision: u64, executable: bool) -> TranscriptRecord {
        TranscriptRecord::Verdict {
            at: 0,
            agent: "op".into(),
            decision,
            log_seq: decision,
            executable,
            class: (!executable).then(|| "SyntaxError".into()),
            detail: String::new(),
            invocation: None,
        }
    }

    #[test]
    fn forty_four_of_fifty_is_88_percent() {
        let records = (0..50).map(|i| verdict(i, i >= 6)).collect();
        let f = score_executable(&Transcript { records });
        assert_eq!(f, Fraction::new(44, 50));
        assert_eq!(f.to_string(), "88%");
    }

    #[test]
    fn percent_rounding_and_empty() {
        assert_eq!(Fraction::new(87, 100).to_string(), "87%");
        assert_eq!(Fraction::new(53, 100).to_string(), "53%");
        assert_eq!(Fraction::new(2, 3).to_string(), "67%");
        assert_eq!(Fraction::default().to_string(), "n/a");
    }

    fn scored(scenario: &str, backend: &str) -> ScenarioRow {
        let spec = fixtures::scenario(scenario).unwrap();
        let setup = EvalSetup::bundled();
        let t = run_scenario(&spec, &BackendDescriptor::parse(backend).unwrap(), &setup).unwrap();
        score_scenario(&spec, &t, &setup.registry).unwrap()
    }

    #[test]
    fn stuck_scenario_with_fallbacks_is_effective() {
        let row = scored("stuck_workpiece", "rule_oracle");
        let e = row.effectiveness.unwrap();
        assert_eq!(e.terminal(), Fraction::new(1, 1));
        assert_eq!(e.intermediate(), Fraction::new(2, 2));
        let stopped = e.points.iter().find(|p| p.id == "stopped").unwrap();
        assert!(stopped.command.as_deref().unwrap().starts_with("send_alert_to_human_supervisor("));
    }

    #[test]
    fn procedure_only_misses_the_stuck_workpiece() {
        let row = scored("stuck_workpiece", "rule_oracle:sop");
        assert_eq!(row.status, RunStatus::Deadlock);
        let e = row.effectiveness.unwrap();
        assert_eq!(e.terminal(), Fraction::new(0, 1));
        let stopped = e.points.iter().find(|p| p.id == "stopped").unwrap();
        assert!(stopped.matched && stopped.executed && !stopped.effective);
        assert_eq!(stopped.command.as_deref(), Some("pass()"));
    }

    #[test]
    fn waiting_at_the_final_point_is_executable_but_not_effective() {
        let setup = EvalSetup::bundled();
        let mut spec = fixtures::scenario("stuck_workpiece").unwrap();
        // ask the overdue point's question at the stop instead
        spec.golden.points.retain(|p| p.id == "overdue");
        spec.golden.points[0].acceptable = vec!["send_alert_to_human_supervisor(*)".into()];
        spec.golden.points[0].terminal = true;
        let t = run_scenario(&spec, &BackendDescriptor::parse("rule_oracle").unwrap(), &setup).unwrap();
        let row = score_scenario(&spec, &t, &setup.registry).unwrap();
        let p = &row.effectiveness.unwrap().points[0];
        assert_eq!(p.command.as_deref(), Some("wait(5)"));
        assert!(p.executed);
        assert!(!p.effective);
    }

    #[test]
    fn adversarial_scores_zero() {
        let row = scored("golden_handover", "adversarial");
        assert_eq!(row.executable.num, 0);
        assert!(row.executable.den > 0);
        assert_eq!(row.effectiveness.unwrap().terminal(), Fraction::new(0, 1));
    }

    #[test]
    fn no_points_means_excluded() {
        let setup = EvalSetup::bundled();
        let mut spec = fixtures::scenario("golden_handover").unwrap();
        spec.golden.points.clear();
        let t = run_scenario(&spec, &BackendDescriptor::parse("rule_oracle").unwrap(), &setup).unwrap();
        let row = score_scenario(&spec, &t, &setup.registry).unwrap();
        assert!(row.effectiveness.is_none());
        assert_eq!(row.warnings.len(), 1);
        let report = BackendReport::from_rows("x", vec![row]);
        assert_eq!(report.overall.effective, Fraction::default());
    }

    #[test]
    fn table_has_one_block_per_backend() {
        let a = BackendReport::from_rows("rule_oracle", vec![scored("golden_handover", "rule_oracle")]);
        let b = BackendReport::from_rows("adversarial", vec![scored("golden_handover", "adversarial")]);
        let table = render_table(&[a.clone(), b.clone()]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("rule_oracle") && lines[1].contains("100%"));
        assert!(lines[3].starts_with("adversarial") && lines[3].contains(" 0%"));
        let t = Thresholds { executable: Some(0.5), effective: None };
        assert!(t.violations(&[a.clone()]).is_empty());
        assert_eq!(t.violations(&[a, b]).len(), 1);
    }

    fn row(category: Category, exec: (u64, u64), terminal: Option<bool>) -> ScenarioRow {
        ScenarioRow {
            id: "s".into(),
            category,
            status: RunStatus::Finished,
            executable: Fraction::new(exec.0, exec.1),
            effectiveness: terminal.map(|t| EffectivenessScore {
                points: vec![PointOutcome {
                    id: "p".into(),
                    terminal: true,
                    matched: true,
                    command: None,
                    executed: t,
                    effective: t,
                    optimal: t,
                }],
            }),
            warnings: vec![],
        }
    }

    fn arb_row() -> impl Strategy<Value = ScenarioRow> {
        (any::<bool>(), 0u64..20, 0u64..20, proptest::option::of(any::<bool>())).prop_map(|(novel, a, b, t)| {
            let category = if novel { Category::Novel } else { Category::Routine };
            row(category, (a.min(b), a.max(b)), t)
        })
    }

    proptest! {
        #[test]
        fn removing_a_row_removes_only_its_counts(rows in proptest::collection::vec(arb_row(), 1..30), pick in any::<prop::sample::Index>()) {
            let i = pick.index(rows.len());
            let full = BackendReport::from_rows("b", rows.clone());
            let mut rest = rows.clone();
            let removed = rest.remove(i);
            let less = BackendReport::from_rows("b", rest);
            prop_assert_eq!(less.overall.executable.num + removed.executable.num, full.overall.executable.num);
            prop_assert_eq!(less.overall.executable.den + removed.executable.den, full.overall.executable.den);
            let eff = removed.effectiveness.as_ref().map(|e| e.terminal()).unwrap_or_default();
            prop_assert_eq!(less.overall.effective.add(eff), full.overall.effective);
            prop_assert_eq!(less.overall.scenarios + 1, full.overall.scenarios);
            let counted: u64 = full.categories.values().map(|c| c.scenarios).sum();
            prop_assert_eq!(counted, rows.len() as u64);
            for c in full.categories.values() {
                for f in [c.executable, c.executable_scenarios, c.effective, c.effective_intermediate] {
                    prop_assert!(f.value().map_or(true, |v| (0.0..=1.0).contains(&v)));
                }
            }
        }
    }
}
