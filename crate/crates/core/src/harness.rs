//! Headless runs: drive a scenario to its horizon and collect the report.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bus::DeadLetter;
use crate::domain::{RequestStatus, RobotId};
use crate::engine::{SimTime, TraceLine};
use crate::metrics::{
    lifecycles, robot_series, robot_table, robot_table_csv, tick_series, tick_series_csv, Record,
    RequestLifecycle, RobotRow, RobotTickSample, TickSample,
};
use crate::scenario::Scenario;
use crate::sim::Simulation;

/// Outcome of one scripted command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptOutcome {
    pub at: SimTime,
    pub kind: String,
    pub result: Result<Option<String>, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub arrived: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub unfinished: u64,
    pub failure_reasons: BTreeMap<String, u64>,
    pub dead_letters: u64,
    pub delivered_events: u64,
    pub pending_events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub duration: u64,
    pub units_per_tick: u64,
    pub summary: RunSummary,
    pub ticks: Vec<TickSample>,
    pub robots: Vec<RobotRow>,
    pub robot_series: Vec<RobotTickSample>,
    pub requests: Vec<RequestLifecycle>,
    pub dead_letters: Vec<DeadLetter>,
    pub script: Vec<ScriptOutcome>,
}

/// Report plus the raw material it was folded from.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub trace: Vec<TraceLine>,
    pub records: Vec<Record>,
}

pub fn run(scenario: &Scenario) -> RunOutput {
    run_with_seed(scenario, scenario.master_seed)
}

/// Applies scripted commands at their instants and stops at the horizon.
/// Events due exactly at `duration` are not delivered.
pub fn run_with_seed(scenario: &Scenario, seed: u64) -> RunOutput {
    let mut sim = Simulation::with_seed(scenario, seed);
    let horizon = SimTime(scenario.duration);
    let mut script: Vec<_> = scenario.script.iter().filter(|e| e.at < horizon).collect();
    script.sort_by_key(|e| e.at);
    let mut outcomes = Vec::new();
    for entry in script {
        sim.advance_before(entry.at).expect("script is sorted");
        let result = if entry.command.is_clock() {
            Err("clock commands are ignored in headless runs".to_owned())
        } else {
            sim.apply_command(entry.command.clone())
        };
        outcomes.push(ScriptOutcome {
            at: entry.at,
            kind: entry.command.kind().to_owned(),
            result,
        });
    }
    sim.advance_before(horizon).expect("horizon is not behind the clock");
    collect(&sim, scenario, seed, outcomes)
}

fn collect(sim: &Simulation, scenario: &Scenario, seed: u64, script: Vec<ScriptOutcome>) -> RunOutput {
    let world = sim.world();
    let records = world.log.clone();
    let upt = sim.units_per_tick();
    let ticks = scenario.ticks();
    let horizon = SimTime(scenario.duration);
    let initial_history: BTreeMap<RobotId, u64> =
        scenario.robots.iter().map(|r| (r.id.clone(), r.history)).collect();
    let requests = lifecycles(&records);
    let mut summary = RunSummary {
        arrived: requests.len() as u64,
        dead_letters: world.bus.dead_letters().len() as u64,
        delivered_events: sim.engine().delivered(),
        pending_events: sim.engine().pending() as u64,
        ..RunSummary::default()
    };
    for rq in &requests {
        match &rq.status {
            RequestStatus::Succeeded => summary.succeeded += 1,
            RequestStatus::Failed(reason) => {
                summary.failed += 1;
                *summary.failure_reasons.entry(reason.to_string()).or_default() += 1;
            }
            RequestStatus::Queued | RequestStatus::InProgress => summary.unfinished += 1,
        }
    }
    let report = RunReport {
        scenario: scenario.name.clone(),
        seed,
        duration: scenario.duration,
        units_per_tick: upt,
        summary,
        ticks: tick_series(&records, upt, ticks),
        robots: robot_table(&records, horizon),
        robot_series: robot_series(&records, &initial_history, upt, ticks),
        requests,
        dead_letters: world.bus.dead_letters().to_vec(),
        script,
    };
    RunOutput {
        report,
        trace: sim.engine().trace().to_vec(),
        records,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

/// Writes the tick series, robot table and report into `dir`, plus the event
/// trace and record log when `trace` is set. Returns the written file names.
pub fn write_outputs(output: &RunOutput, dir: &Path, format: OutputFormat, trace: bool) -> io::Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let report = &output.report;
    let mut files: Vec<(String, String)> = match format {
        OutputFormat::Csv => vec![
            ("ticks.csv".into(), tick_series_csv(&report.ticks)),
            ("robots.csv".into(), robot_table_csv(&report.robots)),
        ],
        OutputFormat::Json => vec![
            ("ticks.json".into(), pretty(&report.ticks)),
            ("robots.json".into(), pretty(&report.robots)),
        ],
    };
    files.push(("report.json".into(), pretty(report)));
    if trace {
        files.push(("trace.jsonl".into(), to_jsonl(&output.trace)));
        files.push(("records.jsonl".into(), to_jsonl(&output.records)));
    }
    for (name, body) in &files {
        fs::write(dir.join(name), body)?;
    }
    Ok(files.into_iter().map(|(name, _)| name).collect())
}

fn pretty<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}
