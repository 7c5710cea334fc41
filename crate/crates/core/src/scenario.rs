//! Scenario documents: robots, blueprints, workload, churn and policies.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::control::Command;
use crate::domain::{validate_blueprint, CapabilitySet, PlanBlueprint, RobotId};
use crate::engine::{RngStreams, SimTime, StreamName};
use crate::robot_agent::RobotAgentConfig;
use crate::robots_manager::DeregistrationPolicy;
use crate::sim::SimConfig;

pub const CHURN_DEMO: &str = include_str!("../scenarios/churn-demo.json");
pub const PLAN_FIXTURE: &str = include_str!("../scenarios/plan-fixture.json");

/// Looks up a scenario shipped with the crate by name.
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "churn-demo" => Some(CHURN_DEMO),
        "plan-fixture" => Some(PLAN_FIXTURE),
        _ => None,
    }
}

fn default_units_per_tick() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

fn default_requestor() -> String {
    "requestor".to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSpec {
    pub id: RobotId,
    pub capabilities: CapabilitySet,
    pub duration_range: [u64; 2],
    #[serde(default)]
    pub fail_probability: f64,
    /// Registered at t = 0.
    #[serde(default = "default_true")]
    pub registered: bool,
    /// Completed tasks before the run starts.
    #[serde(default)]
    pub history: u64,
}

impl RobotSpec {
    pub fn agent_config(&self) -> RobotAgentConfig {
        RobotAgentConfig {
            id: self.id.clone(),
            capabilities: self.capabilities.clone(),
            duration_range: self.duration_range,
            fail_probability: self.fail_probability,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadEntry {
    pub time: SimTime,
    pub request_id: String,
    pub blueprint_id: String,
    #[serde(default = "default_requestor")]
    pub requestor: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub requests_per_tick: u64,
    pub blueprint_pool: Vec<String>,
    #[serde(default = "default_requestor")]
    pub requestor: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    Explicit(Vec<WorkloadEntry>),
    Generator(GeneratorSpec),
}

impl Default for Workload {
    fn default() -> Self {
        Workload::Explicit(Vec::new())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub at: SimTime,
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnSpec {
    pub enabled: bool,
    #[serde(default = "default_units_per_tick")]
    pub steps_per_tick: u64,
}

impl Default for ChurnSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            steps_per_tick: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timeouts {
    pub plan_feedback: u64,
    pub task_feedback: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Self {
            plan_feedback: 20,
            task_feedback: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Policies {
    pub min_robots: usize,
    pub deregistration: DeregistrationPolicy,
}

impl Default for Policies {
    fn default() -> Self {
        Self {
            min_robots: 2,
            deregistration: DeregistrationPolicy::Defer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Free-form remarks, e.g. which values are invented.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub master_seed: u64,
    pub duration: u64,
    #[serde(default = "default_units_per_tick")]
    pub units_per_tick: u64,
    pub capability_universe: CapabilitySet,
    pub robots: Vec<RobotSpec>,
    pub blueprints: Vec<PlanBlueprint>,
    #[serde(default)]
    pub workload: Workload,
    /// World commands injected at fixed times, exactly as a control session
    /// would inject them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub script: Vec<ScriptEntry>,
    #[serde(default)]
    pub churn: ChurnSpec,
    #[serde(default)]
    pub timeouts: Timeouts,
    #[serde(default)]
    pub policies: Policies,
    #[serde(default)]
    pub bus_latency: u64,
}

/// One scheduled request arrival.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arrival {
    pub time: SimTime,
    pub request_id: String,
    pub requestor: String,
    pub blueprint_id: String,
}

impl Scenario {
    pub fn ticks(&self) -> u64 {
        let upt = self.units_per_tick.max(1);
        self.duration.div_ceil(upt)
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            plan_feedback_timeout: self.timeouts.plan_feedback,
            task_feedback_timeout: self.timeouts.task_feedback,
            min_robots: self.policies.min_robots,
            deregistration: self.policies.deregistration,
            bus_latency: self.bus_latency,
            churn_steps_per_tick: if self.churn.enabled {
                self.churn.steps_per_tick
            } else {
                0
            },
        }
    }

    /// Materializes the workload. Generated blueprints are drawn on the
    /// `requests` stream.
    pub fn arrivals(&self, rng: &mut RngStreams) -> Vec<Arrival> {
        match &self.workload {
            Workload::Explicit(entries) => {
                let mut out: Vec<Arrival> = entries
                    .iter()
                    .map(|e| Arrival {
                        time: e.time,
                        request_id: e.request_id.clone(),
                        requestor: e.requestor.clone(),
                        blueprint_id: e.blueprint_id.clone(),
                    })
                    .collect();
                out.sort_by_key(|a| a.time);
                out
            }
            Workload::Generator(g) => {
                let upt = self.units_per_tick.max(1);
                let mut out = Vec::new();
                let mut n = 1;
                for tick in 0..self.ticks() {
                    for _ in 0..g.requests_per_tick {
                        let Ok(i) = rng.pick(StreamName::Requests, g.blueprint_pool.len()) else {
                            continue;
                        };
                        out.push(Arrival {
                            time: SimTime(tick * upt),
                            request_id: format!("Rq{n}"),
                            requestor: g.requestor.clone(),
                            blueprint_id: g.blueprint_pool[i].clone(),
                        });
                        n += 1;
                    }
                }
                out
            }
        }
    }

    pub fn validate(&self) -> Result<(), Vec<ScenarioError>> {
        let mut errs = Vec::new();
        let mut err = |path: String, message: String| errs.push(ScenarioError { path, message });

        if self.duration == 0 {
            err("duration".into(), "must be greater than 0".into());
        }
        if self.units_per_tick == 0 {
            err("units_per_tick".into(), "must be at least 1".into());
        }
        for cap in &self.capability_universe {
            if cap.as_str().is_empty() {
                err("capability_universe".into(), "empty capability token".into());
            }
        }

        let mut robot_ids = BTreeSet::new();
        for (i, r) in self.robots.iter().enumerate() {
            let path = format!("robots[{i}]");
            if r.id.is_empty() {
                err(format!("{path}.id"), "empty robot id".into());
            }
            if !robot_ids.insert(r.id.as_str()) {
                err(format!("{path}.id"), format!("duplicate robot id {}", r.id));
            }
            for cap in r.capabilities.difference(&self.capability_universe) {
                err(format!("{path}.capabilities"), format!("unknown capability {cap}"));
            }
            if let Err(e) = r.agent_config().validate() {
                err(path, e.to_string());
            }
        }

        let mut blueprint_ids = BTreeSet::new();
        for (i, bp) in self.blueprints.iter().enumerate() {
            let path = format!("blueprints[{i}]");
            if !blueprint_ids.insert(bp.id.as_str()) {
                err(format!("{path}.id"), format!("duplicate blueprint id {}", bp.id));
            }
            if let Err(list) = validate_blueprint(bp, &self.capability_universe) {
                for e in list {
                    err(format!("{path}.tasks"), e.to_string());
                }
            }
        }

        let mut resolvable: BTreeSet<&str> = blueprint_ids.clone();
        for (i, entry) in self.script.iter().enumerate() {
            let path = format!("script[{i}]");
            if entry.at.units() >= self.duration {
                err(format!("{path}.at"), format!("time {} is not before duration {}", entry.at, self.duration));
            }
            match &entry.command {
                Command::StepClock { .. } | Command::RunClock { .. } | Command::PauseClock => {
                    err(format!("{path}.command"), "clock commands cannot be scripted".into());
                }
                Command::AddBlueprint { blueprint } | Command::ModifyBlueprint { blueprint } => {
                    resolvable.insert(blueprint.id.as_str());
                    if let Err(list) = validate_blueprint(blueprint, &self.capability_universe) {
                        for e in list {
                            err(format!("{path}.command.blueprint"), e.to_string());
                        }
                    }
                }
                _ => {}
            }
        }

        match &self.workload {
            Workload::Explicit(entries) => {
                let mut ids = BTreeSet::new();
                for (i, e) in entries.iter().enumerate() {
                    let path = format!("workload.explicit[{i}]");
                    if e.time.units() >= self.duration {
                        err(format!("{path}.time"), format!("time {} is not before duration {}", e.time, self.duration));
                    }
                    if !ids.insert(e.request_id.as_str()) {
                        err(format!("{path}.request_id"), format!("duplicate request id {}", e.request_id));
                    }
                    if !resolvable.contains(e.blueprint_id.as_str()) {
                        err(format!("{path}.blueprint_id"), format!("unknown blueprint {}", e.blueprint_id));
                    }
                }
            }
            Workload::Generator(g) => {
                if g.blueprint_pool.is_empty() && g.requests_per_tick > 0 {
                    err("workload.generator.blueprint_pool".into(), "empty blueprint pool".into());
                }
                for (i, id) in g.blueprint_pool.iter().enumerate() {
                    if !resolvable.contains(id.as_str()) {
                        err(format!("workload.generator.blueprint_pool[{i}]"), format!("unknown blueprint {id}"));
                    }
                }
            }
        }

        if self.churn.enabled && self.churn.steps_per_tick == 0 {
            err("churn.steps_per_tick".into(), "must be at least 1 when churn is enabled".into());
        }
        if self.timeouts.plan_feedback == 0 {
            err("timeouts.plan_feedback".into(), "must be at least 1".into());
        }
        if self.timeouts.task_feedback == 0 {
            err("timeouts.task_feedback".into(), "must be at least 1".into());
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Field-level diagnostic with a path to the offending entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Parses and fully validates a scenario document.
pub fn load_scenario(document: &str) -> Result<Scenario, Vec<ScenarioError>> {
    let scenario: Scenario = serde_json::from_str(document).map_err(|e| {
        vec![ScenarioError {
            path: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        }]
    })?;
    scenario.validate()?;
    Ok(scenario)
}
