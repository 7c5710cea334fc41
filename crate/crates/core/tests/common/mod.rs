//! Oracles shared by the integration and acceptance targets.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use mrsim_core::domain::{PlanBlueprint, RequestStatus};
use mrsim_core::harness::RunOutput;
use mrsim_core::metrics::{robot_ledgers, PlanDecision};
use mrsim_core::planner::{PlanError, PlannerSnapshot};
use mrsim_core::{load_scenario, SimTime};

pub fn scenario_from(value: serde_json::Value) -> mrsim_core::Scenario {
    load_scenario(&value.to_string()).unwrap_or_else(|e| panic!("invalid scenario: {e:?}"))
}

/// Run-level invariants over a finished headless run of `duration` units.
pub fn check_run(out: &RunOutput, duration: u64) -> Result<(), String> {
    let report = &out.report;
    let mut cum_arrived = 0;
    let mut cum_processed = 0;
    for t in &report.ticks {
        if t.processed != t.successful + t.failed {
            return Err(format!("tick {}: processed {} != {} + {}", t.tick, t.processed, t.successful, t.failed));
        }
        cum_arrived += t.arrived;
        cum_processed += t.processed;
        if cum_processed > cum_arrived {
            return Err(format!("tick {}: processed more than arrived", t.tick));
        }
        if t.unprocessed != cum_arrived - cum_processed {
            return Err(format!("tick {}: unprocessed {} does not reconcile", t.tick, t.unprocessed));
        }
    }
    let last = report.ticks.last().map(|t| t.unprocessed).unwrap_or(0);
    if last != report.summary.unfinished {
        return Err(format!("final unprocessed {last} != unfinished {}", report.summary.unfinished));
    }
    if report.summary.arrived != report.summary.succeeded + report.summary.failed + report.summary.unfinished {
        return Err("request counts do not add up".into());
    }
    for row in &report.robots {
        if row.t_c + row.t_unc + row.t_unr != duration || row.t_ov != duration {
            return Err(format!("{}: ledger {:?} does not close at {duration}", row.robot, row));
        }
        if let (Some(a), Some(u)) = (row.availability, row.utilization) {
            if !(u <= a + 1e-12 && a <= 1.0 + 1e-12) {
                return Err(format!("{}: utilization {u} / availability {a} out of order", row.robot));
            }
        }
    }
    let recount = robot_ledgers(&out.records, SimTime(duration));
    for row in &report.robots {
        let (ledger, _) = recount[&row.robot];
        if (ledger.controlled, ledger.uncontrolled, ledger.unregistered) != (row.t_c, row.t_unc, row.t_unr) {
            return Err(format!("{}: table disagrees with transition recount", row.robot));
        }
    }
    let mut notified: BTreeMap<&str, u32> = BTreeMap::new();
    for r in &out.records {
        if let mrsim_core::metrics::Record::RequestorNotified { request_id, .. } = r {
            *notified.entry(request_id).or_default() += 1;
        }
    }
    for rq in &report.requests {
        let expected = u32::from(matches!(rq.status, RequestStatus::Succeeded | RequestStatus::Failed(_)));
        let got = notified.get(rq.id.as_str()).copied().unwrap_or(0);
        if rq.terminal.is_some_and(|t| t.units() < duration) && got != expected {
            return Err(format!("{}: requestor notified {got} times", rq.id));
        }
        if got > 1 {
            return Err(format!("{}: requestor notified {got} times", rq.id));
        }
    }
    Ok(())
}

/// Brute-force check that every decision picked an eligible robot of least
/// tentative load, recomputing loads from the snapshot and earlier decisions.
pub fn check_argmin(
    bp: &PlanBlueprint,
    snap: &PlannerSnapshot,
    min_robots: usize,
    outcome: &Result<Vec<PlanDecision>, PlanError>,
) -> Result<(), String> {
    if snap.robots.len() < min_robots {
        return match outcome {
            Err(PlanError::InsufficientRobots { .. }) => Ok(()),
            other => Err(format!("expected InsufficientRobots, got {other:?}")),
        };
    }
    let mut load: BTreeMap<&str, u64> = snap.robots.iter().map(|r| (r.id.as_str(), r.history)).collect();
    let decisions = match outcome {
        Ok(d) => d.as_slice(),
        Err(PlanError::NoCapableRobot(label)) => {
            let idx = bp
                .tasks
                .iter()
                .position(|t| t.label == *label)
                .ok_or_else(|| format!("unknown label {label}"))?;
            let capable = |i: usize| {
                snap.robots
                    .iter()
                    .any(|r| bp.tasks[i].required.is_subset(&r.capabilities))
            };
            if (0..idx).any(|i| !capable(i)) || capable(idx) {
                return Err(format!("NoCapableRobot({label}) is not the first uncovered task"));
            }
            return Ok(());
        }
        Err(e) => return Err(format!("unexpected {e:?}")),
    };
    if decisions.len() != bp.tasks.len() {
        return Err("one decision per task expected".into());
    }
    for (task, d) in bp.tasks.iter().zip(decisions) {
        let eligible: BTreeSet<&str> = snap
            .robots
            .iter()
            .filter(|r| task.required.iter().all(|c| r.capabilities.contains(c)))
            .map(|r| r.id.as_str())
            .collect();
        if !eligible.contains(d.robot.as_str()) {
            return Err(format!("{}: {} is not eligible", task.label, d.robot));
        }
        let min = eligible.iter().map(|r| load[r]).min().unwrap();
        if load[d.robot.as_str()] != min {
            return Err(format!("{}: {} has load {} but min is {min}", task.label, d.robot, load[d.robot.as_str()]));
        }
        *load.get_mut(d.robot.as_str()).unwrap() += 1;
    }
    Ok(())
}

/// Single-server FCFS queue replayed one time unit at a time. Takes
/// (arrival, service time) in arrival order and returns start times.
pub fn fcfs_replay(jobs: &[(u64, u64)]) -> Vec<u64> {
    let mut starts = vec![None; jobs.len()];
    let mut busy_until = 0;
    let mut next = 0;
    let mut t = 0;
    while next < jobs.len() {
        if t >= busy_until && jobs[next].0 <= t {
            starts[next] = Some(t);
            busy_until = t + jobs[next].1;
            next += 1;
            continue;
        }
        t += 1;
    }
    starts.into_iter().map(Option::unwrap).collect()
}
