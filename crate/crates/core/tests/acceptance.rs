//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use serde_json::json;

use common::{check_argmin, check_run, fcfs_replay, scenario_from};
use mrsim_core::domain::{caps, FailureReason, PlanBlueprint, RequestStatus, TaskSpec};
use mrsim_core::engine::RngStreams;
use mrsim_core::harness::{run, run_with_seed, to_jsonl};
use mrsim_core::metrics::{latency, robot_kpis, Record, RobotTimeLedger};
use mrsim_core::planner::{plan, PlannerSnapshot, RobotView, TieMarks};
use mrsim_core::{bundled, load_scenario, Command, Scenario, Session, SimTime, Simulation};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bundled_scenario(name: &str) -> Scenario {
    load_scenario(bundled(name).expect("bundled scenario")).expect("bundled scenario is valid")
}

fn golden_fixture() -> Check {
    let sc = bundled_scenario("plan-fixture");
    let expected = [("T1", "R1"), ("T2", "R1"), ("T3", "R3")];
    for seed in 0..200 {
        let mut sim = Simulation::with_seed(&sc, seed);
        sim.advance_before(SimTime(1)).map_err(|e| e.to_string())?;
        let plan = sim
            .world()
            .planner
            .last_plan
            .clone()
            .ok_or_else(|| format!("seed {seed}: no plan"))?;
        let got: Vec<(&str, &str)> = plan
            .assignments
            .iter()
            .map(|a| (a.task.label.as_str(), a.robot.as_str()))
            .collect();
        ensure(got == expected, || format!("seed {seed}: {got:?}"))?;
        let ties = sim.world().log.iter().any(|r| {
            matches!(r, Record::PlanComputed { decisions, .. } if decisions.iter().any(|d| d.tie_break))
        });
        ensure(!ties, || format!("seed {seed}: unexpected tie-break"))?;
    }
    Ok("T1->R1, T2->R1, T3->R3 for 200 seeds".into())
}

fn reference_kpis() -> Check {
    // (robot, (T_c, T_unc, T_unr), expected (availability, utilization, effectiveness))
    let rows = [
        ("Robot 2", (8, 9, 13), (0.57, 0.27, 0.89)),
        ("Robot 3", (12, 10, 8), (0.73, 0.40, 1.20)),
    ];
    for (name, (c, u, r), (a, ut, e)) in rows {
        let ledger = RobotTimeLedger::new(c, u, r);
        let k = robot_kpis(&ledger, 30).ok_or("kpis undefined")?;
        let eff = k.effectiveness.ok_or("effectiveness undefined")?;
        for (label, got, want) in [("availability", k.availability, a), ("utilization", k.utilization, ut), ("effectiveness", eff, e)] {
            ensure((got - want).abs() <= 0.005, || format!("{name} {label}: {got:.4} vs {want}"))?;
        }
    }
    Ok("Robot 2 and Robot 3 within 0.005".into())
}

fn churn_replay() -> Check {
    let sc = bundled_scenario("churn-demo");
    ensure(sc.duration == 30 && sc.robots.len() == 3 && sc.churn.enabled, || "scenario shape".into())?;
    let mut slowest = Duration::ZERO;
    let mut totals = (0, 0, 0);
    for seed in 1..=10 {
        let started = Instant::now();
        let out = run_with_seed(&sc, seed);
        let took = started.elapsed();
        slowest = slowest.max(took);
        ensure(took < Duration::from_secs(5), || format!("seed {seed} took {took:?}"))?;
        check_run(&out, 30).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure(out.report.ticks.len() == 30, || format!("seed {seed}: tick count"))?;
        ensure(out.report.summary.arrived == 30, || format!("seed {seed}: arrivals"))?;
        let s = &out.report.summary;
        totals = (totals.0 + s.succeeded, totals.1 + s.failed, totals.2 + s.unfinished);
    }
    Ok(format!(
        "10 seeds, invariants hold (success {}, fail {}, unfinished {}), slowest {slowest:?}",
        totals.0, totals.1, totals.2
    ))
}

fn determinism() -> Check {
    let mut scenarios = vec![bundled_scenario("churn-demo"), bundled_scenario("plan-fixture")];
    scenarios.push(failure_scenario("TaskNegativeFeedback"));
    for sc in &scenarios {
        let a = run(sc);
        let b = run(sc);
        ensure(to_jsonl(&a.trace) == to_jsonl(&b.trace), || format!("{}: traces differ", sc.name))?;
        let ra = serde_json::to_string(&a.report).unwrap();
        let rb = serde_json::to_string(&b.report).unwrap();
        ensure(ra == rb, || format!("{}: reports differ", sc.name))?;
    }
    let demo = &scenarios[0];
    let base = to_jsonl(&run_with_seed(demo, demo.master_seed).trace);
    for seed in [demo.master_seed + 1, 99, 12345] {
        let other = run_with_seed(demo, seed);
        ensure(to_jsonl(&other.trace) != base, || format!("seed {seed} reproduced the base trace"))?;
        check_run(&other, demo.duration).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    Ok("same seed byte-identical, other seeds differ and keep invariants".into())
}

fn planner_instance() -> impl Strategy<Value = (Vec<(u8, u64)>, Vec<u8>, usize, u64)> {
    (
        prop::collection::vec((0u8..16, 0u64..6), 1..=4),
        prop::collection::vec(1u8..16, 1..=6),
        0usize..=3,
        any::<u64>(),
    )
}

fn mask_caps(mask: u8) -> Vec<String> {
    (0..4).filter(|b| mask & (1 << b) != 0).map(|b| format!("C{}", b + 1)).collect()
}

fn planner_property() -> Check {
    let cases = 1200;
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&planner_instance(), |(robots, tasks, min_robots, seed)| {
            let views: Vec<RobotView> = robots
                .iter()
                .enumerate()
                .map(|(i, (m, h))| RobotView {
                    id: format!("R{}", i + 1),
                    capabilities: caps(mask_caps(*m)),
                    history: *h,
                })
                .collect();
            let snap = PlannerSnapshot::new(views);
            let bp = PlanBlueprint {
                id: "B".into(),
                tasks: tasks
                    .iter()
                    .enumerate()
                    .map(|(i, m)| TaskSpec::new(format!("T{}", i + 1), mask_caps(*m)))
                    .collect(),
            };
            let mut marks = TieMarks::default();
            let mut rng = RngStreams::new(seed);
            // Two consecutive plans so tie marks carry over.
            for _ in 0..2 {
                let outcome = plan(&bp, "Rq1", &snap, min_robots, &mut marks, &mut rng).map(|(_, d)| d);
                check_argmin(&bp, &snap, min_robots, &outcome).map_err(TestCaseError::fail)?;
            }

            // Balance corollary: identical robots, identical histories.
            let n = robots.len();
            let h = robots[0].1;
            let same = PlannerSnapshot::new(
                (1..=n)
                    .map(|i| RobotView {
                        id: format!("R{i}"),
                        capabilities: caps(["C1", "C2", "C3", "C4"]),
                        history: h,
                    })
                    .collect(),
            );
            let (vp, _) = plan(&bp, "Rq1", &same, 0, &mut TieMarks::default(), &mut rng)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let mut counts: BTreeMap<&str, u64> = same.robots.iter().map(|r| (r.id.as_str(), 0)).collect();
            for a in &vp.assignments {
                *counts.get_mut(a.robot.as_str()).unwrap() += 1;
            }
            let spread = counts.values().max().unwrap() - counts.values().min().unwrap();
            prop_assert!(spread <= 1, "spread {} on {:?}", spread, counts);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} generated instances, argmin and balance hold"))
}

/// One single-request scenario per terminal failure reason.
fn failure_scenario(reason: &str) -> Scenario {
    let mut doc = json!({
        "name": format!("fail-{reason}"),
        "master_seed": 3,
        "duration": 40,
        "capability_universe": ["C1", "C2", "C3"],
        "robots": [
            { "id": "R1", "capabilities": ["C1", "C2"], "duration_range": [4, 4] },
            { "id": "R2", "capabilities": ["C1", "C2"], "duration_range": [4, 4], "history": 5 }
        ],
        "blueprints": [
            { "id": "B1", "tasks": [ { "label": "T1", "required": ["C1"] } ] },
            { "id": "B3", "tasks": [ { "label": "T1", "required": ["C1"] }, { "label": "T2", "required": ["C3"] } ] }
        ],
        "workload": { "explicit": [ { "time": 0, "request_id": "Q1", "blueprint_id": "B1" } ] }
    });
    match reason {
        "NoBlueprintMatch" => {
            doc["workload"] = json!({ "explicit": [] });
            doc["script"] = json!([
                { "at": 1, "command": { "kind": "SubmitRequest", "request_id": "Q1", "blueprint_id": "Missing" } }
            ]);
        }
        "InsufficientRobots" => doc["robots"][1]["registered"] = json!(false),
        "NoCapableRobot" => doc["workload"]["explicit"][0]["blueprint_id"] = json!("B3"),
        "TaskFeedbackTimeout" => {
            doc["policies"] = json!({ "deregistration": "immediate" });
            doc["script"] = json!([
                { "at": 1, "command": { "kind": "DeregisterRobot", "robot": "R1" } }
            ]);
        }
        "TaskNegativeFeedback" => doc["robots"][0]["fail_probability"] = json!(1.0),
        "PlanFeedbackTimeout" => doc["timeouts"] = json!({ "plan_feedback": 2, "task_feedback": 10 }),
        other => panic!("no scenario for {other}"),
    }
    scenario_from(doc)
}

fn failure_matrix() -> Check {
    let cases = [
        ("NoBlueprintMatch", FailureReason::NoBlueprintMatch),
        ("InsufficientRobots", FailureReason::InsufficientRobots),
        ("NoCapableRobot", FailureReason::NoCapableRobot("T2".into())),
        ("TaskFeedbackTimeout", FailureReason::TaskFeedbackTimeout),
        ("TaskNegativeFeedback", FailureReason::TaskNegativeFeedback),
        ("PlanFeedbackTimeout", FailureReason::PlanFeedbackTimeout),
    ];
    for (name, reason) in cases {
        let out = run(&failure_scenario(name));
        let failures: Vec<_> = out.report.requests.iter().filter_map(|r| r.reason()).collect();
        ensure(failures == [&reason], || format!("{name}: terminal reasons {failures:?}"))?;
        let notices: Vec<_> = out
            .records
            .iter()
            .filter_map(|r| match r {
                Record::RequestorNotified { request_id, status, .. } => Some((request_id.as_str(), status)),
                _ => None,
            })
            .collect();
        let expected = RequestStatus::Failed(reason.clone());
        ensure(notices == [("Q1", &expected)], || format!("{name}: notifications {notices:?}"))?;
        check_run(&out, 40).map_err(|e| format!("{name}: {e}"))?;
    }
    Ok("six reasons, one REQUEST_FAIL each".into())
}

fn fcfs_latency() -> Check {
    // Service time of a request = number of tasks x fixed task duration.
    let task_duration = 2;
    let burst = [("Q1", "B2", 2), ("Q2", "B1", 1), ("Q3", "B2", 2), ("Q4", "B1", 1), ("Q5", "B2", 2)];
    let explicit: Vec<_> = burst
        .iter()
        .map(|(id, bp, _)| json!({ "time": 0, "request_id": id, "blueprint_id": bp }))
        .collect();
    let sc = scenario_from(json!({
        "name": "fcfs-burst",
        "master_seed": 11,
        "duration": 40,
        "capability_universe": ["C1", "C2"],
        "robots": [
            { "id": "R1", "capabilities": ["C1", "C2"], "duration_range": [task_duration, task_duration] },
            { "id": "R2", "capabilities": ["C1", "C2"], "duration_range": [task_duration, task_duration] }
        ],
        "blueprints": [
            { "id": "B1", "tasks": [ { "label": "T1", "required": ["C1"] } ] },
            { "id": "B2", "tasks": [ { "label": "T1", "required": ["C1"] }, { "label": "T2", "required": ["C2"] } ] }
        ],
        "workload": { "explicit": explicit }
    }));
    let jobs: Vec<(u64, u64)> = burst.iter().map(|(_, _, n)| (0, n * task_duration)).collect();
    let oracle = fcfs_replay(&jobs);

    let out = run(&sc);
    let ids: Vec<&str> = burst.iter().map(|(id, _, _)| *id).collect();
    let arrived: Vec<&str> = out.report.requests.iter().map(|r| r.id.as_str()).collect();
    ensure(arrived == ids, || format!("arrival order {arrived:?}"))?;
    let mut by_start: Vec<_> = out.report.requests.iter().collect();
    by_start.sort_by_key(|r| (r.start, arrived.iter().position(|id| *id == r.id)));
    let start_order: Vec<&str> = by_start.iter().map(|r| r.id.as_str()).collect();
    ensure(start_order == ids, || format!("start order {start_order:?}"))?;
    let latencies: Vec<Option<u64>> = out.report.requests.iter().map(latency).collect();
    let expected: Vec<Option<u64>> = oracle.iter().map(|s| Some(*s)).collect();
    ensure(latencies == expected, || format!("latencies {latencies:?} vs oracle {expected:?}"))?;
    ensure(
        out.report.requests.iter().all(|r| r.status == RequestStatus::Succeeded),
        || "burst did not succeed".into(),
    )?;
    Ok(format!("start order = arrival order, latencies {:?}", oracle))
}

fn serializability() -> Check {
    let mut base = bundled_scenario("churn-demo");
    base.duration = 10;
    let blueprint = PlanBlueprint {
        id: "Pb9".into(),
        tasks: vec![TaskSpec::new("T1", ["C2"])],
    };
    let add = Command::AddBlueprint { blueprint };
    let submit = Command::SubmitRequest {
        request_id: Some("S1".into()),
        requestor: Some("operator".into()),
        blueprint_id: "Pb9".into(),
    };

    // `lead` is both the session's initial step and the script instant.
    for lead in [0u64, 3] {
        let mut session = Session::new(&base);
        if lead > 0 {
            session.apply(Command::StepClock { units: lead }).map_err(|r| r.reason)?;
        }
        session.apply(Command::PauseClock).map_err(|r| r.reason)?;
        session.apply(add.clone()).map_err(|r| r.reason)?;
        session.apply(submit.clone()).map_err(|r| r.reason)?;
        session
            .apply(Command::StepClock { units: 10 - lead })
            .map_err(|r| r.reason)?;
        let live = to_jsonl(session.simulation().engine().trace());

        let mut headless = base.clone();
        headless.script = serde_json::from_value(json!([
            { "at": lead, "command": add },
            { "at": lead, "command": submit },
        ]))
        .map_err(|e| e.to_string())?;
        let batch = to_jsonl(&run(&headless).trace);
        ensure(live == batch, || format!("lead {lead}: traces differ"))?;
        ensure(live.contains("SUBMIT_REQUEST requestor:operator"), || "command had no effect".into())?;
    }
    Ok("session and headless traces byte-identical".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("golden fixture plan", golden_fixture, Duration::from_secs(1)),
        ("robot KPI table arithmetic", reference_kpis, Duration::from_secs(1)),
        ("churn protocol replay over 10 seeds", churn_replay, Duration::from_secs(50)),
        ("determinism", determinism, Duration::from_secs(10)),
        ("planner argmin property", planner_property, Duration::from_secs(30)),
        ("failure-path matrix", failure_matrix, Duration::from_secs(5)),
        ("FCFS order and latency", fcfs_latency, Duration::from_secs(5)),
        ("command serializability", serializability, Duration::from_secs(10)),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let started = Instant::now();
        let result = check();
        let took = started.elapsed();
        let result = result.and_then(|detail| {
            if took <= budget {
                Ok(detail)
            } else {
                Err(format!("took {took:?}, budget {budget:?}"))
            }
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} [{:.1} ms]", took.as_secs_f64() * 1e3),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{:.1} ms]", took.as_secs_f64() * 1e3);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
