//! Performance measurements folded from the simulation record log.
//!
//! Request-level series (throughput, latency, success/failure rates,
//! efficiency) come from request life-cycle records; robot-level KPIs
//! (availability, utilization, effectiveness) come from state transitions.
//! Everything here is a pure function of the record log.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{FailureReason, RequestStatus, RobotId, RobotState};
use crate::engine::SimTime;

/// Per-robot time buckets, in simulation units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobotTimeLedger {
    #[serde(rename = "t_c")]
    pub controlled: u64,
    #[serde(rename = "t_unc")]
    pub uncontrolled: u64,
    #[serde(rename = "t_unr")]
    pub unregistered: u64,
}

impl RobotTimeLedger {
    pub fn new(controlled: u64, uncontrolled: u64, unregistered: u64) -> Self {
        Self {
            controlled,
            uncontrolled,
            unregistered,
        }
    }

    /// T_r = T_c + T_unc.
    pub fn registered(&self) -> u64 {
        self.controlled + self.uncontrolled
    }

    /// T_ov = T_r + T_unr.
    pub fn overall(&self) -> u64 {
        self.registered() + self.unregistered
    }

    pub fn bucket_mut(&mut self, state: RobotState) -> &mut u64 {
        match state {
            RobotState::Controlled => &mut self.controlled,
            RobotState::Idle => &mut self.uncontrolled,
            RobotState::Unregistered => &mut self.unregistered,
        }
    }
}

/// Adds the interval `[since, at)` to the bucket of the state being left.
pub fn accrue_state(ledger: &mut RobotTimeLedger, from_state: RobotState, since: SimTime, at: SimTime) {
    debug_assert!(at >= since, "transition timeline went backwards");
    *ledger.bucket_mut(from_state) += at.units().saturating_sub(since.units());
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotKpis {
    pub availability: f64,
    pub utilization: f64,
    /// Undefined while the robot has no uncontrolled time.
    pub effectiveness: Option<f64>,
}

/// (T_r / T_ov, T_c / T_ov, T_c / T_unc). `None` when `overall` is zero.
pub fn robot_kpis(ledger: &RobotTimeLedger, overall: u64) -> Option<RobotKpis> {
    if overall == 0 {
        return None;
    }
    let ov = overall as f64;
    let effectiveness = (ledger.uncontrolled > 0)
        .then(|| ledger.controlled as f64 / ledger.uncontrolled as f64);
    Some(RobotKpis {
        availability: ledger.registered() as f64 / ov,
        utilization: ledger.controlled as f64 / ov,
        effectiveness,
    })
}

/// Cumulative successes over cumulative failures; `None` before the first
/// failure.
pub fn efficiency(cumulative_success: u64, cumulative_failed: u64) -> Option<f64> {
    (cumulative_failed > 0).then(|| cumulative_success as f64 / cumulative_failed as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanOutcome {
    Verified,
    Failed(FailureReason),
}

/// One planner decision: which robot got the task and the tentative loads of
/// every eligible robot at that moment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanDecision {
    pub task: String,
    pub robot: RobotId,
    pub loads: BTreeMap<RobotId, u64>,
    pub tie_break: bool,
}

/// Append-only simulation log. Every metric is recomputable from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    RequestArrived {
        at: SimTime,
        request_id: String,
        requestor: String,
        blueprint_id: String,
    },
    RequestStarted {
        at: SimTime,
        request_id: String,
    },
    RequestFinished {
        at: SimTime,
        request_id: String,
        status: RequestStatus,
    },
    RequestRejected {
        at: SimTime,
        request_id: String,
        reason: FailureReason,
    },
    PlanComputed {
        at: SimTime,
        request_id: String,
        outcome: PlanOutcome,
        decisions: Vec<PlanDecision>,
    },
    RobotAdded {
        at: SimTime,
        robot: RobotId,
        state: RobotState,
    },
    RobotTransition {
        at: SimTime,
        robot: RobotId,
        from: RobotState,
        to: RobotState,
    },
    HistoryIncremented {
        at: SimTime,
        robot: RobotId,
        history: u64,
    },
    RequestorNotified {
        at: SimTime,
        requestor: String,
        request_id: String,
        status: RequestStatus,
    },
    Ignored {
        at: SimTime,
        component: String,
        conversation_id: String,
        detail: String,
    },
}

impl Record {
    pub fn at(&self) -> SimTime {
        match self {
            Record::RequestArrived { at, .. }
            | Record::RequestStarted { at, .. }
            | Record::RequestFinished { at, .. }
            | Record::RequestRejected { at, .. }
            | Record::PlanComputed { at, .. }
            | Record::RobotAdded { at, .. }
            | Record::RobotTransition { at, .. }
            | Record::HistoryIncremented { at, .. }
            | Record::RequestorNotified { at, .. }
            | Record::Ignored { at, .. } => *at,
        }
    }
}

/// Per-request life cycle: (id, arrival, start, terminal time, status).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestLifecycle {
    pub id: String,
    pub requestor: String,
    pub blueprint_id: String,
    pub arrival: SimTime,
    pub start: Option<SimTime>,
    pub terminal: Option<SimTime>,
    pub status: RequestStatus,
}

impl RequestLifecycle {
    pub fn reason(&self) -> Option<&FailureReason> {
        match &self.status {
            RequestStatus::Failed(r) => Some(r),
            _ => None,
        }
    }
}

/// Time from arrival to start of execution.
pub fn latency(rq: &RequestLifecycle) -> Option<u64> {
    rq.start.map(|s| s - rq.arrival)
}

/// Life cycles of accepted requests, in arrival order.
pub fn lifecycles(records: &[Record]) -> Vec<RequestLifecycle> {
    let mut order: Vec<RequestLifecycle> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for record in records {
        match record {
            Record::RequestArrived {
                at,
                request_id,
                requestor,
                blueprint_id,
            } => {
                index.insert(request_id, order.len());
                order.push(RequestLifecycle {
                    id: request_id.clone(),
                    requestor: requestor.clone(),
                    blueprint_id: blueprint_id.clone(),
                    arrival: *at,
                    start: None,
                    terminal: None,
                    status: RequestStatus::Queued,
                });
            }
            Record::RequestStarted { at, request_id } => {
                if let Some(&i) = index.get(request_id.as_str()) {
                    order[i].start = Some(*at);
                    order[i].status = RequestStatus::InProgress;
                }
            }
            Record::RequestFinished {
                at,
                request_id,
                status,
            } => {
                if let Some(&i) = index.get(request_id.as_str()) {
                    order[i].terminal = Some(*at);
                    order[i].status = status.clone();
                }
            }
            _ => {}
        }
    }
    order
}

/// One aggregation window of the request series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickSample {
    pub tick: u64,
    pub arrived: u64,
    pub processed: u64,
    pub successful: u64,
    pub failed: u64,
    pub unprocessed: u64,
    pub latency: Option<f64>,
    pub efficiency: Option<f64>,
}

impl TickSample {
    /// Throughput: requests reaching a terminal status in this tick.
    pub fn throughput(&self) -> u64 {
        self.processed
    }

    /// (success rate, failure rate) over requests that arrived in this tick.
    pub fn rates(&self) -> (Option<f64>, Option<f64>) {
        if self.arrived == 0 {
            return (None, None);
        }
        let n = self.arrived as f64;
        (
            Some(self.successful as f64 / n),
            Some(self.failed as f64 / n),
        )
    }
}

/// Folds the record log into `ticks` samples of `units_per_tick` units each.
pub fn tick_series(records: &[Record], units_per_tick: u64, ticks: u64) -> Vec<TickSample> {
    let upt = units_per_tick.max(1);
    let n = ticks as usize;
    let mut arrived = vec![0u64; n];
    let mut successful = vec![0u64; n];
    let mut failed = vec![0u64; n];
    let mut latency_sum = vec![0u64; n];
    let mut started = vec![0u64; n];

    let slot = |t: SimTime| -> Option<usize> {
        let k = (t.units() / upt) as usize;
        (k < n).then_some(k)
    };

    for rq in lifecycles(records) {
        if let Some(k) = slot(rq.arrival) {
            arrived[k] += 1;
        }
        if let (Some(start), Some(lat)) = (rq.start, latency(&rq)) {
            if let Some(k) = slot(start) {
                started[k] += 1;
                latency_sum[k] += lat;
            }
        }
        if let Some(k) = rq.terminal.and_then(slot) {
            match rq.status {
                RequestStatus::Succeeded => successful[k] += 1,
                RequestStatus::Failed(_) => failed[k] += 1,
                _ => {}
            }
        }
    }

    let mut cum_arrived = 0;
    let mut cum_success = 0;
    let mut cum_failed = 0;
    (0..n)
        .map(|k| {
            cum_arrived += arrived[k];
            cum_success += successful[k];
            cum_failed += failed[k];
            TickSample {
                tick: k as u64,
                arrived: arrived[k],
                processed: successful[k] + failed[k],
                successful: successful[k],
                failed: failed[k],
                unprocessed: cum_arrived - (cum_success + cum_failed),
                latency: (started[k] > 0).then(|| latency_sum[k] as f64 / started[k] as f64),
                efficiency: efficiency(cum_success, cum_failed),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct LedgerCursor {
    ledger: RobotTimeLedger,
    state: RobotState,
    since: SimTime,
    present_since: SimTime,
}

/// Recomputes every robot's ledger from the transition log, closing the
/// open interval at `horizon`. Also returns when each robot appeared.
pub fn robot_ledgers(records: &[Record], horizon: SimTime) -> BTreeMap<RobotId, (RobotTimeLedger, SimTime)> {
    let mut cursors: BTreeMap<RobotId, LedgerCursor> = BTreeMap::new();
    for record in records {
        match record {
            Record::RobotAdded { at, robot, state } if *at <= horizon => {
                cursors.insert(
                    robot.clone(),
                    LedgerCursor {
                        ledger: RobotTimeLedger::default(),
                        state: *state,
                        since: *at,
                        present_since: *at,
                    },
                );
            }
            Record::RobotTransition { at, robot, from, to } if *at <= horizon => {
                if let Some(c) = cursors.get_mut(robot) {
                    debug_assert_eq!(c.state, *from, "transition log out of sync for {robot}");
                    accrue_state(&mut c.ledger, c.state, c.since, *at);
                    c.state = *to;
                    c.since = *at;
                }
            }
            _ => {}
        }
    }
    cursors
        .into_iter()
        .map(|(id, mut c)| {
            accrue_state(&mut c.ledger, c.state, c.since, horizon);
            (id, (c.ledger, c.present_since))
        })
        .collect()
}

/// Final per-robot row of the KPI table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotRow {
    pub robot: RobotId,
    pub t_c: u64,
    pub t_unc: u64,
    pub t_unr: u64,
    pub t_r: u64,
    pub t_ov: u64,
    pub availability: Option<f64>,
    pub utilization: Option<f64>,
    pub effectiveness: Option<f64>,
}

impl RobotRow {
    pub fn from_ledger(robot: impl Into<String>, ledger: &RobotTimeLedger) -> Self {
        let kpis = robot_kpis(ledger, ledger.overall());
        Self {
            robot: robot.into(),
            t_c: ledger.controlled,
            t_unc: ledger.uncontrolled,
            t_unr: ledger.unregistered,
            t_r: ledger.registered(),
            t_ov: ledger.overall(),
            availability: kpis.map(|k| k.availability),
            utilization: kpis.map(|k| k.utilization),
            effectiveness: kpis.and_then(|k| k.effectiveness),
        }
    }
}

pub fn robot_table(records: &[Record], horizon: SimTime) -> Vec<RobotRow> {
    robot_ledgers(records, horizon)
        .iter()
        .map(|(id, (ledger, _))| RobotRow::from_ledger(id.clone(), ledger))
        .collect()
}

/// Robot state and task history at the end of each tick.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobotTickSample {
    pub tick: u64,
    pub robot: RobotId,
    pub state: RobotState,
    pub history: u64,
}

pub fn robot_series(
    records: &[Record],
    initial_history: &BTreeMap<RobotId, u64>,
    units_per_tick: u64,
    ticks: u64,
) -> Vec<RobotTickSample> {
    let upt = units_per_tick.max(1);
    let mut state: BTreeMap<RobotId, RobotState> = BTreeMap::new();
    let mut history: BTreeMap<RobotId, u64> = initial_history.clone();
    let mut out = Vec::new();
    let mut i = 0;
    for tick in 0..ticks {
        let end = SimTime((tick + 1) * upt);
        while i < records.len() && records[i].at() < end {
            match &records[i] {
                Record::RobotAdded { robot, state: s, .. } => {
                    state.insert(robot.clone(), *s);
                    history.entry(robot.clone()).or_insert(0);
                }
                Record::RobotTransition { robot, to, .. } => {
                    state.insert(robot.clone(), *to);
                }
                Record::HistoryIncremented { robot, history: h, .. } => {
                    history.insert(robot.clone(), *h);
                }
                _ => {}
            }
            i += 1;
        }
        for (robot, s) in &state {
            out.push(RobotTickSample {
                tick,
                robot: robot.clone(),
                state: *s,
                history: history.get(robot).copied().unwrap_or(0),
            });
        }
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Comma-delimited tick series with a header row.
pub fn tick_series_csv(samples: &[TickSample]) -> String {
    let mut out = String::from("tick,arrived,processed,successful,failed,unprocessed,latency,efficiency\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.tick,
            s.arrived,
            s.processed,
            s.successful,
            s.failed,
            s.unprocessed,
            opt(s.latency),
            opt(s.efficiency)
        );
    }
    out
}

pub fn robot_table_csv(rows: &[RobotRow]) -> String {
    let mut out =
        String::from("robot,t_c,t_unc,t_unr,t_r,t_ov,availability,utilization,effectiveness\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.robot,
            r.t_c,
            r.t_unc,
            r.t_unr,
            r.t_r,
            r.t_ov,
            opt(r.availability),
            opt(r.utilization),
            opt(r.effectiveness)
        );
    }
    out
}
