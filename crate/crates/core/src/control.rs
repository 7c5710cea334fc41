//! Live steering of a simulation: commands, snapshots, an ordered event feed
//! and tick-series queries. Transport-agnostic; the HTTP layer lives in a
//! separate crate.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::domain::{
    CapabilitySet, PlanBlueprint, Request, RequestId, RobotId, RobotState, VerifiedPlan,
};
use crate::engine::SimTime;
use crate::metrics::{accrue_state, tick_series, RobotTimeLedger, TickSample};
use crate::scenario::Scenario;
use crate::sim::{JournalEntry, Simulation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Command {
    SubmitRequest {
        #[serde(default)]
        request_id: Option<String>,
        #[serde(default)]
        requestor: Option<String>,
        blueprint_id: String,
    },
    AddBlueprint {
        blueprint: PlanBlueprint,
    },
    ModifyBlueprint {
        blueprint: PlanBlueprint,
    },
    DeleteBlueprint {
        blueprint_id: String,
    },
    RegisterRobot {
        robot: RobotId,
        #[serde(default)]
        capabilities: Option<CapabilitySet>,
        #[serde(default)]
        duration_range: Option<[u64; 2]>,
        #[serde(default)]
        fail_probability: Option<f64>,
    },
    DeregisterRobot {
        robot: RobotId,
    },
    StepClock {
        units: u64,
    },
    /// Free-run at the configured pace, optionally stopping at `until`.
    RunClock {
        #[serde(default)]
        until: Option<SimTime>,
    },
    PauseClock,
}

impl Command {
    pub fn kind(&self) -> &'static str {
        match self {
            Command::SubmitRequest { .. } => "SubmitRequest",
            Command::AddBlueprint { .. } => "AddBlueprint",
            Command::ModifyBlueprint { .. } => "ModifyBlueprint",
            Command::DeleteBlueprint { .. } => "DeleteBlueprint",
            Command::RegisterRobot { .. } => "RegisterRobot",
            Command::DeregisterRobot { .. } => "DeregisterRobot",
            Command::StepClock { .. } => "StepClock",
            Command::RunClock { .. } => "RunClock",
            Command::PauseClock => "PauseClock",
        }
    }

    pub fn is_clock(&self) -> bool {
        matches!(
            self,
            Command::StepClock { .. } | Command::RunClock { .. } | Command::PauseClock
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub command_id: u64,
    pub applied_at: SimTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub command_id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClockMode {
    Paused,
    Running { until: Option<SimTime> },
}

/// One frame of the event feed: (seq, kind, body).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedEvent {
    pub seq: u64,
    pub kind: String,
    pub body: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotSnapshot {
    pub id: RobotId,
    pub state: RobotState,
    pub capabilities: CapabilitySet,
    pub history: u64,
    pub current_task: Option<String>,
    pub leaving: bool,
    /// Ledger closed at the snapshot instant.
    pub ledger: RobotTimeLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionSnapshot {
    pub plan: VerifiedPlan,
    pub cursor: usize,
}

/// Consistent point-in-time view of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDocument {
    pub now: SimTime,
    pub clock: ClockMode,
    pub units_per_tick: u64,
    pub finalized_ticks: u64,
    pub requests: Vec<Request>,
    pub queue: Vec<RequestId>,
    pub in_flight: Option<RequestId>,
    pub blueprints: Vec<PlanBlueprint>,
    pub robots: Vec<RobotSnapshot>,
    pub active_execution: Option<ExecutionSnapshot>,
    pub last_plan: Option<VerifiedPlan>,
    pub latest_tick: Option<TickSample>,
    pub dead_letters: usize,
}

pub const DEFAULT_RETENTION: usize = 100_000;

/// Bounded, ordered event feed with resumable cursors.
#[derive(Debug, Clone)]
pub struct FeedLog {
    events: VecDeque<FeedEvent>,
    last_seq: u64,
    retention: usize,
}

impl Default for FeedLog {
    fn default() -> Self {
        Self::new(DEFAULT_RETENTION)
    }
}

impl FeedLog {
    pub fn new(retention: usize) -> Self {
        Self {
            events: VecDeque::new(),
            last_seq: 0,
            retention: retention.max(1),
        }
    }

    /// Appends an event with the next sequence number.
    pub fn push(&mut self, kind: &str, body: serde_json::Value) -> u64 {
        let seq = self.last_seq + 1;
        self.insert(FeedEvent {
            seq,
            kind: kind.to_owned(),
            body,
        });
        seq
    }

    /// Appends an event that already carries its sequence number, as when
    /// mirroring another log. Events at or below the last seq are skipped.
    pub fn insert(&mut self, event: FeedEvent) {
        if event.seq <= self.last_seq {
            return;
        }
        self.last_seq = event.seq;
        self.events.push_back(event);
        while self.events.len() > self.retention {
            self.events.pop_front();
        }
    }

    /// Highest sequence number issued so far (0 if none).
    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Events with `seq > since`. An unknown cursor (older than what is
    /// retained, or ahead of the feed) replays from the earliest retained.
    pub fn events_since(&self, since: Option<u64>) -> Vec<FeedEvent> {
        let Some(first) = self.events.front().map(|e| e.seq) else {
            return Vec::new();
        };
        match since {
            Some(s) if s + 1 >= first && s <= self.last_seq => {
                self.events.iter().skip((s + 1 - first) as usize).cloned().collect()
            }
            _ => self.events.iter().cloned().collect(),
        }
    }
}

/// A steerable simulation. Starts paused at t = 0.
#[derive(Debug)]
pub struct Session {
    sim: Simulation,
    clock: ClockMode,
    feed: FeedLog,
    next_command_id: u64,
    published_ticks: u64,
}

impl Session {
    pub fn new(scenario: &Scenario) -> Self {
        Self::from_simulation(Simulation::new(scenario))
    }

    pub fn from_simulation(sim: Simulation) -> Self {
        Self {
            sim,
            clock: ClockMode::Paused,
            feed: FeedLog::default(),
            next_command_id: 1,
            published_ticks: 0,
        }
    }

    pub fn with_retention(mut self, retention: usize) -> Self {
        self.feed = FeedLog::new(retention);
        self
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    pub fn now(&self) -> SimTime {
        self.sim.now()
    }

    pub fn clock(&self) -> ClockMode {
        self.clock
    }

    pub fn finalized_ticks(&self) -> u64 {
        self.sim.now().units() / self.sim.units_per_tick()
    }

    pub fn apply(&mut self, command: Command) -> Result<Ack, Rejection> {
        let command_id = self.next_command_id;
        self.next_command_id += 1;
        let kind = command.kind();
        let result = match command {
            Command::StepClock { units } => {
                self.step(units);
                Ok(None)
            }
            Command::RunClock { until } => match until {
                Some(t) if t <= self.now() => Err(format!("run target {t} is not after now {}", self.now())),
                _ => {
                    self.clock = ClockMode::Running { until };
                    Ok(None)
                }
            },
            Command::PauseClock => {
                self.clock = ClockMode::Paused;
                Ok(None)
            }
            world => {
                let r = self.sim.apply_command(world);
                self.pump();
                r
            }
        };
        match result {
            Ok(detail) => {
                let ack = Ack {
                    command_id,
                    applied_at: self.now(),
                    detail,
                };
                self.push_feed("command_ack", serde_json::json!({ "kind": kind, "ack": &ack }));
                Ok(ack)
            }
            Err(reason) => {
                let rejection = Rejection { command_id, reason };
                self.push_feed(
                    "command_rejected",
                    serde_json::json!({ "kind": kind, "rejection": &rejection }),
                );
                Err(rejection)
            }
        }
    }

    fn step(&mut self, units: u64) {
        let target = self.now() + units;
        self.sim
            .advance_before(target)
            .expect("stepping forward never goes backwards");
        self.pump();
    }

    /// One paced step of free-running mode. Returns whether the clock is
    /// still running afterwards.
    pub fn free_run_step(&mut self) -> bool {
        let ClockMode::Running { until } = self.clock else {
            return false;
        };
        self.step(1);
        if until.is_some_and(|t| self.now() >= t) {
            self.clock = ClockMode::Paused;
        }
        matches!(self.clock, ClockMode::Running { .. })
    }

    fn push_feed(&mut self, kind: &str, body: serde_json::Value) {
        self.feed.push(kind, body);
    }

    fn pump(&mut self) {
        for entry in self.sim.drain_journal() {
            let kind = match &entry {
                JournalEntry::Envelope { .. } => "envelope",
                JournalEntry::DeadLetter { .. } => "dead_letter",
                JournalEntry::Transition { .. } => "transition",
            };
            let body = serde_json::to_value(&entry).expect("journal entries serialize");
            self.push_feed(kind, body);
        }
        let finalized = self.finalized_ticks();
        if finalized > self.published_ticks {
            let series = tick_series(&self.sim.world().log, self.sim.units_per_tick(), finalized);
            for sample in &series[self.published_ticks as usize..] {
                let body = serde_json::to_value(sample).expect("tick samples serialize");
                self.push_feed("tick", body);
            }
            self.published_ticks = finalized;
        }
    }

    /// See [`FeedLog::events_since`].
    pub fn events_since(&self, since: Option<u64>) -> Vec<FeedEvent> {
        self.feed.events_since(since)
    }

    /// Highest feed sequence number issued so far (0 if none).
    pub fn last_feed_seq(&self) -> u64 {
        self.feed.last_seq()
    }

    /// Finalized tick samples in `[from, to)`, clipped to what exists.
    pub fn metrics_series(&self, from: u64, to: u64) -> Vec<TickSample> {
        let finalized = self.finalized_ticks();
        let to = to.min(finalized);
        if from >= to {
            return Vec::new();
        }
        let series = tick_series(&self.sim.world().log, self.sim.units_per_tick(), finalized);
        series[from as usize..to as usize].to_vec()
    }

    pub fn snapshot(&self) -> StateDocument {
        let world = self.sim.world();
        let now = self.now();
        let robots = world
            .kb
            .robot_directory
            .values()
            .map(|r| {
                let mut ledger = r.ledger;
                accrue_state(&mut ledger, r.state, r.state_since, now);
                RobotSnapshot {
                    id: r.id.clone(),
                    state: r.state,
                    capabilities: r.capabilities.clone(),
                    history: r.history,
                    current_task: r.current_task.clone(),
                    leaving: r.leaving,
                    ledger,
                }
            })
            .collect();
        let finalized = self.finalized_ticks();
        let latest_tick = (finalized > 0)
            .then(|| {
                tick_series(&world.log, self.sim.units_per_tick(), finalized)
                    .pop()
            })
            .flatten();
        StateDocument {
            now,
            clock: self.clock,
            units_per_tick: self.sim.units_per_tick(),
            finalized_ticks: finalized,
            requests: world.requests.requests().cloned().collect(),
            queue: world.requests.queue().cloned().collect(),
            in_flight: world.requests.in_flight().cloned(),
            blueprints: world.kb.blueprints.values().cloned().collect(),
            robots,
            active_execution: world.robots.active().map(|e| ExecutionSnapshot {
                plan: e.plan.clone(),
                cursor: e.cursor,
            }),
            last_plan: world.planner.last_plan.clone(),
            latest_tick,
            dead_letters: world.bus.dead_letters().len(),
        }
    }
}
