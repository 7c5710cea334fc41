//! Deterministic discrete-event scheduler with named, independently seeded
//! random streams.
//!
//! Events are totally ordered by `(fire_at, seq)`, where `seq` is the
//! insertion counter. Equal-time events therefore fire in insertion order.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::{Add, RangeInclusive, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::ComponentId;

/// Integer simulation time. One unit is one minute by default.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn units(self) -> u64 {
        self.0
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, rhs: u64) -> SimTime {
        SimTime(self.0 + rhs)
    }
}

impl Sub for SimTime {
    type Output = u64;

    fn sub(self, rhs: SimTime) -> u64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Cancellation token for a scheduled event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventHandle(u64);

impl EventHandle {
    pub fn seq(self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledEvent<P> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub target: ComponentId,
    pub payload: P,
}

impl<P> ScheduledEvent<P> {
    pub fn handle(&self) -> EventHandle {
        EventHandle(self.seq)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("cannot schedule at {at}: clock is already at {now}")]
    InPast { at: SimTime, now: SimTime },
    #[error("cannot run backwards to {to}: clock is already at {now}")]
    Backwards { to: SimTime, now: SimTime },
    #[error("empty draw range")]
    EmptyRange,
}

/// Short one-line rendering used in the event trace.
pub trait Summarize {
    fn summary(&self) -> String;
}

/// One line of the event trace. Field order is stable for diffing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLine {
    pub fire_at: SimTime,
    pub seq: u64,
    pub target: String,
    pub summary: String,
}

/// Named random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamName {
    Requests,
    Churn,
    PlannerTie,
    TaskDuration,
}

impl StreamName {
    pub const ALL: [StreamName; 4] = [
        StreamName::Requests,
        StreamName::Churn,
        StreamName::PlannerTie,
        StreamName::TaskDuration,
    ];

    fn index(self) -> usize {
        match self {
            StreamName::Requests => 0,
            StreamName::Churn => 1,
            StreamName::PlannerTie => 2,
            StreamName::TaskDuration => 3,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Four independent generators derived from one master seed. Drawing from
/// one stream never perturbs another.
#[derive(Debug, Clone)]
pub struct RngStreams {
    streams: [ChaCha8Rng; 4],
}

impl RngStreams {
    pub fn new(master_seed: u64) -> Self {
        let derive = |name: StreamName| {
            let salt = (name.index() as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
            ChaCha8Rng::seed_from_u64(splitmix64(master_seed ^ salt))
        };
        Self {
            streams: StreamName::ALL.map(derive),
        }
    }

    pub fn draw(&mut self, stream: StreamName, range: RangeInclusive<u64>) -> Result<u64, EngineError> {
        if range.is_empty() {
            return Err(EngineError::EmptyRange);
        }
        Ok(self.streams[stream.index()].gen_range(range))
    }

    /// Uniform index into a non-empty slice of length `len`.
    pub fn pick(&mut self, stream: StreamName, len: usize) -> Result<usize, EngineError> {
        if len == 0 {
            return Err(EngineError::EmptyRange);
        }
        Ok(self.streams[stream.index()].gen_range(0..len))
    }

    /// Uniform real in `[0, 1)`.
    pub fn unit(&mut self, stream: StreamName) -> f64 {
        self.streams[stream.index()].gen::<f64>()
    }
}

/// Single-threaded event loop.
#[derive(Debug)]
pub struct Engine<P> {
    now: SimTime,
    next_seq: u64,
    queue: BTreeMap<(SimTime, u64), (ComponentId, P)>,
    pending: HashMap<u64, SimTime>,
    delivered: u64,
    rng: RngStreams,
    trace: Option<Vec<TraceLine>>,
}

impl<P> Engine<P> {
    pub fn new(master_seed: u64) -> Self {
        Self {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BTreeMap::new(),
            pending: HashMap::new(),
            delivered: 0,
            rng: RngStreams::new(master_seed),
            trace: None,
        }
    }

    /// Enables recording of one trace line per delivered event.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn trace(&self) -> &[TraceLine] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn schedule(
        &mut self,
        at: SimTime,
        target: ComponentId,
        payload: P,
    ) -> Result<EventHandle, EngineError> {
        if at < self.now {
            return Err(EngineError::InPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((at, seq), (target, payload));
        self.pending.insert(seq, at);
        Ok(EventHandle(seq))
    }

    /// Schedules `delay` units from now; never fails.
    pub fn schedule_in(&mut self, delay: u64, target: ComponentId, payload: P) -> EventHandle {
        let at = self.now + delay;
        self.schedule(at, target, payload)
            .expect("relative schedule is never in the past")
    }

    /// Removes a not-yet-delivered event. Returns false if it already fired
    /// or was cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        match self.pending.remove(&handle.0) {
            Some(at) => self.queue.remove(&(at, handle.0)).is_some(),
            None => false,
        }
    }

    pub fn is_pending(&self, handle: EventHandle) -> bool {
        self.pending.contains_key(&handle.0)
    }

    pub fn rng(&mut self) -> &mut RngStreams {
        &mut self.rng
    }

    pub fn draw(&mut self, stream: StreamName, range: RangeInclusive<u64>) -> Result<u64, EngineError> {
        self.rng.draw(stream, range)
    }

    fn pop_if(&mut self, due: impl Fn(SimTime) -> bool) -> Option<ScheduledEvent<P>> {
        let (&(at, seq), _) = self.queue.first_key_value()?;
        if !due(at) {
            return None;
        }
        let (target, payload) = self.queue.remove(&(at, seq))?;
        self.pending.remove(&seq);
        self.now = at;
        self.delivered += 1;
        Some(ScheduledEvent {
            fire_at: at,
            seq,
            target,
            payload,
        })
    }

    fn run_while<F>(&mut self, due: impl Fn(SimTime) -> bool, mut handler: F) -> usize
    where
        P: Summarize,
        F: FnMut(&mut Engine<P>, ScheduledEvent<P>),
    {
        let mut count = 0;
        while let Some(event) = self.pop_if(&due) {
            if let Some(trace) = self.trace.as_mut() {
                trace.push(TraceLine {
                    fire_at: event.fire_at,
                    seq: event.seq,
                    target: event.target.to_string(),
                    summary: event.payload.summary(),
                });
            }
            count += 1;
            handler(self, event);
        }
        count
    }

    /// Delivers every event with `fire_at <= t` and leaves the clock at `t`.
    pub fn run_until<F>(&mut self, t: SimTime, handler: F) -> Result<usize, EngineError>
    where
        P: Summarize,
        F: FnMut(&mut Engine<P>, ScheduledEvent<P>),
    {
        if t < self.now {
            return Err(EngineError::Backwards { to: t, now: self.now });
        }
        let count = self.run_while(|at| at <= t, handler);
        self.now = t;
        Ok(count)
    }

    /// Delivers every event with `fire_at < t` and leaves the clock at `t`.
    /// Events at exactly `t` stay queued.
    pub fn run_before<F>(&mut self, t: SimTime, handler: F) -> Result<usize, EngineError>
    where
        P: Summarize,
        F: FnMut(&mut Engine<P>, ScheduledEvent<P>),
    {
        if t < self.now {
            return Err(EngineError::Backwards { to: t, now: self.now });
        }
        let count = self.run_while(|at| at < t, handler);
        self.now = t;
        Ok(count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Ping(&'static str);

    impl Summarize for Ping {
        fn summary(&self) -> String {
            self.0.to_owned()
        }
    }

    fn target() -> ComponentId {
        ComponentId::Planner
    }

    fn collect(engine: &mut Engine<Ping>, t: u64) -> Vec<&'static str> {
        let mut seen = Vec::new();
        engine
            .run_until(SimTime(t), |_, ev| seen.push(ev.payload.0))
            .unwrap();
        seen
    }

    #[test]
    fn schedule_fires_at_time() {
        let mut e = Engine::new(0);
        e.run_until(SimTime(3), |_, _| {}).unwrap();
        e.schedule(SimTime(5), ComponentId::RobotsManager, Ping("timeout"))
            .unwrap();
        let mut fired = Vec::new();
        e.run_until(SimTime(4), |_, ev| fired.push(ev.fire_at)).unwrap();
        assert!(fired.is_empty());
        e.run_until(SimTime(5), |_, ev| fired.push(ev.fire_at)).unwrap();
        assert_eq!(fired, vec![SimTime(5)]);
    }

    #[test]
    fn equal_time_is_fifo() {
        let mut e = Engine::new(0);
        e.schedule(SimTime(7), target(), Ping("A")).unwrap();
        e.schedule(SimTime(7), target(), Ping("B")).unwrap();
        assert_eq!(collect(&mut e, 10), vec!["A", "B"]);
    }

    #[test]
    fn past_schedule_rejected() {
        let mut e: Engine<Ping> = Engine::new(0);
        e.run_until(SimTime(3), |_, _| {}).unwrap();
        assert_eq!(
            e.schedule(SimTime(2), target(), Ping("x")),
            Err(EngineError::InPast {
                at: SimTime(2),
                now: SimTime(3)
            })
        );
    }

    #[test]
    fn cancel_semantics() {
        let mut e = Engine::new(0);
        let h = e.schedule(SimTime(4), target(), Ping("x")).unwrap();
        assert!(e.cancel(h));
        assert!(!e.cancel(h));
        assert!(collect(&mut e, 10).is_empty());

        let h2 = e.schedule(SimTime(11), target(), Ping("y")).unwrap();
        assert_eq!(collect(&mut e, 11), vec!["y"]);
        assert!(!e.cancel(h2));
    }

    #[test]
    fn empty_run_advances_clock() {
        let mut e: Engine<Ping> = Engine::new(0);
        assert_eq!(e.run_until(SimTime(30), |_, _| {}).unwrap(), 0);
        assert_eq!(e.now(), SimTime(30));
        assert!(e.run_until(SimTime(29), |_, _| {}).is_err());
    }

    #[test]
    fn time_then_seq_order() {
        let mut e = Engine::new(0);
        e.schedule(SimTime(2), target(), Ping("c")).unwrap();
        e.schedule(SimTime(1), target(), Ping("a")).unwrap();
        e.schedule(SimTime(1), target(), Ping("b")).unwrap();
        assert_eq!(collect(&mut e, 2), vec!["a", "b", "c"]);
    }

    #[test]
    fn handlers_can_schedule_same_time_followups() {
        let mut e = Engine::new(0);
        e.schedule(SimTime(1), target(), Ping("first")).unwrap();
        e.schedule(SimTime(1), target(), Ping("second")).unwrap();
        let mut seen = Vec::new();
        e.run_until(SimTime(1), |eng, ev| {
            if ev.payload.0 == "first" {
                eng.schedule_in(0, target(), Ping("followup"));
            }
            seen.push(ev.payload.0);
        })
        .unwrap();
        assert_eq!(seen, vec!["first", "second", "followup"]);
    }

    #[test]
    fn run_before_leaves_boundary_events() {
        let mut e = Engine::new(0);
        e.schedule(SimTime(5), target(), Ping("boundary")).unwrap();
        assert_eq!(e.run_before(SimTime(5), |_, _| {}).unwrap(), 0);
        assert_eq!(e.now(), SimTime(5));
        assert_eq!(e.pending(), 1);
        assert_eq!(collect(&mut e, 5), vec!["boundary"]);
    }

    #[test]
    fn trace_records_delivery_order() {
        let mut e = Engine::new(0).with_trace();
        e.schedule(SimTime(3), target(), Ping("late")).unwrap();
        e.schedule(SimTime(1), ComponentId::Robot("R1".into()), Ping("early"))
            .unwrap();
        collect(&mut e, 5);
        let t = e.trace();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].target, "robot:R1");
        assert_eq!((t[0].fire_at, t[0].seq), (SimTime(1), 1));
        assert_eq!(t[1].summary, "late");
    }

    #[test]
    fn draws_are_reproducible() {
        let pair = |seed| {
            let mut r = RngStreams::new(seed);
            (
                r.draw(StreamName::TaskDuration, 2..=6).unwrap(),
                r.draw(StreamName::TaskDuration, 2..=6).unwrap(),
            )
        };
        assert_eq!(pair(42), pair(42));
        let (a, b) = pair(42);
        assert!((2..=6).contains(&a) && (2..=6).contains(&b));
    }

    #[test]
    fn streams_are_independent() {
        let mut a = RngStreams::new(7);
        let mut b = RngStreams::new(7);
        for _ in 0..25 {
            a.draw(StreamName::Churn, 0..=1000).unwrap();
        }
        let next_a: Vec<_> = (0..5)
            .map(|_| a.draw(StreamName::PlannerTie, 0..=1000).unwrap())
            .collect();
        let next_b: Vec<_> = (0..5)
            .map(|_| b.draw(StreamName::PlannerTie, 0..=1000).unwrap())
            .collect();
        assert_eq!(next_a, next_b);
    }

    #[test]
    fn degenerate_and_empty_ranges() {
        let mut r = RngStreams::new(1);
        assert_eq!(r.draw(StreamName::Requests, 4..=4), Ok(4));
        #[allow(clippy::reversed_empty_ranges)]
        let empty = 5..=4;
        assert_eq!(r.draw(StreamName::Requests, empty), Err(EngineError::EmptyRange));
        assert_eq!(r.pick(StreamName::Requests, 0), Err(EngineError::EmptyRange));
    }
}
