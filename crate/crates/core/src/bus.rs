//! Typed message envelopes and ordered delivery between components.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::domain::{CapabilitySet, FailureReason, PlanBlueprint, RobotId, TaskSpec, VerifiedPlan};
use crate::engine::{Engine, EventHandle, SimTime};

/// Addressable participant in the simulation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ComponentId {
    RequestsManager,
    Planner,
    RobotsManager,
    Robot(RobotId),
    Requestor(String),
    /// Workload, churn and externally injected commands.
    Control,
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentId::RequestsManager => f.write_str("requests_manager"),
            ComponentId::Planner => f.write_str("planner"),
            ComponentId::RobotsManager => f.write_str("robots_manager"),
            ComponentId::Robot(id) => write!(f, "robot:{id}"),
            ComponentId::Requestor(id) => write!(f, "requestor:{id}"),
            ComponentId::Control => f.write_str("control"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown component id {0:?}")]
pub struct ParseComponentError(String);

impl FromStr for ComponentId {
    type Err = ParseComponentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "requests_manager" => Ok(ComponentId::RequestsManager),
            "planner" => Ok(ComponentId::Planner),
            "robots_manager" => Ok(ComponentId::RobotsManager),
            "control" => Ok(ComponentId::Control),
            _ => {
                if let Some(id) = s.strip_prefix("robot:").filter(|id| !id.is_empty()) {
                    Ok(ComponentId::Robot(id.to_owned()))
                } else if let Some(id) = s.strip_prefix("requestor:").filter(|id| !id.is_empty()) {
                    Ok(ComponentId::Requestor(id.to_owned()))
                } else {
                    Err(ParseComponentError(s.to_owned()))
                }
            }
        }
    }
}

impl Serialize for ComponentId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ComponentId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Performative {
    SubmitRequest,
    BlueprintToPlanner,
    PlanVerified,
    PlanFail,
    TaskAssign,
    TaskDone,
    TaskFail,
    PlanExecSuccess,
    PlanExecFail,
    RequestSuccess,
    RequestFail,
    Register,
    Deregister,
}

impl fmt::Display for Performative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant serializes");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

/// Message body; its shape is fixed by the performative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "performative",
    content = "content",
    rename_all = "SCREAMING_SNAKE_CASE"
)]
pub enum Content {
    SubmitRequest {
        request_id: String,
        requestor: String,
        blueprint_id: String,
    },
    BlueprintToPlanner {
        request_id: String,
        blueprint: PlanBlueprint,
    },
    PlanVerified {
        plan: VerifiedPlan,
    },
    PlanFail {
        request_id: String,
        reason: FailureReason,
    },
    TaskAssign {
        plan_id: String,
        task: TaskSpec,
        robot: RobotId,
    },
    TaskDone {
        plan_id: String,
        task_label: String,
        robot: RobotId,
    },
    TaskFail {
        plan_id: String,
        task_label: String,
        robot: RobotId,
    },
    PlanExecSuccess {
        plan_id: String,
    },
    PlanExecFail {
        plan_id: String,
        reason: FailureReason,
    },
    RequestSuccess {
        request_id: String,
    },
    RequestFail {
        request_id: String,
        reason: FailureReason,
    },
    Register {
        robot: RobotId,
        capabilities: CapabilitySet,
    },
    Deregister {
        robot: RobotId,
    },
}

impl Content {
    pub fn performative(&self) -> Performative {
        match self {
            Content::SubmitRequest { .. } => Performative::SubmitRequest,
            Content::BlueprintToPlanner { .. } => Performative::BlueprintToPlanner,
            Content::PlanVerified { .. } => Performative::PlanVerified,
            Content::PlanFail { .. } => Performative::PlanFail,
            Content::TaskAssign { .. } => Performative::TaskAssign,
            Content::TaskDone { .. } => Performative::TaskDone,
            Content::TaskFail { .. } => Performative::TaskFail,
            Content::PlanExecSuccess { .. } => Performative::PlanExecSuccess,
            Content::PlanExecFail { .. } => Performative::PlanExecFail,
            Content::RequestSuccess { .. } => Performative::RequestSuccess,
            Content::RequestFail { .. } => Performative::RequestFail,
            Content::Register { .. } => Performative::Register,
            Content::Deregister { .. } => Performative::Deregister,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(flatten)]
    pub content: Content,
    pub sender: ComponentId,
    pub receiver: ComponentId,
    pub conversation_id: String,
    pub sent_at: SimTime,
}

impl Envelope {
    pub fn new(
        sender: ComponentId,
        receiver: ComponentId,
        conversation_id: impl Into<String>,
        content: Content,
        sent_at: SimTime,
    ) -> Self {
        Self {
            content,
            sender,
            receiver,
            conversation_id: conversation_id.into(),
            sent_at,
        }
    }

    pub fn performative(&self) -> Performative {
        self.content.performative()
    }

    pub fn summary(&self) -> String {
        format!(
            "{} {}->{} conv={}",
            self.performative(),
            self.sender,
            self.receiver,
            self.conversation_id
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeadLetterReason {
    /// Nobody was bound to the receiver id at delivery time.
    UnboundReceiver,
    /// The receiver refused the envelope in its current state.
    ProtocolViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub at: SimTime,
    pub reason: DeadLetterReason,
    pub envelope: Envelope,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("receiver {0} is already bound")]
    AlreadyBound(ComponentId),
}

/// Delivery bookkeeping. Envelopes travel as engine events; the world routes
/// each accepted envelope to the receiver's handler.
#[derive(Debug, Clone, Default)]
pub struct Bus {
    latency: u64,
    bound: BTreeSet<ComponentId>,
    last_delivery: HashMap<(ComponentId, ComponentId), SimTime>,
    dead_letters: Vec<DeadLetter>,
    sent: u64,
    accepted: u64,
}

impl Bus {
    pub fn new(latency: u64) -> Self {
        Self {
            latency,
            ..Self::default()
        }
    }

    pub fn subscribe(&mut self, receiver: ComponentId) -> Result<(), BusError> {
        if self.bound.contains(&receiver) {
            return Err(BusError::AlreadyBound(receiver));
        }
        self.bound.insert(receiver);
        Ok(())
    }

    pub fn unsubscribe(&mut self, receiver: &ComponentId) -> bool {
        self.bound.remove(receiver)
    }

    pub fn is_bound(&self, receiver: &ComponentId) -> bool {
        self.bound.contains(receiver)
    }

    /// Schedules delivery at `sent_at + latency`, never earlier than the
    /// previous envelope on the same (sender, receiver) pair.
    pub fn send<P: From<Envelope>>(&mut self, engine: &mut Engine<P>, env: Envelope) -> EventHandle {
        let pair = (env.sender.clone(), env.receiver.clone());
        let mut at = engine.now().max(env.sent_at) + self.latency;
        if let Some(prev) = self.last_delivery.get(&pair) {
            at = at.max(*prev);
        }
        self.last_delivery.insert(pair, at);
        self.sent += 1;
        let receiver = env.receiver.clone();
        engine
            .schedule(at, receiver, P::from(env))
            .expect("delivery time is never in the past")
    }

    /// Called at delivery time. Returns the envelope if its receiver is bound,
    /// otherwise records a dead letter.
    pub fn accept(&mut self, env: Envelope, at: SimTime) -> Option<Envelope> {
        if self.bound.contains(&env.receiver) {
            self.accepted += 1;
            Some(env)
        } else {
            self.dead_letter(env, at, DeadLetterReason::UnboundReceiver);
            None
        }
    }

    pub fn dead_letter(&mut self, envelope: Envelope, at: SimTime, reason: DeadLetterReason) {
        self.dead_letters.push(DeadLetter {
            at,
            reason,
            envelope,
        });
    }

    pub fn dead_letters(&self) -> &[DeadLetter] {
        &self.dead_letters
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Summarize;

    #[derive(Debug)]
    struct Msg(Envelope);

    impl From<Envelope> for Msg {
        fn from(e: Envelope) -> Self {
            Msg(e)
        }
    }

    impl Summarize for Msg {
        fn summary(&self) -> String {
            self.0.summary()
        }
    }

    fn env(receiver: ComponentId, conv: &str) -> Envelope {
        Envelope::new(
            ComponentId::RequestsManager,
            receiver,
            conv,
            Content::RequestSuccess {
                request_id: conv.into(),
            },
            SimTime(0),
        )
    }

    fn deliver(bus: &mut Bus, engine: &mut Engine<Msg>, until: u64) -> Vec<String> {
        let mut seen = Vec::new();
        engine
            .run_until(SimTime(until), |_, ev| {
                if let Some(e) = bus.accept(ev.payload.0, ev.fire_at) {
                    seen.push(e.conversation_id);
                }
            })
            .unwrap();
        seen
    }

    #[test]
    fn component_ids_round_trip() {
        for id in [
            ComponentId::RequestsManager,
            ComponentId::Planner,
            ComponentId::RobotsManager,
            ComponentId::Robot("R1".into()),
            ComponentId::Requestor("alice".into()),
            ComponentId::Control,
        ] {
            assert_eq!(id.to_string().parse::<ComponentId>().unwrap(), id);
        }
        assert!("robot:".parse::<ComponentId>().is_err());
        assert!("nobody".parse::<ComponentId>().is_err());
    }

    #[test]
    fn bound_receiver_sees_send_order() {
        let mut bus = Bus::new(0);
        let mut engine = Engine::new(0);
        bus.subscribe(ComponentId::Planner).unwrap();
        bus.send(&mut engine, env(ComponentId::Planner, "a"));
        bus.send(&mut engine, env(ComponentId::Planner, "b"));
        assert_eq!(deliver(&mut bus, &mut engine, 0), vec!["a", "b"]);
    }

    #[test]
    fn rebind_rejected() {
        let mut bus = Bus::new(0);
        bus.subscribe(ComponentId::Planner).unwrap();
        assert_eq!(
            bus.subscribe(ComponentId::Planner),
            Err(BusError::AlreadyBound(ComponentId::Planner))
        );
    }

    #[test]
    fn unbound_receiver_dead_letters() {
        let mut bus = Bus::new(0);
        let mut engine = Engine::new(0);
        bus.subscribe(ComponentId::Robot("R2".into())).unwrap();
        bus.unsubscribe(&ComponentId::Robot("R2".into()));
        bus.send(&mut engine, env(ComponentId::Robot("R2".into()), "x"));
        assert!(deliver(&mut bus, &mut engine, 1).is_empty());
        assert_eq!(bus.dead_letters().len(), 1);
        assert_eq!(bus.dead_letters()[0].reason, DeadLetterReason::UnboundReceiver);
    }

    #[test]
    fn latency_delays_delivery() {
        let mut bus = Bus::new(2);
        let mut engine = Engine::new(0);
        bus.subscribe(ComponentId::Planner).unwrap();
        bus.send(&mut engine, env(ComponentId::Planner, "a"));
        assert!(deliver(&mut bus, &mut engine, 1).is_empty());
        assert_eq!(deliver(&mut bus, &mut engine, 2), vec!["a"]);
    }

    #[test]
    fn envelope_json_shape() {
        let e = Envelope::new(
            ComponentId::RobotsManager,
            ComponentId::Robot("R1".into()),
            "Rq2",
            Content::TaskAssign {
                plan_id: "P2".into(),
                task: TaskSpec::new("T1", ["C1", "C3", "C4"]),
                robot: "R1".into(),
            },
            SimTime(4),
        );
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v["performative"], "TASK_ASSIGN");
        assert_eq!(v["sender"], "robots_manager");
        assert_eq!(v["receiver"], "robot:R1");
        assert_eq!(v["conversation_id"], "Rq2");
        assert_eq!(v["sent_at"], 4);
        assert_eq!(v["content"]["task"]["required"], serde_json::json!(["C1", "C3", "C4"]));
        let back: Envelope = serde_json::from_value(v).unwrap();
        assert_eq!(back, e);
    }
}
