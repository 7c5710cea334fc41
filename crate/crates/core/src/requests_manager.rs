//! First-come-first-serve request intake with a single plan in flight.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::bus::{ComponentId, Content};
use crate::domain::{
    FailureReason, KbError, KnowledgeBase, PlanBlueprint, Request, RequestId, RequestStatus,
};
use crate::engine::EventHandle;
use crate::metrics::Record;
use crate::sim::{Ctx, Event};

/// Knowledge-base edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum BlueprintEdit {
    Add { blueprint: PlanBlueprint },
    Modify { blueprint: PlanBlueprint },
    Delete { blueprint_id: String },
}

/// Exact blueprint-id lookup against the current knowledge base.
pub fn match_blueprint(rq: &Request, kb: &KnowledgeBase) -> Option<PlanBlueprint> {
    kb.blueprint(&rq.blueprint_id).cloned()
}

#[derive(Debug, Clone)]
pub struct RequestsManager {
    plan_feedback_timeout: u64,
    requests: BTreeMap<RequestId, Request>,
    /// Accepted ids in arrival order.
    arrival_order: Vec<RequestId>,
    queue: VecDeque<RequestId>,
    in_flight: Option<RequestId>,
    feedback_timer: Option<EventHandle>,
    start_order: Vec<RequestId>,
}

impl RequestsManager {
    pub fn new(plan_feedback_timeout: u64) -> Self {
        Self {
            plan_feedback_timeout,
            requests: BTreeMap::new(),
            arrival_order: Vec::new(),
            queue: VecDeque::new(),
            in_flight: None,
            feedback_timer: None,
            start_order: Vec::new(),
        }
    }

    pub fn knows(&self, id: &str) -> bool {
        self.requests.contains_key(id)
    }

    pub fn request(&self, id: &str) -> Option<&Request> {
        self.requests.get(id)
    }

    /// Accepted requests in arrival order.
    pub fn requests(&self) -> impl Iterator<Item = &Request> {
        self.arrival_order.iter().map(|id| &self.requests[id])
    }

    pub fn queue(&self) -> impl Iterator<Item = &RequestId> {
        self.queue.iter()
    }

    pub fn in_flight(&self) -> Option<&RequestId> {
        self.in_flight.as_ref()
    }

    pub fn has_feedback_timer(&self) -> bool {
        self.feedback_timer.is_some()
    }

    /// Ids in the order processing started.
    pub fn start_order(&self) -> &[RequestId] {
        &self.start_order
    }

    pub fn on_request(&mut self, ctx: &mut Ctx<'_>, rq: Request) {
        let now = ctx.now();
        if self.requests.contains_key(&rq.id) {
            ctx.record(Record::RequestRejected {
                at: now,
                request_id: rq.id.clone(),
                reason: FailureReason::DuplicateRequest,
            });
            ctx.send(
                ComponentId::RequestsManager,
                ComponentId::Requestor(rq.requestor.clone()),
                &rq.id,
                Content::RequestFail {
                    request_id: rq.id.clone(),
                    reason: FailureReason::DuplicateRequest,
                },
            );
            return;
        }
        ctx.record(Record::RequestArrived {
            at: now,
            request_id: rq.id.clone(),
            requestor: rq.requestor.clone(),
            blueprint_id: rq.blueprint_id.clone(),
        });
        self.queue.push_back(rq.id.clone());
        self.arrival_order.push(rq.id.clone());
        self.requests.insert(rq.id.clone(), rq);
        if self.in_flight.is_none() {
            self.start_next(ctx);
        }
    }

    /// Selects queue heads until one is dispatched to the planner or the
    /// queue runs dry.
    fn start_next(&mut self, ctx: &mut Ctx<'_>) {
        while self.in_flight.is_none() {
            let Some(id) = self.queue.pop_front() else {
                return;
            };
            let now = ctx.now();
            let rq = self.requests.get_mut(&id).expect("queued id is known");
            rq.transition(RequestStatus::InProgress)
                .expect("queued request can start");
            self.start_order.push(id.clone());
            ctx.record(Record::RequestStarted {
                at: now,
                request_id: id.clone(),
            });
            match match_blueprint(rq, ctx.kb) {
                Some(bp) => self.dispatch_to_planner(ctx, bp, id),
                None => self.finish(ctx, &id, RequestStatus::Failed(FailureReason::NoBlueprintMatch)),
            }
        }
    }

    fn dispatch_to_planner(&mut self, ctx: &mut Ctx<'_>, bp: PlanBlueprint, request_id: RequestId) {
        ctx.send(
            ComponentId::RequestsManager,
            ComponentId::Planner,
            &request_id,
            Content::BlueprintToPlanner {
                request_id: request_id.clone(),
                blueprint: bp,
            },
        );
        let timer = ctx.engine.schedule_in(
            self.plan_feedback_timeout,
            ComponentId::RequestsManager,
            Event::PlanFeedbackTimeout {
                request_id: request_id.clone(),
            },
        );
        self.in_flight = Some(request_id);
        self.feedback_timer = Some(timer);
    }

    fn finish(&mut self, ctx: &mut Ctx<'_>, id: &str, status: RequestStatus) {
        let now = ctx.now();
        let rq = self.requests.get_mut(id).expect("finishing a known request");
        rq.transition(status.clone())
            .expect("request finishes exactly once");
        let requestor = rq.requestor.clone();
        ctx.record(Record::RequestFinished {
            at: now,
            request_id: id.to_owned(),
            status: status.clone(),
        });
        let content = match status {
            RequestStatus::Succeeded => Content::RequestSuccess {
                request_id: id.to_owned(),
            },
            RequestStatus::Failed(reason) => Content::RequestFail {
                request_id: id.to_owned(),
                reason,
            },
            _ => unreachable!("finish called with non-terminal status"),
        };
        ctx.send(
            ComponentId::RequestsManager,
            ComponentId::Requestor(requestor),
            id,
            content,
        );
        if self.in_flight.as_deref() == Some(id) {
            self.in_flight = None;
            if let Some(timer) = self.feedback_timer.take() {
                ctx.engine.cancel(timer);
            }
        }
    }

    /// Positive (`Ok`) or negative plan feedback for a conversation.
    pub fn on_plan_feedback(
        &mut self,
        ctx: &mut Ctx<'_>,
        conversation_id: &str,
        outcome: Result<(), FailureReason>,
    ) {
        if self.in_flight.as_deref() != Some(conversation_id) {
            ctx.ignored(
                ComponentId::RequestsManager,
                conversation_id,
                "stale plan feedback",
            );
            return;
        }
        let status = match outcome {
            Ok(()) => RequestStatus::Succeeded,
            Err(reason) => RequestStatus::Failed(reason),
        };
        self.finish(ctx, conversation_id, status);
        self.start_next(ctx);
    }

    pub fn on_feedback_timeout(&mut self, ctx: &mut Ctx<'_>, request_id: &str) {
        if self.in_flight.as_deref() != Some(request_id) {
            return;
        }
        self.feedback_timer = None;
        self.finish(
            ctx,
            request_id,
            RequestStatus::Failed(FailureReason::PlanFeedbackTimeout),
        );
        self.start_next(ctx);
    }

    pub fn edit_blueprints(kb: &mut KnowledgeBase, edit: BlueprintEdit) -> Result<(), KbError> {
        match edit {
            BlueprintEdit::Add { blueprint } => kb.add_blueprint(blueprint),
            BlueprintEdit::Modify { blueprint } => kb.modify_blueprint(blueprint),
            BlueprintEdit::Delete { blueprint_id } => kb.delete_blueprint(&blueprint_id).map(|_| ()),
        }
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;
    use crate::control::Command;
    use crate::domain::TaskSpec;
    use crate::engine::SimTime;
    use crate::metrics::lifecycles;
    use crate::sim::Simulation;
    use crate::testkit::{arrivals, scenario};

    #[test]
    fn queue_is_served_in_arrival_order() {
        let sc = scenario(json!({
            "workload": arrivals(&[(0, "Q1", "B1"), (0, "Q2", "B1"), (0, "Q3", "B1")])
        }));
        let mut sim = Simulation::new(&sc);
        sim.advance_before(SimTime(10)).unwrap();
        let rm = &sim.world().requests;
        assert_eq!(rm.start_order(), ["Q1", "Q2", "Q3"]);
        let starts: Vec<_> = lifecycles(&sim.world().log).iter().map(|l| l.start).collect();
        assert_eq!(starts, [Some(SimTime(0)), Some(SimTime(1)), Some(SimTime(2))]);
        assert!(rm.requests().all(|r| r.status == RequestStatus::Succeeded));
    }

    #[test]
    fn feedback_timer_is_cancelled_on_feedback() {
        let sc = scenario(json!({ "workload": arrivals(&[(0, "Q1", "B2")]) }));
        let mut sim = Simulation::new(&sc);
        sim.advance_before(SimTime(40)).unwrap();
        let rm = &sim.world().requests;
        assert_eq!(rm.request("Q1").unwrap().status, RequestStatus::Succeeded);
        assert!(!rm.has_feedback_timer());
        assert_eq!(sim.engine().pending(), 0);
    }

    #[test]
    fn unknown_blueprint_fails_and_next_request_starts_at_once() {
        let sc = scenario(json!({}));
        let mut sim = Simulation::new(&sc);
        let bad = sim.apply_command(Command::SubmitRequest {
            request_id: Some("Q1".into()),
            requestor: None,
            blueprint_id: "Missing".into(),
        });
        assert_eq!(bad, Ok(Some("Q1".into())));
        sim.apply_command(Command::SubmitRequest {
            request_id: Some("Q2".into()),
            requestor: None,
            blueprint_id: "B1".into(),
        })
        .unwrap();
        let rm = &sim.world().requests;
        assert_eq!(
            rm.request("Q1").unwrap().status,
            RequestStatus::Failed(FailureReason::NoBlueprintMatch)
        );
        assert_eq!(rm.in_flight().map(String::as_str), Some("Q2"));
    }

    #[test]
    fn late_execution_feedback_is_ignored_after_timeout() {
        let sc = scenario(json!({
            "timeouts": { "plan_feedback": 2, "task_feedback": 10 },
            "robots": [
                { "id": "R1", "capabilities": ["C1", "C2"], "duration_range": [3, 3] },
                { "id": "R2", "capabilities": ["C1", "C2"], "duration_range": [3, 3] }
            ],
            "workload": arrivals(&[(0, "Q1", "B1")])
        }));
        let mut sim = Simulation::new(&sc);
        sim.advance_before(SimTime(10)).unwrap();
        let world = sim.world();
        assert_eq!(
            world.requests.request("Q1").unwrap().status,
            RequestStatus::Failed(FailureReason::PlanFeedbackTimeout)
        );
        let ignored = world.log.iter().any(|r| {
            matches!(r, Record::Ignored { at, conversation_id, detail, .. }
                if *at == SimTime(3) && conversation_id == "Q1" && detail == "stale plan feedback")
        });
        assert!(ignored);
        let notices = world.requestor_inbox("requestor").len();
        assert_eq!(notices, 1);
    }

    #[test]
    fn blueprint_edits() {
        let mut kb = KnowledgeBase::new(crate::domain::caps(["C1"]));
        let bp = PlanBlueprint {
            id: "B".into(),
            tasks: vec![TaskSpec::new("T1", ["C1"])],
        };
        RequestsManager::edit_blueprints(&mut kb, BlueprintEdit::Add { blueprint: bp.clone() }).unwrap();
        assert!(RequestsManager::edit_blueprints(&mut kb, BlueprintEdit::Add { blueprint: bp.clone() }).is_err());
        let renamed = PlanBlueprint { id: "Other".into(), ..bp.clone() };
        assert!(RequestsManager::edit_blueprints(&mut kb, BlueprintEdit::Modify { blueprint: renamed }).is_err());
        let unknown = PlanBlueprint {
            tasks: vec![TaskSpec::new("T1", ["C9"])],
            ..bp
        };
        assert!(RequestsManager::edit_blueprints(&mut kb, BlueprintEdit::Modify { blueprint: unknown }).is_err());
        RequestsManager::edit_blueprints(&mut kb, BlueprintEdit::Delete { blueprint_id: "B".into() }).unwrap();
        assert!(RequestsManager::edit_blueprints(&mut kb, BlueprintEdit::Delete { blueprint_id: "B".into() }).is_err());
    }
}
