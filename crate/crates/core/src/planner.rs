//! Blueprint -> verified plan transformation.
//!
//! Tasks are planned one by one in blueprint order. Each task goes to an
//! eligible robot with the lowest tentative load, where tentative load is the
//! robot's completed-task history plus the tasks already planned to it in the
//! current plan. Equal-load candidates are broken by a seeded draw that skips
//! robots marked by earlier tie-breaks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{ComponentId, Content};
use crate::domain::{
    satisfies, Assignment, CapabilitySet, FailureReason, KnowledgeBase, PlanBlueprint, RobotId,
    TaskSpec, VerifiedPlan,
};
use crate::engine::{RngStreams, StreamName};
use crate::metrics::{PlanDecision, PlanOutcome, Record};
use crate::sim::Ctx;

/// Registered robot as seen by the planner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobotView {
    pub id: RobotId,
    pub capabilities: CapabilitySet,
    pub history: u64,
}

/// Immutable view of the registry at the planning instant.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerSnapshot {
    pub robots: Vec<RobotView>,
}

impl PlannerSnapshot {
    pub fn new(mut robots: Vec<RobotView>) -> Self {
        robots.sort_by(|a, b| a.id.cmp(&b.id));
        Self { robots }
    }

    pub fn from_kb(kb: &KnowledgeBase) -> Self {
        Self::new(
            kb.registered()
                .map(|r| RobotView {
                    id: r.id.clone(),
                    capabilities: r.capabilities.clone(),
                    history: r.history,
                })
                .collect(),
        )
    }
}

/// Robots previously chosen by a random tie-break, with the order in which
/// they were marked.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TieMarks {
    marks: BTreeMap<RobotId, u64>,
    counter: u64,
}

impl TieMarks {
    pub fn is_marked(&self, robot: &str) -> bool {
        self.marks.contains_key(robot)
    }

    pub fn marked(&self) -> impl Iterator<Item = &RobotId> {
        self.marks.keys()
    }

    fn mark(&mut self, robot: &str) {
        self.counter += 1;
        self.marks.insert(robot.to_owned(), self.counter);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("{registered} robots registered, at least {required} needed")]
    InsufficientRobots { registered: usize, required: usize },
    #[error("no registered robot can perform task {0}")]
    NoCapableRobot(String),
}

impl From<&PlanError> for FailureReason {
    fn from(e: &PlanError) -> Self {
        match e {
            PlanError::InsufficientRobots { .. } => FailureReason::InsufficientRobots,
            PlanError::NoCapableRobot(label) => FailureReason::NoCapableRobot(label.clone()),
        }
    }
}

/// Registered robots able to perform `task`.
pub fn eligible(task: &TaskSpec, snap: &PlannerSnapshot) -> BTreeSet<RobotId> {
    snap.robots
        .iter()
        .filter(|r| satisfies(&r.capabilities, task))
        .map(|r| r.id.clone())
        .collect()
}

/// Picks an argmin of `tentative` among `candidates`. Returns the robot and
/// whether a tie-break draw was needed.
///
/// Ties draw uniformly on the `planner_tie` stream among argmin robots not
/// yet marked. When every tied robot is marked, their marks are cleared
/// except the most recently chosen one, so the same robot never wins two
/// consecutive ties over the same set.
///
/// # Panics
///
/// Panics if `candidates` is empty.
pub fn select_robot(
    candidates: &BTreeSet<RobotId>,
    tentative: &BTreeMap<RobotId, u64>,
    marks: &mut TieMarks,
    rng: &mut RngStreams,
) -> (RobotId, bool) {
    let load = |r: &RobotId| tentative.get(r).copied().unwrap_or(0);
    let min = candidates
        .iter()
        .map(load)
        .min()
        .expect("select_robot needs at least one candidate");
    let argmin: Vec<&RobotId> = candidates.iter().filter(|r| load(r) == min).collect();
    if let [only] = argmin.as_slice() {
        return ((*only).clone(), false);
    }

    let mut open: Vec<&RobotId> = argmin
        .iter()
        .copied()
        .filter(|r| !marks.is_marked(r))
        .collect();
    if open.is_empty() {
        let latest = argmin
            .iter()
            .copied()
            .max_by_key(|r| marks.marks.get(*r).copied().unwrap_or(0))
            .cloned();
        for r in &argmin {
            if Some(*r) != latest.as_ref() {
                marks.marks.remove(*r);
            }
        }
        open = argmin
            .iter()
            .copied()
            .filter(|r| Some(*r) != latest.as_ref())
            .collect();
    }
    let i = rng
        .pick(StreamName::PlannerTie, open.len())
        .expect("open tie set is non-empty");
    let chosen = open[i].clone();
    marks.mark(&chosen);
    (chosen, true)
}

/// Plans every task of `bp` over the snapshot. Also returns the per-task
/// decision log.
pub fn plan(
    bp: &PlanBlueprint,
    request_id: &str,
    snap: &PlannerSnapshot,
    min_robots: usize,
    marks: &mut TieMarks,
    rng: &mut RngStreams,
) -> Result<(VerifiedPlan, Vec<PlanDecision>), PlanError> {
    if snap.robots.len() < min_robots {
        return Err(PlanError::InsufficientRobots {
            registered: snap.robots.len(),
            required: min_robots,
        });
    }
    let mut tentative: BTreeMap<RobotId, u64> =
        snap.robots.iter().map(|r| (r.id.clone(), r.history)).collect();
    let mut assignments = Vec::with_capacity(bp.tasks.len());
    let mut decisions = Vec::with_capacity(bp.tasks.len());

    for task in &bp.tasks {
        let candidates = eligible(task, snap);
        if candidates.is_empty() {
            return Err(PlanError::NoCapableRobot(task.label.clone()));
        }
        let loads = candidates
            .iter()
            .map(|r| (r.clone(), tentative[r]))
            .collect();
        let (robot, tie_break) = select_robot(&candidates, &tentative, marks, rng);
        *tentative.get_mut(&robot).expect("candidate is in snapshot") += 1;
        decisions.push(PlanDecision {
            task: task.label.clone(),
            robot: robot.clone(),
            loads,
            tie_break,
        });
        assignments.push(Assignment {
            task: task.clone(),
            robot,
        });
    }

    Ok((
        VerifiedPlan {
            plan_id: VerifiedPlan::id_for(request_id),
            request_id: request_id.to_owned(),
            assignments,
        },
        decisions,
    ))
}

/// Planner component: answers each blueprint with a verified plan for the
/// robots manager or a plan failure for the requests manager.
#[derive(Debug, Clone)]
pub struct Planner {
    pub min_robots: usize,
    pub marks: TieMarks,
    pub last_plan: Option<VerifiedPlan>,
}

impl Planner {
    pub fn new(min_robots: usize) -> Self {
        Self {
            min_robots,
            marks: TieMarks::default(),
            last_plan: None,
        }
    }

    pub fn on_blueprint(&mut self, ctx: &mut Ctx<'_>, request_id: &str, blueprint: &PlanBlueprint) {
        let snap = PlannerSnapshot::from_kb(ctx.kb);
        let result = plan(
            blueprint,
            request_id,
            &snap,
            self.min_robots,
            &mut self.marks,
            ctx.engine.rng(),
        );
        let now = ctx.now();
        match result {
            Ok((verified, decisions)) => {
                ctx.record(Record::PlanComputed {
                    at: now,
                    request_id: request_id.to_owned(),
                    outcome: PlanOutcome::Verified,
                    decisions,
                });
                self.last_plan = Some(verified.clone());
                ctx.send(
                    ComponentId::Planner,
                    ComponentId::RobotsManager,
                    request_id,
                    Content::PlanVerified { plan: verified },
                );
            }
            Err(err) => {
                let reason = FailureReason::from(&err);
                ctx.record(Record::PlanComputed {
                    at: now,
                    request_id: request_id.to_owned(),
                    outcome: PlanOutcome::Failed(reason.clone()),
                    decisions: Vec::new(),
                });
                ctx.send(
                    ComponentId::Planner,
                    ComponentId::RequestsManager,
                    request_id,
                    Content::PlanFail {
                        request_id: request_id.to_owned(),
                        reason,
                    },
                );
            }
        }
    }
}
