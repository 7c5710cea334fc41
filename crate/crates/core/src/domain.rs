//! Core value types shared by every component: capabilities, tasks,
//! blueprints, requests, verified plans, and the robot directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::metrics::RobotTimeLedger;

pub type RobotId = String;
pub type RequestId = String;
pub type BlueprintId = String;

/// Atomic skill token a robot can possess, e.g. `C1`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CapabilityId(pub String);

impl CapabilityId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CapabilityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for CapabilityId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Unordered capability set. Duplicates collapse on construction.
pub type CapabilitySet = BTreeSet<CapabilityId>;

/// Builds a capability set from string tokens.
pub fn caps<I, S>(tokens: I) -> CapabilitySet
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    tokens
        .into_iter()
        .map(|t| CapabilityId::new(t.as_ref()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub label: String,
    pub required: CapabilitySet,
}

impl TaskSpec {
    pub fn new<I, S>(label: impl Into<String>, required: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            label: label.into(),
            required: caps(required),
        }
    }
}

/// Ordered sequence of task specifications stored in the knowledge base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanBlueprint {
    pub id: BlueprintId,
    pub tasks: Vec<TaskSpec>,
}

impl PlanBlueprint {
    pub fn new(id: impl Into<String>, tasks: Vec<TaskSpec>) -> Self {
        Self {
            id: id.into(),
            tasks,
        }
    }
}

/// True iff the robot's capabilities cover everything the task requires.
pub fn satisfies(robot_caps: &CapabilitySet, task: &TaskSpec) -> bool {
    task.required.is_subset(robot_caps)
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum BlueprintError {
    #[error("empty task list")]
    EmptyTaskList,
    #[error("duplicate task label {0}")]
    DuplicateLabel(String),
    #[error("task {0} requires no capabilities")]
    EmptyRequirement(String),
    #[error("unknown capability {capability} in task {task}")]
    UnknownCapability { task: String, capability: CapabilityId },
}

/// Checks structural rules of a blueprint against a capability universe and
/// returns every violated rule.
pub fn validate_blueprint(
    bp: &PlanBlueprint,
    universe: &CapabilitySet,
) -> Result<(), Vec<BlueprintError>> {
    let mut errors = Vec::new();
    if bp.tasks.is_empty() {
        errors.push(BlueprintError::EmptyTaskList);
    }
    let mut seen = BTreeSet::new();
    for task in &bp.tasks {
        if !seen.insert(task.label.as_str()) {
            errors.push(BlueprintError::DuplicateLabel(task.label.clone()));
        }
        if task.required.is_empty() {
            errors.push(BlueprintError::EmptyRequirement(task.label.clone()));
        }
        for cap in task.required.difference(universe) {
            errors.push(BlueprintError::UnknownCapability {
                task: task.label.clone(),
                capability: cap.clone(),
            });
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

/// Closed set of reasons a request can fail.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailureReason {
    NoBlueprintMatch,
    InsufficientRobots,
    NoCapableRobot(String),
    PlanFeedbackTimeout,
    TaskFeedbackTimeout,
    TaskNegativeFeedback,
    RobotUnavailable,
    /// A request reused an id that was already accepted.
    DuplicateRequest,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::NoCapableRobot(label) => write!(f, "NoCapableRobot({label})"),
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestStatus {
    Queued,
    InProgress,
    Succeeded,
    Failed(FailureReason),
}

impl RequestStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(self, RequestStatus::Succeeded | RequestStatus::Failed(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("illegal request transition {from:?} -> {to:?}")]
pub struct TransitionError {
    pub from: RequestStatus,
    pub to: RequestStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub requestor: String,
    pub blueprint_id: BlueprintId,
    pub arrival_time: SimTime,
    pub status: RequestStatus,
}

impl Request {
    pub fn new(
        id: impl Into<String>,
        requestor: impl Into<String>,
        blueprint_id: impl Into<String>,
        arrival_time: SimTime,
    ) -> Self {
        Self {
            id: id.into(),
            requestor: requestor.into(),
            blueprint_id: blueprint_id.into(),
            arrival_time,
            status: RequestStatus::Queued,
        }
    }

    /// Moves the request along Queued -> InProgress -> {Succeeded, Failed},
    /// or Queued -> Failed.
    pub fn transition(&mut self, to: RequestStatus) -> Result<(), TransitionError> {
        let legal = matches!(
            (&self.status, &to),
            (RequestStatus::Queued, RequestStatus::InProgress)
                | (RequestStatus::Queued, RequestStatus::Failed(_))
                | (RequestStatus::InProgress, RequestStatus::Succeeded)
                | (RequestStatus::InProgress, RequestStatus::Failed(_))
        );
        if legal {
            self.status = to;
            Ok(())
        } else {
            Err(TransitionError {
                from: self.status.clone(),
                to,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub task: TaskSpec,
    pub robot: RobotId,
}

/// Blueprint with every task bound to a capable robot, in blueprint order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiedPlan {
    pub plan_id: String,
    pub request_id: RequestId,
    pub assignments: Vec<Assignment>,
}

impl VerifiedPlan {
    /// Plan ids mirror request ids: `Rq2` plans as `P2`.
    pub fn id_for(request_id: &str) -> String {
        match request_id.strip_prefix("Rq") {
            Some(rest) if !rest.is_empty() => format!("P{rest}"),
            _ => format!("P:{request_id}"),
        }
    }
}

/// Robot life-cycle state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RobotState {
    Unregistered,
    Idle,
    Controlled,
}

impl RobotState {
    pub fn is_registered(self) -> bool {
        !matches!(self, RobotState::Unregistered)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotRecord {
    pub id: RobotId,
    pub capabilities: CapabilitySet,
    pub history: u64,
    pub state: RobotState,
    /// Deregistration requested while Controlled; the robot leaves when its
    /// current task finishes.
    pub leaving: bool,
    pub current_task: Option<String>,
    pub ledger: RobotTimeLedger,
    pub state_since: SimTime,
    /// Time the robot entered the directory.
    pub present_since: SimTime,
}

impl RobotRecord {
    pub fn new(id: impl Into<String>, capabilities: CapabilitySet, history: u64, at: SimTime) -> Self {
        Self {
            id: id.into(),
            capabilities,
            history,
            state: RobotState::Unregistered,
            leaving: false,
            current_task: None,
            ledger: RobotTimeLedger::default(),
            state_since: at,
            present_since: at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KbError {
    #[error("blueprint {0} already exists")]
    DuplicateBlueprint(BlueprintId),
    #[error("unknown blueprint {0}")]
    UnknownBlueprint(BlueprintId),
    #[error("invalid blueprint: {}", join_errors(.0))]
    InvalidBlueprint(Vec<BlueprintError>),
}

fn join_errors(errors: &[BlueprintError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Blueprint store plus the robot directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub universe: CapabilitySet,
    pub blueprints: BTreeMap<BlueprintId, PlanBlueprint>,
    pub robot_directory: BTreeMap<RobotId, RobotRecord>,
}

impl KnowledgeBase {
    pub fn new(universe: CapabilitySet) -> Self {
        Self {
            universe,
            ..Self::default()
        }
    }

    pub fn add_blueprint(&mut self, bp: PlanBlueprint) -> Result<(), KbError> {
        if self.blueprints.contains_key(&bp.id) {
            return Err(KbError::DuplicateBlueprint(bp.id));
        }
        validate_blueprint(&bp, &self.universe).map_err(KbError::InvalidBlueprint)?;
        self.blueprints.insert(bp.id.clone(), bp);
        Ok(())
    }

    pub fn modify_blueprint(&mut self, bp: PlanBlueprint) -> Result<(), KbError> {
        if !self.blueprints.contains_key(&bp.id) {
            return Err(KbError::UnknownBlueprint(bp.id));
        }
        validate_blueprint(&bp, &self.universe).map_err(KbError::InvalidBlueprint)?;
        self.blueprints.insert(bp.id.clone(), bp);
        Ok(())
    }

    pub fn delete_blueprint(&mut self, id: &str) -> Result<PlanBlueprint, KbError> {
        self.blueprints
            .remove(id)
            .ok_or_else(|| KbError::UnknownBlueprint(id.to_owned()))
    }

    pub fn blueprint(&self, id: &str) -> Option<&PlanBlueprint> {
        self.blueprints.get(id)
    }

    pub fn robot(&self, id: &str) -> Option<&RobotRecord> {
        self.robot_directory.get(id)
    }

    pub fn robot_mut(&mut self, id: &str) -> Option<&mut RobotRecord> {
        self.robot_directory.get_mut(id)
    }

    pub fn registered(&self) -> impl Iterator<Item = &RobotRecord> {
        self.robot_directory
            .values()
            .filter(|r| r.state.is_registered())
    }
}
