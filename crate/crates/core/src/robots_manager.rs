//! Robot registration directory and sequential plan executor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{ComponentId, Content, Envelope};
use crate::domain::{CapabilitySet, FailureReason, RobotId, RobotState, VerifiedPlan};
use crate::engine::EventHandle;
use crate::metrics::{accrue_state, Record};
use crate::sim::{Ctx, Event};

/// What happens when a robot executing a task asks to leave.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeregistrationPolicy {
    /// Finish the current task, then leave.
    #[default]
    Defer,
    /// Leave now; the task's feedback never arrives.
    Immediate,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("unknown robot {0}")]
    UnknownRobot(RobotId),
    #[error("robot {0} is already registered")]
    AlreadyRegistered(RobotId),
    #[error("robot {0} is not registered")]
    NotRegistered(RobotId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeregisterOutcome {
    Unregistered,
    /// The robot leaves once its current task completes.
    Deferred,
    /// The robot left in the middle of a task.
    Aborted,
}

/// Moves a robot to a new state, accruing the elapsed interval into its
/// ledger and logging the transition.
pub fn set_robot_state(ctx: &mut Ctx<'_>, robot: &str, to: RobotState) {
    let now = ctx.now();
    let Some(record) = ctx.kb.robot_mut(robot) else {
        return;
    };
    let from = record.state;
    if from == to {
        return;
    }
    accrue_state(&mut record.ledger, from, record.state_since, now);
    record.state = to;
    record.state_since = now;
    if to != RobotState::Controlled {
        record.current_task = None;
    }
    if to == RobotState::Unregistered {
        record.leaving = false;
    }
    ctx.record(Record::RobotTransition {
        at: now,
        robot: robot.to_owned(),
        from,
        to,
    });
    ctx.journal_transition(robot, from, to);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionContext {
    pub plan: VerifiedPlan,
    pub cursor: usize,
    #[serde(skip)]
    pub task_timer: Option<EventHandle>,
}

impl ExecutionContext {
    fn conversation(&self) -> &str {
        &self.plan.request_id
    }
}

#[derive(Debug, Clone)]
pub struct RobotsManager {
    pub task_feedback_timeout: u64,
    pub policy: DeregistrationPolicy,
    active: Option<ExecutionContext>,
}

impl RobotsManager {
    pub fn new(task_feedback_timeout: u64, policy: DeregistrationPolicy) -> Self {
        Self {
            task_feedback_timeout,
            policy,
            active: None,
        }
    }

    pub fn active(&self) -> Option<&ExecutionContext> {
        self.active.as_ref()
    }

    pub fn register(
        &mut self,
        ctx: &mut Ctx<'_>,
        robot: &str,
        capabilities: CapabilitySet,
    ) -> Result<(), RegistryError> {
        let record = ctx
            .kb
            .robot_mut(robot)
            .ok_or_else(|| RegistryError::UnknownRobot(robot.to_owned()))?;
        if record.state.is_registered() {
            if !record.leaving {
                return Err(RegistryError::AlreadyRegistered(robot.to_owned()));
            }
            // Registering again cancels a deferred departure.
            record.leaving = false;
            record.capabilities = capabilities;
            return Ok(());
        }
        record.capabilities = capabilities;
        set_robot_state(ctx, robot, RobotState::Idle);
        let _ = ctx.bus.subscribe(ComponentId::Robot(robot.to_owned()));
        Ok(())
    }

    pub fn deregister(&mut self, ctx: &mut Ctx<'_>, robot: &str) -> Result<DeregisterOutcome, RegistryError> {
        let state = ctx
            .kb
            .robot(robot)
            .map(|r| r.state)
            .ok_or_else(|| RegistryError::UnknownRobot(robot.to_owned()))?;
        match state {
            RobotState::Unregistered => Err(RegistryError::NotRegistered(robot.to_owned())),
            RobotState::Idle => {
                self.leave(ctx, robot);
                Ok(DeregisterOutcome::Unregistered)
            }
            RobotState::Controlled => match self.policy {
                DeregistrationPolicy::Defer => {
                    if let Some(record) = ctx.kb.robot_mut(robot) {
                        record.leaving = true;
                    }
                    Ok(DeregisterOutcome::Deferred)
                }
                DeregistrationPolicy::Immediate => {
                    self.leave(ctx, robot);
                    Ok(DeregisterOutcome::Aborted)
                }
            },
        }
    }

    fn leave(&mut self, ctx: &mut Ctx<'_>, robot: &str) {
        set_robot_state(ctx, robot, RobotState::Unregistered);
        ctx.bus.unsubscribe(&ComponentId::Robot(robot.to_owned()));
    }

    /// Called when a robot finishes its task: it returns to Idle, or leaves
    /// if a deferred deregistration is pending.
    pub fn release(&mut self, ctx: &mut Ctx<'_>, robot: &str) {
        let leaving = ctx.kb.robot(robot).is_some_and(|r| r.leaving);
        if leaving {
            self.leave(ctx, robot);
        } else {
            set_robot_state(ctx, robot, RobotState::Idle);
        }
    }

    pub fn on_verified_plan(&mut self, ctx: &mut Ctx<'_>, plan: VerifiedPlan) {
        if self.active.is_some() {
            let conv = plan.request_id.clone();
            self.report(ctx, &conv, &plan.plan_id, Err(FailureReason::RobotUnavailable));
            return;
        }
        if plan.assignments.is_empty() {
            let conv = plan.request_id.clone();
            self.report(ctx, &conv, &plan.plan_id, Ok(()));
            return;
        }
        self.active = Some(ExecutionContext {
            plan,
            cursor: 0,
            task_timer: None,
        });
        self.assign_current(ctx);
    }

    fn assign_current(&mut self, ctx: &mut Ctx<'_>) {
        let exec = self.active.as_mut().expect("assigning requires an active plan");
        let assignment = exec.plan.assignments[exec.cursor].clone();
        let available = ctx
            .kb
            .robot(&assignment.robot)
            .is_some_and(|r| r.state == RobotState::Idle);
        if !available {
            self.fail_active(ctx, FailureReason::RobotUnavailable);
            return;
        }
        let conv = exec.conversation().to_owned();
        let plan_id = exec.plan.plan_id.clone();
        ctx.send(
            ComponentId::RobotsManager,
            ComponentId::Robot(assignment.robot.clone()),
            &conv,
            Content::TaskAssign {
                plan_id: plan_id.clone(),
                task: assignment.task.clone(),
                robot: assignment.robot.clone(),
            },
        );
        let cursor = exec.cursor;
        exec.task_timer = Some(ctx.engine.schedule_in(
            self.task_feedback_timeout,
            ComponentId::RobotsManager,
            Event::TaskFeedbackTimeout { plan_id, cursor },
        ));
    }

    fn fail_active(&mut self, ctx: &mut Ctx<'_>, reason: FailureReason) {
        if let Some(exec) = self.active.take() {
            if let Some(t) = exec.task_timer {
                ctx.engine.cancel(t);
            }
            self.report(ctx, exec.conversation(), &exec.plan.plan_id, Err(reason));
        }
    }

    fn report(&self, ctx: &mut Ctx<'_>, conv: &str, plan_id: &str, outcome: Result<(), FailureReason>) {
        let content = match outcome {
            Ok(()) => Content::PlanExecSuccess {
                plan_id: plan_id.to_owned(),
            },
            Err(reason) => Content::PlanExecFail {
                plan_id: plan_id.to_owned(),
                reason,
            },
        };
        ctx.send(ComponentId::RobotsManager, ComponentId::RequestsManager, conv, content);
    }

    pub fn on_task_feedback(&mut self, ctx: &mut Ctx<'_>, env: &Envelope) {
        let (plan_id, task_label, robot, done) = match &env.content {
            Content::TaskDone {
                plan_id,
                task_label,
                robot,
            } => (plan_id, task_label, robot, true),
            Content::TaskFail {
                plan_id,
                task_label,
                robot,
            } => (plan_id, task_label, robot, false),
            _ => return,
        };
        if done {
            let now = ctx.now();
            if let Some(record) = ctx.kb.robot_mut(robot) {
                record.history += 1;
                let history = record.history;
                ctx.record(Record::HistoryIncremented {
                    at: now,
                    robot: robot.clone(),
                    history,
                });
            }
        }
        let current = self.active.as_ref().is_some_and(|exec| {
            let a = &exec.plan.assignments[exec.cursor];
            exec.plan.plan_id == *plan_id
                && exec.conversation() == env.conversation_id
                && a.task.label == *task_label
                && a.robot == *robot
        });
        if !current {
            ctx.ignored(ComponentId::RobotsManager, &env.conversation_id, "stale task feedback");
            return;
        }
        if !done {
            self.fail_active(ctx, FailureReason::TaskNegativeFeedback);
            return;
        }
        let exec = self.active.as_mut().expect("checked above");
        if let Some(t) = exec.task_timer.take() {
            ctx.engine.cancel(t);
        }
        exec.cursor += 1;
        if exec.cursor < exec.plan.assignments.len() {
            self.assign_current(ctx);
        } else {
            let exec = self.active.take().expect("checked above");
            self.report(ctx, exec.conversation(), &exec.plan.plan_id, Ok(()));
        }
    }

    pub fn on_task_timeout(&mut self, ctx: &mut Ctx<'_>, plan_id: &str, cursor: usize) {
        let matches = self
            .active
            .as_ref()
            .is_some_and(|e| e.plan.plan_id == plan_id && e.cursor == cursor);
        if matches {
            if let Some(exec) = self.active.as_mut() {
                exec.task_timer = None;
            }
            self.fail_active(ctx, FailureReason::TaskFeedbackTimeout);
        }
    }
}
