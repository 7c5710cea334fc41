//! Simulated robots: capability-bearing timers that hold one task at a time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{ComponentId, Content, DeadLetterReason, Envelope};
use crate::domain::{CapabilitySet, RobotId, RobotState};
use crate::engine::{Engine, EventHandle, RngStreams, StreamName};
use crate::robots_manager::set_robot_state;
use crate::sim::{Ctx, Event};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotAgentConfig {
    pub id: RobotId,
    pub capabilities: CapabilitySet,
    /// Inclusive task duration bounds in simulation units.
    pub duration_range: [u64; 2],
    #[serde(default)]
    pub fail_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentConfigError {
    #[error("minimum duration must be at least 1, got {0}")]
    ZeroDuration(u64),
    #[error("duration range [{0}, {1}] is inverted")]
    InvertedRange(u64, u64),
    #[error("fail probability {0} outside [0, 1]")]
    BadProbability(f64),
}

impl RobotAgentConfig {
    pub fn validate(&self) -> Result<(), AgentConfigError> {
        let [min, max] = self.duration_range;
        if min < 1 {
            return Err(AgentConfigError::ZeroDuration(min));
        }
        if min > max {
            return Err(AgentConfigError::InvertedRange(min, max));
        }
        if !(0.0..=1.0).contains(&self.fail_probability) {
            return Err(AgentConfigError::BadProbability(self.fail_probability));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct HeldTask {
    plan_id: String,
    task_label: String,
    conversation_id: String,
    completion: EventHandle,
}

#[derive(Debug, Clone)]
pub struct RobotAgent {
    pub config: RobotAgentConfig,
    held: Option<HeldTask>,
}

impl RobotAgent {
    pub fn new(config: RobotAgentConfig) -> Self {
        Self { config, held: None }
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn is_busy(&self) -> bool {
        self.held.is_some()
    }

    /// Accepts a task and arms its completion timer. A robot already holding
    /// a task dead-letters the assignment.
    pub fn on_task_assign(&mut self, ctx: &mut Ctx<'_>, env: Envelope) {
        let Content::TaskAssign { plan_id, task, .. } = &env.content else {
            return;
        };
        if self.held.is_some() {
            ctx.dead_letter(env, DeadLetterReason::ProtocolViolation);
            return;
        }
        let [min, max] = self.config.duration_range;
        let rng = ctx.engine.rng();
        let duration = rng
            .draw(StreamName::TaskDuration, min..=max)
            .expect("validated duration range");
        let fail = rng.unit(StreamName::TaskDuration) < self.config.fail_probability;
        let completion = ctx.engine.schedule_in(
            duration,
            ComponentId::Robot(self.config.id.clone()),
            Event::TaskComplete {
                plan_id: plan_id.clone(),
                task_label: task.label.clone(),
                conversation_id: env.conversation_id.clone(),
                fail,
            },
        );
        self.held = Some(HeldTask {
            plan_id: plan_id.clone(),
            task_label: task.label.clone(),
            conversation_id: env.conversation_id.clone(),
            completion,
        });
        set_robot_state(ctx, &self.config.id, RobotState::Controlled);
        if let Some(record) = ctx.kb.robot_mut(&self.config.id) {
            record.current_task = Some(task.label.clone());
        }
    }

    /// Timer elapsed: report the outcome to the robots manager. Returns false
    /// if the event does not belong to the held task.
    pub fn on_complete(&mut self, ctx: &mut Ctx<'_>, plan_id: &str, task_label: &str, fail: bool) -> bool {
        let Some(held) = self.held.take_if(|h| h.plan_id == plan_id && h.task_label == task_label) else {
            return false;
        };
        let robot = self.config.id.clone();
        let content = if fail {
            Content::TaskFail {
                plan_id: held.plan_id,
                task_label: held.task_label,
                robot: robot.clone(),
            }
        } else {
            Content::TaskDone {
                plan_id: held.plan_id,
                task_label: held.task_label,
                robot: robot.clone(),
            }
        };
        ctx.send(
            ComponentId::Robot(robot),
            ComponentId::RobotsManager,
            &held.conversation_id,
            content,
        );
        true
    }

    /// Drops the held task without feedback.
    pub fn abort<P>(&mut self, engine: &mut Engine<P>) {
        if let Some(held) = self.held.take() {
            engine.cancel(held.completion);
        }
    }
}

/// Robots chosen by one churn step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChurnDecision {
    pub leave: Option<RobotId>,
    pub join: Option<RobotId>,
}

/// Draws one robot to leave from `registered` and one to join from
/// `unregistered`, both uniformly on the churn stream. Pools are taken before
/// the step.
pub fn churn_step(registered: &[RobotId], unregistered: &[RobotId], rng: &mut RngStreams) -> ChurnDecision {
    let leave = rng
        .pick(StreamName::Churn, registered.len())
        .ok()
        .map(|i| registered[i].clone());
    let join = rng
        .pick(StreamName::Churn, unregistered.len())
        .ok()
        .map(|i| unregistered[i].clone());
    if leave.is_some() && leave == join {
        return ChurnDecision::default();
    }
    ChurnDecision { leave, join }
}
