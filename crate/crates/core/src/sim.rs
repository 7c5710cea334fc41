//! Wiring of all components onto one engine loop.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bus::{Bus, ComponentId, Content, DeadLetterReason, Envelope};
use crate::control::Command;
use crate::domain::{KnowledgeBase, Request, RobotId, RobotRecord, RobotState};
use crate::engine::{Engine, EngineError, EventHandle, ScheduledEvent, SimTime, Summarize};
use crate::metrics::Record;
use crate::planner::Planner;
use crate::requests_manager::{BlueprintEdit, RequestsManager};
use crate::robot_agent::{churn_step, RobotAgent, RobotAgentConfig};
use crate::robots_manager::{DeregisterOutcome, DeregistrationPolicy, RobotsManager};
use crate::scenario::{Scenario, Workload};

/// Default requestor label for commands that do not name one.
pub const DEFAULT_REQUESTOR: &str = "operator";

/// Engine payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Deliver(Envelope),
    Arrival {
        request_id: String,
        requestor: String,
        blueprint_id: String,
    },
    PlanFeedbackTimeout {
        request_id: String,
    },
    TaskFeedbackTimeout {
        plan_id: String,
        cursor: usize,
    },
    TaskComplete {
        plan_id: String,
        task_label: String,
        conversation_id: String,
        fail: bool,
    },
    ChurnStep {
        tick: u64,
    },
    Command {
        id: u64,
        command: Command,
    },
}

impl From<Envelope> for Event {
    fn from(env: Envelope) -> Self {
        Event::Deliver(env)
    }
}

impl Summarize for Event {
    fn summary(&self) -> String {
        match self {
            Event::Deliver(env) => env.summary(),
            Event::Arrival {
                request_id,
                requestor,
                blueprint_id,
            } => format!("ARRIVAL {request_id} blueprint={blueprint_id} requestor={requestor}"),
            Event::PlanFeedbackTimeout { request_id } => format!("PLAN_FEEDBACK_TIMEOUT {request_id}"),
            Event::TaskFeedbackTimeout { plan_id, cursor } => {
                format!("TASK_FEEDBACK_TIMEOUT {plan_id}#{cursor}")
            }
            Event::TaskComplete {
                plan_id,
                task_label,
                fail,
                ..
            } => format!(
                "TASK_COMPLETE {plan_id}/{task_label} {}",
                if *fail { "fail" } else { "done" }
            ),
            Event::ChurnStep { tick } => format!("CHURN tick={tick}"),
            Event::Command { id, command } => format!("COMMAND #{id} {}", command.kind()),
        }
    }
}

/// Observable happenings, in the order they occurred. Drained by the control
/// session into its event feed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JournalEntry {
    Envelope {
        at: SimTime,
        envelope: Envelope,
    },
    DeadLetter {
        at: SimTime,
        reason: DeadLetterReason,
        envelope: Envelope,
    },
    Transition {
        at: SimTime,
        robot: RobotId,
        from: RobotState,
        to: RobotState,
    },
}

/// Borrowed view handed to component handlers.
pub struct Ctx<'a> {
    pub engine: &'a mut Engine<Event>,
    pub bus: &'a mut Bus,
    pub kb: &'a mut KnowledgeBase,
    log: &'a mut Vec<Record>,
    journal: &'a mut Vec<JournalEntry>,
}

impl Ctx<'_> {
    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub fn send(
        &mut self,
        sender: ComponentId,
        receiver: ComponentId,
        conversation_id: &str,
        content: Content,
    ) -> EventHandle {
        let env = Envelope::new(sender, receiver, conversation_id, content, self.now());
        self.bus.send(self.engine, env)
    }

    pub fn record(&mut self, record: Record) {
        self.log.push(record);
    }

    pub fn ignored(&mut self, component: ComponentId, conversation_id: &str, detail: &str) {
        let at = self.now();
        self.log.push(Record::Ignored {
            at,
            component: component.to_string(),
            conversation_id: conversation_id.to_owned(),
            detail: detail.to_owned(),
        });
    }

    pub fn dead_letter(&mut self, envelope: Envelope, reason: DeadLetterReason) {
        let at = self.now();
        self.journal.push(JournalEntry::DeadLetter {
            at,
            reason,
            envelope: envelope.clone(),
        });
        self.bus.dead_letter(envelope, at, reason);
    }

    pub fn journal_transition(&mut self, robot: &str, from: RobotState, to: RobotState) {
        let at = self.now();
        self.journal.push(JournalEntry::Transition {
            at,
            robot: robot.to_owned(),
            from,
            to,
        });
    }
}

/// Result of a world-level command: an optional detail (the assigned request
/// id for submissions) or a rejection message.
pub type CommandResult = Result<Option<String>, String>;

/// Every component plus shared state, minus the engine.
#[derive(Debug)]
pub struct World {
    pub kb: KnowledgeBase,
    pub bus: Bus,
    pub log: Vec<Record>,
    pub journal: Vec<JournalEntry>,
    pub requests: RequestsManager,
    pub planner: Planner,
    pub robots: RobotsManager,
    pub agents: BTreeMap<RobotId, RobotAgent>,
    pub requestors: BTreeMap<String, Vec<(String, Content)>>,
    pub churn_steps_per_tick: u64,
    reserved_request_ids: BTreeSet<String>,
    next_auto_request: u64,
    command_results: BTreeMap<u64, CommandResult>,
}

impl World {
    fn ctx<'a>(&'a mut self, engine: &'a mut Engine<Event>) -> (Ctx<'a>, Parts<'a>) {
        let World {
            kb,
            bus,
            log,
            journal,
            requests,
            planner,
            robots,
            agents,
            requestors,
            churn_steps_per_tick,
            reserved_request_ids,
            next_auto_request,
            command_results,
        } = self;
        (
            Ctx {
                engine,
                bus,
                kb,
                log,
                journal,
            },
            Parts {
                requests,
                planner,
                robots,
                agents,
                requestors,
                churn_steps_per_tick: *churn_steps_per_tick,
                reserved_request_ids,
                next_auto_request,
                command_results,
            },
        )
    }

    pub fn handle(&mut self, engine: &mut Engine<Event>, ev: ScheduledEvent<Event>) {
        let (mut ctx, mut parts) = self.ctx(engine);
        parts.handle(&mut ctx, ev);
    }

    /// Registration snapshot used to seed robots present from the start.
    fn add_robot(&mut self, config: RobotAgentConfig, history: u64, registered: bool, at: SimTime) {
        let mut record = RobotRecord::new(config.id.clone(), config.capabilities.clone(), history, at);
        if registered {
            record.state = RobotState::Idle;
            let _ = self.bus.subscribe(ComponentId::Robot(config.id.clone()));
        }
        self.log.push(Record::RobotAdded {
            at,
            robot: config.id.clone(),
            state: record.state,
        });
        self.kb.robot_directory.insert(config.id.clone(), record);
        self.agents.insert(config.id.clone(), RobotAgent::new(config));
    }

    pub fn requestor_inbox(&self, requestor: &str) -> &[(String, Content)] {
        self.requestors.get(requestor).map(Vec::as_slice).unwrap_or(&[])
    }
}

struct Parts<'a> {
    requests: &'a mut RequestsManager,
    planner: &'a mut Planner,
    robots: &'a mut RobotsManager,
    agents: &'a mut BTreeMap<RobotId, RobotAgent>,
    requestors: &'a mut BTreeMap<String, Vec<(String, Content)>>,
    churn_steps_per_tick: u64,
    reserved_request_ids: &'a mut BTreeSet<String>,
    next_auto_request: &'a mut u64,
    command_results: &'a mut BTreeMap<u64, CommandResult>,
}

impl Parts<'_> {
    fn handle(&mut self, ctx: &mut Ctx<'_>, ev: ScheduledEvent<Event>) {
        match ev.payload {
            Event::Deliver(env) => {
                let at = ev.fire_at;
                match ctx.bus.accept(env.clone(), at) {
                    Some(env) => {
                        ctx.journal.push(JournalEntry::Envelope {
                            at,
                            envelope: env.clone(),
                        });
                        self.route(ctx, env);
                    }
                    None => ctx.journal.push(JournalEntry::DeadLetter {
                        at,
                        reason: DeadLetterReason::UnboundReceiver,
                        envelope: env,
                    }),
                }
            }
            Event::Arrival {
                request_id,
                requestor,
                blueprint_id,
            } => self.submit(ctx, &requestor, &request_id, &blueprint_id),
            Event::PlanFeedbackTimeout { request_id } => {
                self.requests.on_feedback_timeout(ctx, &request_id)
            }
            Event::TaskFeedbackTimeout { plan_id, cursor } => {
                self.robots.on_task_timeout(ctx, &plan_id, cursor)
            }
            Event::TaskComplete {
                plan_id,
                task_label,
                fail,
                ..
            } => {
                if let ComponentId::Robot(robot) = &ev.target {
                    let finished = self
                        .agents
                        .get_mut(robot)
                        .is_some_and(|a| a.on_complete(ctx, &plan_id, &task_label, fail));
                    if finished {
                        self.robots.release(ctx, robot);
                    }
                }
            }
            Event::ChurnStep { .. } => self.churn(ctx),
            Event::Command { id, command } => {
                let result = self.command(ctx, command);
                self.command_results.insert(id, result);
            }
        }
    }

    fn route(&mut self, ctx: &mut Ctx<'_>, env: Envelope) {
        match (&env.receiver, &env.content) {
            (
                ComponentId::RequestsManager,
                Content::SubmitRequest {
                    request_id,
                    requestor,
                    blueprint_id,
                },
            ) => {
                let rq = Request::new(request_id, requestor, blueprint_id, ctx.now());
                self.requests.on_request(ctx, rq);
            }
            (ComponentId::RequestsManager, Content::PlanFail { reason, .. })
            | (ComponentId::RequestsManager, Content::PlanExecFail { reason, .. }) => {
                self.requests
                    .on_plan_feedback(ctx, &env.conversation_id, Err(reason.clone()))
            }
            (ComponentId::RequestsManager, Content::PlanExecSuccess { .. }) => {
                self.requests.on_plan_feedback(ctx, &env.conversation_id, Ok(()))
            }
            (
                ComponentId::Planner,
                Content::BlueprintToPlanner {
                    request_id,
                    blueprint,
                },
            ) => self.planner.on_blueprint(ctx, request_id, blueprint),
            (ComponentId::RobotsManager, Content::PlanVerified { plan }) => {
                self.robots.on_verified_plan(ctx, plan.clone())
            }
            (ComponentId::RobotsManager, Content::TaskDone { .. } | Content::TaskFail { .. }) => {
                self.robots.on_task_feedback(ctx, &env)
            }
            (ComponentId::RobotsManager, Content::Register { robot, capabilities }) => {
                if let Err(e) = self.robots.register(ctx, robot, capabilities.clone()) {
                    ctx.ignored(ComponentId::RobotsManager, &env.conversation_id, &e.to_string());
                }
            }
            (ComponentId::RobotsManager, Content::Deregister { robot }) => {
                match self.robots.deregister(ctx, robot) {
                    Ok(DeregisterOutcome::Aborted) => {
                        if let Some(agent) = self.agents.get_mut(robot) {
                            agent.abort(ctx.engine);
                        }
                    }
                    Ok(_) => {}
                    Err(e) => {
                        ctx.ignored(ComponentId::RobotsManager, &env.conversation_id, &e.to_string())
                    }
                }
            }
            (ComponentId::Robot(id), Content::TaskAssign { .. }) => {
                if let Some(agent) = self.agents.get_mut(id) {
                    agent.on_task_assign(ctx, env);
                }
            }
            (
                ComponentId::Requestor(name),
                Content::RequestSuccess { request_id } | Content::RequestFail { request_id, .. },
            ) => {
                let status = match &env.content {
                    Content::RequestFail { reason, .. } => {
                        crate::domain::RequestStatus::Failed(reason.clone())
                    }
                    _ => crate::domain::RequestStatus::Succeeded,
                };
                let at = ctx.now();
                ctx.record(Record::RequestorNotified {
                    at,
                    requestor: name.clone(),
                    request_id: request_id.clone(),
                    status,
                });
                self.requestors
                    .entry(name.clone())
                    .or_default()
                    .push((request_id.clone(), env.content.clone()));
            }
            _ => {
                let receiver = env.receiver.clone();
                ctx.ignored(receiver, &env.conversation_id, "unexpected performative");
            }
        }
    }

    fn ensure_requestor(&mut self, ctx: &mut Ctx<'_>, requestor: &str) {
        if !self.requestors.contains_key(requestor) {
            self.requestors.insert(requestor.to_owned(), Vec::new());
            let _ = ctx.bus.subscribe(ComponentId::Requestor(requestor.to_owned()));
        }
    }

    fn submit(&mut self, ctx: &mut Ctx<'_>, requestor: &str, request_id: &str, blueprint_id: &str) {
        self.ensure_requestor(ctx, requestor);
        ctx.send(
            ComponentId::Requestor(requestor.to_owned()),
            ComponentId::RequestsManager,
            request_id,
            Content::SubmitRequest {
                request_id: request_id.to_owned(),
                requestor: requestor.to_owned(),
                blueprint_id: blueprint_id.to_owned(),
            },
        );
    }

    /// A robot with a deferred departure counts as unregistered here, and
    /// drawing it to join cancels the departure.
    fn churn(&mut self, ctx: &mut Ctx<'_>) {
        let mut registered: Vec<RobotId> = ctx
            .kb
            .registered()
            .filter(|r| !r.leaving)
            .map(|r| r.id.clone())
            .collect();
        let mut unregistered: Vec<RobotId> = ctx
            .kb
            .robot_directory
            .values()
            .filter(|r| !r.state.is_registered() || r.leaving)
            .map(|r| r.id.clone())
            .collect();
        for _ in 0..self.churn_steps_per_tick {
            let decision = churn_step(&registered, &unregistered, ctx.engine.rng());
            if let Some(robot) = decision.leave {
                registered.retain(|r| *r != robot);
                ctx.send(
                    ComponentId::Robot(robot.clone()),
                    ComponentId::RobotsManager,
                    &robot,
                    Content::Deregister {
                        robot: robot.clone(),
                    },
                );
            }
            if let Some(robot) = decision.join {
                unregistered.retain(|r| *r != robot);
                let pos = registered.binary_search(&robot).unwrap_or_else(|p| p);
                registered.insert(pos, robot.clone());
                self.send_register(ctx, &robot);
            }
        }
    }

    fn send_register(&mut self, ctx: &mut Ctx<'_>, robot: &str) {
        let capabilities = self
            .agents
            .get(robot)
            .map(|a| a.config.capabilities.clone())
            .unwrap_or_default();
        ctx.send(
            ComponentId::Robot(robot.to_owned()),
            ComponentId::RobotsManager,
            robot,
            Content::Register {
                robot: robot.to_owned(),
                capabilities,
            },
        );
    }

    fn command(&mut self, ctx: &mut Ctx<'_>, command: Command) -> CommandResult {
        match command {
            Command::SubmitRequest {
                request_id,
                requestor,
                blueprint_id,
            } => {
                let id = match request_id {
                    Some(id) => {
                        if self.requests.knows(&id) || self.reserved_request_ids.contains(&id) {
                            return Err(format!("duplicate request id {id}"));
                        }
                        id
                    }
                    None => loop {
                        let candidate = format!("Rq{}", *self.next_auto_request);
                        *self.next_auto_request += 1;
                        if !self.requests.knows(&candidate)
                            && !self.reserved_request_ids.contains(&candidate)
                        {
                            break candidate;
                        }
                    },
                };
                self.reserved_request_ids.insert(id.clone());
                let requestor = requestor.unwrap_or_else(|| DEFAULT_REQUESTOR.to_owned());
                self.submit(ctx, &requestor, &id, &blueprint_id);
                Ok(Some(id))
            }
            Command::AddBlueprint { blueprint } => {
                RequestsManager::edit_blueprints(ctx.kb, BlueprintEdit::Add { blueprint })
                    .map(|_| None)
                    .map_err(|e| e.to_string())
            }
            Command::ModifyBlueprint { blueprint } => {
                RequestsManager::edit_blueprints(ctx.kb, BlueprintEdit::Modify { blueprint })
                    .map(|_| None)
                    .map_err(|e| e.to_string())
            }
            Command::DeleteBlueprint { blueprint_id } => {
                RequestsManager::edit_blueprints(ctx.kb, BlueprintEdit::Delete { blueprint_id })
                    .map(|_| None)
                    .map_err(|e| e.to_string())
            }
            Command::RegisterRobot {
                robot,
                capabilities,
                duration_range,
                fail_probability,
            } => {
                if let Some(caps) = &capabilities {
                    if let Some(bad) = caps.difference(&ctx.kb.universe).next() {
                        return Err(format!("unknown capability {bad}"));
                    }
                }
                match ctx.kb.robot(&robot) {
                    Some(record) if record.state.is_registered() && !record.leaving => {
                        return Err(format!("robot {robot} is already registered"));
                    }
                    Some(_) => {
                        let agent = self.agents.get_mut(&robot).expect("directory and agents agree");
                        let mut config = agent.config.clone();
                        if let Some(caps) = capabilities {
                            config.capabilities = caps;
                        }
                        if let Some(range) = duration_range {
                            config.duration_range = range;
                        }
                        if let Some(p) = fail_probability {
                            config.fail_probability = p;
                        }
                        config.validate().map_err(|e| e.to_string())?;
                        agent.config = config;
                    }
                    None => {
                        let (Some(caps), Some(range)) = (capabilities, duration_range) else {
                            return Err(format!(
                                "new robot {robot} needs capabilities and duration_range"
                            ));
                        };
                        let config = RobotAgentConfig {
                            id: robot.clone(),
                            capabilities: caps.clone(),
                            duration_range: range,
                            fail_probability: fail_probability.unwrap_or(0.0),
                        };
                        config.validate().map_err(|e| e.to_string())?;
                        let now = ctx.now();
                        ctx.record(Record::RobotAdded {
                            at: now,
                            robot: robot.clone(),
                            state: RobotState::Unregistered,
                        });
                        ctx.kb
                            .robot_directory
                            .insert(robot.clone(), RobotRecord::new(robot.clone(), caps, 0, now));
                        self.agents.insert(robot.clone(), RobotAgent::new(config));
                    }
                }
                self.send_register(ctx, &robot);
                Ok(None)
            }
            Command::DeregisterRobot { robot } => {
                let Some(record) = ctx.kb.robot(&robot) else {
                    return Err(format!("unknown robot {robot}"));
                };
                if !record.state.is_registered() {
                    return Err(format!("robot {robot} is not registered"));
                }
                if record.leaving {
                    return Err(format!("robot {robot} is already leaving"));
                }
                ctx.send(
                    ComponentId::Robot(robot.clone()),
                    ComponentId::RobotsManager,
                    &robot,
                    Content::Deregister { robot: robot.clone() },
                );
                Ok(None)
            }
            Command::StepClock { .. } | Command::RunClock { .. } | Command::PauseClock => {
                Err("clock commands are handled by the session".to_owned())
            }
        }
    }
}

/// Runtime knobs derived from a scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub plan_feedback_timeout: u64,
    pub task_feedback_timeout: u64,
    pub min_robots: usize,
    pub deregistration: DeregistrationPolicy,
    pub bus_latency: u64,
    pub churn_steps_per_tick: u64,
}

/// Engine plus world, driven by clock advances and command injection.
#[derive(Debug)]
pub struct Simulation {
    engine: Engine<Event>,
    world: World,
    next_command: u64,
    units_per_tick: u64,
}

impl Simulation {
    /// Wires every component and pre-schedules churn and workload events.
    pub fn new(scenario: &Scenario) -> Self {
        Self::with_seed(scenario, scenario.master_seed)
    }

    pub fn with_seed(scenario: &Scenario, seed: u64) -> Self {
        let mut engine = Engine::new(seed).with_trace();
        let cfg = scenario.sim_config();
        let mut kb = KnowledgeBase::new(scenario.capability_universe.clone());
        for bp in &scenario.blueprints {
            kb.blueprints.insert(bp.id.clone(), bp.clone());
        }
        let mut bus = Bus::new(cfg.bus_latency);
        for id in [
            ComponentId::RequestsManager,
            ComponentId::Planner,
            ComponentId::RobotsManager,
        ] {
            bus.subscribe(id).expect("fresh bus");
        }
        let mut world = World {
            kb,
            bus,
            log: Vec::new(),
            journal: Vec::new(),
            requests: RequestsManager::new(cfg.plan_feedback_timeout),
            planner: Planner::new(cfg.min_robots),
            robots: RobotsManager::new(cfg.task_feedback_timeout, cfg.deregistration),
            agents: BTreeMap::new(),
            requestors: BTreeMap::new(),
            churn_steps_per_tick: cfg.churn_steps_per_tick,
            reserved_request_ids: BTreeSet::new(),
            next_auto_request: 1,
            command_results: BTreeMap::new(),
        };
        for robot in &scenario.robots {
            world.add_robot(robot.agent_config(), robot.history, robot.registered, SimTime::ZERO);
        }

        let upt = scenario.units_per_tick.max(1);
        let ticks = scenario.ticks();
        if scenario.churn.enabled {
            for tick in 0..ticks {
                engine
                    .schedule(SimTime(tick * upt), ComponentId::Control, Event::ChurnStep { tick })
                    .expect("churn times are in the future");
            }
        }
        let arrivals = scenario.arrivals(engine.rng());
        for a in arrivals {
            world.reserved_request_ids.insert(a.request_id.clone());
            engine
                .schedule(
                    a.time,
                    ComponentId::Requestor(a.requestor.clone()),
                    Event::Arrival {
                        request_id: a.request_id,
                        requestor: a.requestor,
                        blueprint_id: a.blueprint_id,
                    },
                )
                .expect("arrival times are in the future");
        }
        if let Workload::Generator(_) = scenario.workload {
            world.next_auto_request = world.reserved_request_ids.len() as u64 + 1;
        }

        Self {
            engine,
            world,
            next_command: 0,
            units_per_tick: upt,
        }
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub fn units_per_tick(&self) -> u64 {
        self.units_per_tick
    }

    pub fn engine(&self) -> &Engine<Event> {
        &self.engine
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    /// Delivers every event strictly before `t`; the clock ends at `t`.
    pub fn advance_before(&mut self, t: SimTime) -> Result<usize, EngineError> {
        let Simulation { engine, world, .. } = self;
        engine.run_before(t, |eng, ev| world.handle(eng, ev))
    }

    /// Delivers every event up to and including `t`.
    pub fn advance_until(&mut self, t: SimTime) -> Result<usize, EngineError> {
        let Simulation { engine, world, .. } = self;
        engine.run_until(t, |eng, ev| world.handle(eng, ev))
    }

    /// Injects a world command as an event at the current time and processes
    /// everything due at this instant.
    pub fn apply_command(&mut self, command: Command) -> CommandResult {
        let id = self.next_command;
        self.next_command += 1;
        let now = self.now();
        self.engine
            .schedule(now, ComponentId::Control, Event::Command { id, command })
            .expect("now is never in the past");
        self.advance_until(now).expect("now is never backwards");
        self.world
            .command_results
            .remove(&id)
            .unwrap_or_else(|| Err("command was not processed".to_owned()))
    }

    /// Removes and returns journal entries recorded so far.
    pub fn drain_journal(&mut self) -> Vec<JournalEntry> {
        std::mem::take(&mut self.world.journal)
    }
}
