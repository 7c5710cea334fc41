//! Deterministic discrete-event simulator of a multi-robot system: a requests
//! manager queues requests, a planner assigns tasks to robots by capability
//! and load, and a robots manager executes plans on simulated robots.

pub mod bus;
pub mod control;
pub mod domain;
pub mod engine;
pub mod harness;
pub mod metrics;
pub mod planner;
pub mod requests_manager;
pub mod robot_agent;
pub mod robots_manager;
pub mod scenario;
pub mod sim;

pub use control::{Ack, ClockMode, Command, FeedEvent, FeedLog, Rejection, Session, StateDocument};
pub use engine::SimTime;
pub use harness::{run, run_with_seed, OutputFormat, RunOutput, RunReport};
pub use scenario::{bundled, load_scenario, Scenario, ScenarioError};
pub use sim::Simulation;
