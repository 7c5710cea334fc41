//! HTTP control surface for a live simulation session.
//!
//! One engine task owns the [`Session`]. Handlers never touch it directly:
//! commands travel over a channel and are applied in arrival order, and reads
//! are served from state the engine task publishes after every change.

use std::convert::Infallible;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot, watch};

use mrsim_core::control::DEFAULT_RETENTION;
use mrsim_core::metrics::TickSample;
use mrsim_core::{Ack, ClockMode, Command, FeedEvent, FeedLog, Rejection, Session, StateDocument};

/// Engine-loop settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApiConfig {
    /// Simulation units advanced per wall-clock second while free-running.
    pub units_per_second: f64,
    pub command_buffer: usize,
    pub feed_retention: usize,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            units_per_second: 2.0,
            command_buffer: 256,
            feed_retention: DEFAULT_RETENTION,
        }
    }
}

type Reply = oneshot::Sender<Result<Ack, Rejection>>;

/// Read side shared between the engine task and request handlers.
#[derive(Debug)]
struct Published {
    state: watch::Sender<Arc<StateDocument>>,
    ticks: watch::Sender<Arc<Vec<TickSample>>>,
    feed: RwLock<FeedLog>,
    /// Last feed sequence number, for waking event streams.
    feed_seq: watch::Sender<u64>,
}

/// Cloneable handle to a running engine task.
#[derive(Debug, Clone)]
pub struct EngineHandle {
    commands: mpsc::Sender<(Command, Reply)>,
    published: Arc<Published>,
}

impl EngineHandle {
    /// Queues a command and waits for its outcome. `None` if the engine
    /// task has stopped.
    pub async fn submit(&self, command: Command) -> Option<Result<Ack, Rejection>> {
        let (tx, rx) = oneshot::channel();
        self.commands.send((command, tx)).await.ok()?;
        rx.await.ok()
    }

    pub fn state(&self) -> Arc<StateDocument> {
        self.published.state.borrow().clone()
    }

    /// Finalized tick samples in `[from, to)`.
    pub fn metrics(&self, from: u64, to: u64) -> Vec<TickSample> {
        let ticks = self.published.ticks.borrow().clone();
        let to = to.min(ticks.len() as u64);
        if from >= to {
            return Vec::new();
        }
        ticks[from as usize..to as usize].to_vec()
    }

    pub fn events_since(&self, since: Option<u64>) -> Vec<FeedEvent> {
        self.published
            .feed
            .read()
            .expect("feed lock poisoned")
            .events_since(since)
    }

    fn subscribe_feed(&self) -> watch::Receiver<u64> {
        self.published.feed_seq.subscribe()
    }
}

/// Starts the engine task on the current tokio runtime.
pub fn spawn_engine(session: Session, config: ApiConfig) -> EngineHandle {
    let (tx, rx) = mpsc::channel(config.command_buffer.max(1));
    let published = Arc::new(Published {
        state: watch::Sender::new(Arc::new(session.snapshot())),
        ticks: watch::Sender::new(Arc::new(Vec::new())),
        feed: RwLock::new(FeedLog::new(config.feed_retention)),
        feed_seq: watch::Sender::new(0),
    });
    let mut engine = EngineLoop {
        session,
        published: published.clone(),
        mirrored: 0,
    };
    engine.publish();
    tokio::spawn(engine.run(rx, config));
    EngineHandle {
        commands: tx,
        published,
    }
}

struct EngineLoop {
    session: Session,
    published: Arc<Published>,
    mirrored: u64,
}

impl EngineLoop {
    async fn run(mut self, mut rx: mpsc::Receiver<(Command, Reply)>, config: ApiConfig) {
        let period = Duration::from_secs_f64(1.0 / config.units_per_second.max(1e-3));
        let mut pace = tokio::time::interval(period);
        pace.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            let running = matches!(self.session.clock(), ClockMode::Running { .. });
            tokio::select! {
                biased;
                message = rx.recv() => {
                    let Some((command, reply)) = message else {
                        tracing::debug!("command channel closed, engine task stopping");
                        return;
                    };
                    let kind = command.kind();
                    let was_running = running;
                    let outcome = self.session.apply(command);
                    tracing::debug!(kind, ok = outcome.is_ok(), "command applied");
                    self.publish();
                    let _ = reply.send(outcome);
                    if !was_running && matches!(self.session.clock(), ClockMode::Running { .. }) {
                        pace.reset();
                    }
                }
                _ = pace.tick(), if running => {
                    self.session.free_run_step();
                    self.publish();
                }
            }
        }
    }

    fn publish(&mut self) {
        let fresh = self.session.events_since(Some(self.mirrored));
        if let Some(last) = fresh.last() {
            self.mirrored = last.seq;
            let mut feed = self.published.feed.write().expect("feed lock poisoned");
            for event in fresh {
                feed.insert(event);
            }
        }
        let finalized = self.session.finalized_ticks();
        if self.published.ticks.borrow().len() as u64 != finalized {
            let series = self.session.metrics_series(0, finalized);
            self.published.ticks.send_replace(Arc::new(series));
        }
        self.published.state.send_replace(Arc::new(self.session.snapshot()));
        self.published.feed_seq.send_replace(self.mirrored);
    }
}

#[derive(Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum CommandResponse {
    Accepted { ack: Ack },
    Rejected { rejection: Rejection },
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

async fn post_command(State(handle): State<EngineHandle>, body: Bytes) -> Response {
    let command: Command = match serde_json::from_slice(&body) {
        Ok(c) => c,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed command: {e}")),
    };
    match handle.submit(command).await {
        Some(Ok(ack)) => (StatusCode::OK, Json(CommandResponse::Accepted { ack })).into_response(),
        Some(Err(rejection)) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(CommandResponse::Rejected { rejection }),
        )
            .into_response(),
        None => error(StatusCode::SERVICE_UNAVAILABLE, "engine stopped"),
    }
}

async fn get_state(State(handle): State<EngineHandle>) -> Json<StateDocument> {
    Json(handle.state().as_ref().clone())
}

#[derive(Debug, Deserialize)]
struct MetricsQuery {
    from: Option<u64>,
    to: Option<u64>,
}

#[derive(Debug, Serialize)]
struct MetricsBody {
    from: u64,
    to: u64,
    ticks: Vec<TickSample>,
}

async fn get_metrics(State(handle): State<EngineHandle>, Query(q): Query<MetricsQuery>) -> Response {
    let from = q.from.unwrap_or(0);
    let to = q.to.unwrap_or(u64::MAX);
    if from > to {
        return error(StatusCode::BAD_REQUEST, format!("from {from} is after to {to}"));
    }
    let ticks = handle.metrics(from, to);
    let to = ticks.last().map_or(from, |t| t.tick + 1);
    Json(MetricsBody { from, to, ticks }).into_response()
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    since: Option<u64>,
}

/// Server-sent event stream. Resumes after `since` (or the `Last-Event-ID`
/// header), then follows the feed live.
async fn get_events(
    State(handle): State<EngineHandle>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Sse<impl Stream<Item = Result<SseEvent, Infallible>>> {
    let header_cursor = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse().ok());
    let cursor = q.since.or(header_cursor);
    Sse::new(feed_stream(handle, cursor)).keep_alive(KeepAlive::default())
}

fn feed_stream(handle: EngineHandle, cursor: Option<u64>) -> impl Stream<Item = Result<SseEvent, Infallible>> {
    let wake = handle.subscribe_feed();
    let state = (handle, wake, cursor, std::collections::VecDeque::<FeedEvent>::new());
    stream::unfold(state, |(handle, mut wake, mut cursor, mut pending)| async move {
        loop {
            if let Some(event) = pending.pop_front() {
                cursor = Some(event.seq);
                let frame = SseEvent::default()
                    .id(event.seq.to_string())
                    .event(event.kind.clone())
                    .data(serde_json::to_string(&event.body).expect("feed bodies serialize"));
                return Some((Ok(frame), (handle, wake, cursor, pending)));
            }
            wake.borrow_and_update();
            let fresh = handle.events_since(cursor);
            if fresh.is_empty() {
                if wake.changed().await.is_err() {
                    return None;
                }
                continue;
            }
            pending.extend(fresh);
        }
    })
}

/// Routes: POST /commands, GET /state, GET /metrics, GET /events.
pub fn router(handle: EngineHandle) -> Router {
    Router::new()
        .route("/commands", post(post_command))
        .route("/state", get(get_state))
        .route("/metrics", get(get_metrics))
        .route("/events", get(get_events))
        .with_state(handle)
}

/// Serves the router on `listener` until the process stops.
pub async fn serve(listener: tokio::net::TcpListener, handle: EngineHandle) -> std::io::Result<()> {
    axum::serve(listener, router(handle)).await
}
