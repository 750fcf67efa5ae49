//! HTTP labeling service.
//!
//! Every mutation goes through one writer task that owns the
//! [`FeedbackQueue`]; handlers talk to it over a command channel. Metrics are
//! published through a watch channel, so reading them never waits on the
//! writer.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use prefrl_core::feedback::{instructions, Ack, FeedbackMetrics, FeedbackQueue, LabelSubmission, QueryLine, Rejection, RETRY_AFTER_MS};
use serde::Serialize;
use tokio::sync::{mpsc, oneshot, watch};

pub use prefrl_core::feedback::Choice;

/// Milliseconds since the epoch; replaceable in tests.
pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0))
}

pub struct ServiceConfig {
    /// Environment name used for the instructions text.
    pub env: String,
    /// How often the run's query log is re-read.
    pub refresh_interval: Duration,
    pub clock: Clock,
}

impl ServiceConfig {
    pub fn new(env: impl Into<String>) -> Self {
        Self { env: env.into(), refresh_interval: Duration::from_millis(500), clock: system_clock() }
    }
}

type LabelReply = prefrl_core::Result<Result<Ack, Rejection>>;

enum Command {
    Serve(oneshot::Sender<Option<QueryLine>>),
    Label(LabelSubmission, oneshot::Sender<LabelReply>),
    Enqueue(Box<QueryLine>, oneshot::Sender<bool>),
}

/// Cloneable handle to a running writer task.
#[derive(Clone)]
pub struct ServiceHandle {
    commands: mpsc::Sender<Command>,
    metrics: watch::Receiver<FeedbackMetrics>,
    env: Arc<str>,
}

impl ServiceHandle {
    async fn ask<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> Option<T> {
        let (tx, rx) = oneshot::channel();
        self.commands.send(make(tx)).await.ok()?;
        rx.await.ok()
    }

    pub async fn serve_pair(&self) -> Option<QueryLine> {
        self.ask(Command::Serve).await.flatten()
    }

    pub async fn record_label(&self, submission: LabelSubmission) -> Option<LabelReply> {
        self.ask(|tx| Command::Label(submission, tx)).await
    }

    /// Adds a pair directly, bypassing the query log.
    pub async fn enqueue(&self, query: QueryLine) -> bool {
        self.ask(|tx| Command::Enqueue(Box::new(query), tx)).await.unwrap_or(false)
    }

    pub fn metrics(&self) -> FeedbackMetrics {
        self.metrics.borrow().clone()
    }
}

/// Starts the writer task on the current runtime.
pub fn spawn(mut queue: FeedbackQueue, config: ServiceConfig) -> ServiceHandle {
    let (tx, mut rx) = mpsc::channel::<Command>(256);
    let (metrics_tx, metrics_rx) = watch::channel(queue.metrics());
    let clock = config.clock.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(config.refresh_interval);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                cmd = rx.recv() => {
                    let Some(cmd) = cmd else { break };
                    match cmd {
                        Command::Serve(reply) => {
                            let _ = queue.refresh();
                            let _ = reply.send(queue.serve_pair(clock()));
                        }
                        Command::Label(sub, reply) => {
                            let _ = reply.send(queue.record_label(&sub, clock()));
                        }
                        Command::Enqueue(q, reply) => {
                            let _ = reply.send(queue.enqueue(*q));
                        }
                    }
                }
                _ = tick.tick() => {
                    if let Err(e) = queue.refresh() {
                        eprintln!("query log: {e}");
                    }
                }
            }
            metrics_tx.send_replace(queue.metrics());
        }
    });
    ServiceHandle { commands: tx, metrics: metrics_rx, env: config.env.into() }
}

/// Opens the queue for a run directory and starts the writer task.
pub fn spawn_for_run(run_dir: &Path, config: ServiceConfig) -> prefrl_core::Result<ServiceHandle> {
    Ok(spawn(FeedbackQueue::open(run_dir)?, config))
}

pub fn router(handle: ServiceHandle) -> Router {
    Router::new()
        .route("/api/v1/pair", get(get_pair))
        .route("/api/v1/label", post(post_label))
        .route("/api/v1/metrics", get(get_metrics))
        .route("/api/v1/instructions", get(get_instructions))
        .with_state(handle)
}

fn unavailable() -> Response {
    (StatusCode::SERVICE_UNAVAILABLE, Json(ErrorBody { error: "service stopping".into() })).into_response()
}

async fn get_pair(State(handle): State<ServiceHandle>) -> Response {
    match handle.serve_pair().await {
        Some(q) => ([(header::CONTENT_TYPE, "application/json")], q.to_client_json()).into_response(),
        None => {
            let mut r = StatusCode::NO_CONTENT.into_response();
            let h = r.headers_mut();
            h.insert("retry-after-ms", HeaderValue::from(RETRY_AFTER_MS));
            h.insert(header::RETRY_AFTER, HeaderValue::from(RETRY_AFTER_MS.div_ceil(1000)));
            r
        }
    }
}

#[derive(Serialize)]
struct LabelBody {
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    choice: Option<Choice>,
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

async fn post_label(State(handle): State<ServiceHandle>, Json(sub): Json<LabelSubmission>) -> Response {
    let Some(reply) = handle.record_label(sub).await else { return unavailable() };
    match reply {
        Ok(Ok(Ack::Stored(c))) => Json(LabelBody { status: "stored", choice: Some(c) }).into_response(),
        Ok(Ok(Ack::Discarded)) => Json(LabelBody { status: "discarded", choice: None }).into_response(),
        Ok(Err(rejection)) => {
            let (code, error) = match rejection {
                Rejection::UnknownPair => (StatusCode::NOT_FOUND, "unknown_pair"),
                Rejection::AlreadyAnswered => (StatusCode::CONFLICT, "already_answered"),
                Rejection::NotServed => (StatusCode::CONFLICT, "not_served"),
            };
            (code, Json(ErrorBody { error: error.into() })).into_response()
        }
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(ErrorBody { error: e.to_string() })).into_response(),
    }
}

async fn get_metrics(State(handle): State<ServiceHandle>) -> Json<FeedbackMetrics> {
    Json(handle.metrics())
}

#[derive(Serialize)]
struct Instructions {
    env: String,
    text: String,
}

async fn get_instructions(State(handle): State<ServiceHandle>) -> Json<Instructions> {
    Json(Instructions { env: handle.env.to_string(), text: instructions(&handle.env) })
}

/// Environment named in a run directory's `config.toml`, if any.
pub fn env_of_run(run_dir: &Path) -> Option<String> {
    let text = std::fs::read_to_string(run_dir.join("config.toml")).ok()?;
    let table: toml::Table = text.parse().ok()?;
    table.get("env")?.as_str().map(str::to_string)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: &str, run_dir: PathBuf, config: ServiceConfig) -> std::io::Result<()> {
    let handle = spawn_for_run(&run_dir, config).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(handle)).await
}
