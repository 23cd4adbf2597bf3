//! Deterministic in-process server speaking the batch-completion protocol.
//!
//! Behaviour is driven by a [`MockScript`]: an ordered list of rules, each
//! matching prompts (or image keys) by substring. The first live rule that
//! matches a prompt decides its completion; prompts matching no rule are
//! echoed back. Status rules fail the whole request. Every request is logged
//! with its timing so tests can assert attempt counts and concurrency.
//!
//! ```json
//! {"rules": [
//!    {"match": "forbidden", "respond": "refusal"},
//!    {"match": "flaky", "respond": {"status": 503}, "times": 2},
//!    {"match": "", "respond": {"template": "caption of {image}"}, "delay_ms": 5}
//!  ],
//!  "jitter_ms": 0, "seed": 0}
//! ```

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use url::Url;

use crate::llmclient::{BatchRequest, BatchResponse, BATCH_COMPLETE_PATH};

pub const REFUSAL_TEXT: &str = "I am sorry that I cannot comply.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Respond {
    /// Return the prompt unchanged.
    Echo,
    /// Return [`REFUSAL_TEXT`].
    Refusal,
    Text(String),
    /// Text with `{prompt}` and `{image}` substituted.
    Template(String),
    /// Fail the whole request with this HTTP status.
    Status(u16),
    /// Drop this prompt's completion so the response is one short.
    Omit,
    /// Answer 200 with a body that is not JSON.
    Garbage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    /// Substring of the prompt or image key; empty matches everything.
    #[serde(rename = "match", default)]
    pub pattern: String,
    pub respond: Respond,
    #[serde(default)]
    pub delay_ms: u64,
    /// Number of times the rule may fire; unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<u32>,
}

impl MockRule {
    pub fn new(pattern: impl Into<String>, respond: Respond) -> Self {
        Self {
            pattern: pattern.into(),
            respond,
            delay_ms: 0,
            times: None,
        }
    }

    pub fn times(mut self, n: u32) -> Self {
        self.times = Some(n);
        self
    }

    pub fn delay_ms(mut self, ms: u64) -> Self {
        self.delay_ms = ms;
        self
    }

    fn matches(&self, prompt: &str, image: Option<&str>) -> bool {
        prompt.contains(&self.pattern) || image.is_some_and(|i| i.contains(&self.pattern))
    }

    fn is_request_level(&self) -> bool {
        matches!(self.respond, Respond::Status(_) | Respond::Garbage)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Extra uniform delay in `[0, jitter_ms]` per request.
    #[serde(default)]
    pub jitter_ms: u64,
    /// Seed for the jitter stream.
    #[serde(default)]
    pub seed: u64,
}

impl MockScript {
    pub fn echo() -> Self {
        Self::default()
    }

    pub fn with_rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn with_jitter(mut self, jitter_ms: u64, seed: u64) -> Self {
        self.jitter_ms = jitter_ms;
        self.seed = seed;
        self
    }

    pub fn from_json(text: &str) -> Result<Self, MockError> {
        serde_json::from_str(text).map_err(|e| MockError::Script(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, MockError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| MockError::Script(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MockError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("bad mock script: {0}")]
    Script(String),
}

/// One request as seen by the server.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoggedRequest {
    /// Arrival order, starting at 0.
    pub seq: usize,
    pub request_id: String,
    pub prompts: Vec<String>,
    pub status: u16,
    /// Offsets from server start.
    pub started: Duration,
    pub finished: Duration,
    /// Requests being handled when this one arrived, itself included.
    pub in_flight_at_start: usize,
}

impl LoggedRequest {
    pub fn batch_size(&self) -> usize {
        self.prompts.len()
    }
}

/// Largest number of logged requests whose `[started, finished)` intervals
/// overlap.
pub fn max_overlap(log: &[LoggedRequest]) -> usize {
    let mut events: Vec<(Duration, i32)> = log
        .iter()
        .flat_map(|r| [(r.started, 1), (r.finished, -1)])
        .collect();
    // ends sort before starts at equal instants
    events.sort();
    let mut cur = 0i32;
    let mut best = 0i32;
    for (_, d) in events {
        cur += d;
        best = best.max(cur);
    }
    best as usize
}

struct Rules {
    rules: Vec<MockRule>,
    remaining: Vec<Option<u32>>,
    jitter: ChaCha8Rng,
}

struct Shared {
    script: MockScript,
    rules: Mutex<Rules>,
    log: Mutex<Vec<LoggedRequest>>,
    seq: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    epoch: Instant,
}

enum Plan {
    Fail(u16),
    Garbage,
    Complete(Vec<Option<String>>),
}

impl Shared {
    /// Picks a rule per prompt and consumes rule budgets.
    fn plan(&self, req: &BatchRequest) -> (Plan, Duration) {
        let mut state = self.rules.lock().unwrap();
        let image_at = |i: usize| {
            req.images
                .as_ref()
                .and_then(|v| v.get(i))
                .map(String::as_str)
        };
        let fired: Vec<Option<usize>> = req
            .prompts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                state.rules.iter().enumerate().position(|(r, rule)| {
                    state.remaining[r] != Some(0) && rule.matches(p, image_at(i))
                })
            })
            .collect();

        let mut delay = fired
            .iter()
            .flatten()
            .map(|&r| state.rules[r].delay_ms)
            .max()
            .unwrap_or(0);
        if self.script.jitter_ms > 0 {
            delay += state.jitter.random_range(0..=self.script.jitter_ms);
        }
        let delay = Duration::from_millis(delay);

        let consume = |state: &mut Rules, r: usize| {
            if let Some(n) = state.remaining[r].as_mut() {
                *n -= 1;
            }
        };

        if let Some(r) = fired
            .iter()
            .flatten()
            .copied()
            .find(|&r| state.rules[r].is_request_level())
        {
            consume(&mut state, r);
            let plan = match state.rules[r].respond {
                Respond::Status(code) => Plan::Fail(code),
                _ => Plan::Garbage,
            };
            return (plan, delay);
        }

        let mut out = Vec::with_capacity(req.prompts.len());
        for (i, (prompt, rule)) in req.prompts.iter().zip(&fired).enumerate() {
            let completion = match rule {
                None => Some(prompt.clone()),
                Some(r) => {
                    let r = *r;
                    consume(&mut state, r);
                    match &state.rules[r].respond {
                        Respond::Echo => Some(prompt.clone()),
                        Respond::Refusal => Some(REFUSAL_TEXT.to_string()),
                        Respond::Text(t) => Some(t.clone()),
                        Respond::Template(t) => Some(
                            t.replace("{prompt}", prompt)
                                .replace("{image}", image_at(i).unwrap_or("")),
                        ),
                        Respond::Omit => None,
                        Respond::Status(_) | Respond::Garbage => unreachable!(),
                    }
                }
            };
            out.push(completion);
        }
        (Plan::Complete(out), delay)
    }
}

async fn handle(State(shared): State<Arc<Shared>>, body: Bytes) -> Response {
    let started = shared.epoch.elapsed();
    let seq = shared.seq.fetch_add(1, Ordering::SeqCst);
    let in_flight = shared.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    shared.max_in_flight.fetch_max(in_flight, Ordering::SeqCst);

    let (status, request_id, prompts, response) =
        match serde_json::from_slice::<BatchRequest>(&body) {
            Err(e) => (
                400,
                String::new(),
                Vec::new(),
                (StatusCode::BAD_REQUEST, format!("bad request: {e}")).into_response(),
            ),
            Ok(req) => {
                let (plan, delay) = shared.plan(&req);
                if !delay.is_zero() {
                    tokio::time::sleep(delay).await;
                }
                let (status, response) = match plan {
                    Plan::Fail(code) => {
                        let code =
                            StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
                        (code.as_u16(), (code, "scripted failure").into_response())
                    }
                    Plan::Garbage => (200, (StatusCode::OK, "{not json").into_response()),
                    Plan::Complete(completions) => {
                        let body = BatchResponse {
                            request_id: req.request_id.clone(),
                            completions: completions.into_iter().flatten().collect(),
                        };
                        (200, axum::Json(body).into_response())
                    }
                };
                (status, req.request_id, req.prompts, response)
            }
        };

    shared.in_flight.fetch_sub(1, Ordering::SeqCst);
    let entry = LoggedRequest {
        seq,
        request_id,
        prompts,
        status,
        started,
        finished: shared.epoch.elapsed(),
        in_flight_at_start: in_flight,
    };
    shared.log.lock().unwrap().push(entry);
    response
}

/// Running mock server. Dropping the handle stops accepting connections.
pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `127.0.0.1:port` (0 picks a free port) and starts serving on the
    /// current tokio runtime.
    pub async fn serve(script: MockScript, port: u16) -> Result<Self, MockError> {
        Self::serve_on(script, SocketAddr::from(([127, 0, 0, 1], port))).await
    }

    pub async fn serve_on(script: MockScript, addr: SocketAddr) -> Result<Self, MockError> {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|source| MockError::Bind { addr, source })?;
        let addr = listener
            .local_addr()
            .map_err(|source| MockError::Bind { addr, source })?;
        let rules = Rules {
            remaining: script.rules.iter().map(|r| r.times).collect(),
            rules: script.rules.clone(),
            jitter: ChaCha8Rng::seed_from_u64(script.seed),
        };
        let shared = Arc::new(Shared {
            script,
            rules: Mutex::new(rules),
            log: Mutex::new(Vec::new()),
            seq: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            epoch: Instant::now(),
        });
        let app = Router::new()
            .route(BATCH_COMPLETE_PATH, post(handle))
            .with_state(shared.clone());
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            let server = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = server.await {
                log::error!("mock server stopped: {e}");
            }
        });
        log::info!("mock LLM listening on {addr}");
        Ok(Self {
            addr,
            shared,
            shutdown: Some(tx),
            task: Some(task),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> Url {
        Url::parse(&format!("http://{}", self.addr)).expect("socket address is a valid URL")
    }

    /// Snapshot of the request log in arrival order.
    pub fn log(&self) -> Vec<LoggedRequest> {
        let mut log = self.shared.log.lock().unwrap().clone();
        log.sort_by_key(|r| r.seq);
        log
    }

    pub fn request_count(&self) -> usize {
        self.shared.log.lock().unwrap().len()
    }

    /// Number of logged requests carrying `request_id`.
    pub fn attempts_for(&self, request_id: &str) -> usize {
        self.shared
            .log
            .lock()
            .unwrap()
            .iter()
            .filter(|r| r.request_id == request_id)
            .count()
    }

    /// Highest number of simultaneously handled requests.
    pub fn max_in_flight(&self) -> usize {
        self.shared.max_in_flight.load(Ordering::SeqCst)
    }

    /// Stops accepting connections and waits for in-flight requests to finish.
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_json_forms() {
        let s = MockScript::from_json(
            r#"{"rules":[
                {"match":"forbidden","respond":"refusal"},
                {"match":"x","respond":{"status":503},"times":2},
                {"respond":{"template":"seen {image}"},"delay_ms":3}
            ],"jitter_ms":4,"seed":9}"#,
        )
        .unwrap();
        assert_eq!(s.rules.len(), 3);
        assert_eq!(s.rules[0].respond, Respond::Refusal);
        assert_eq!(s.rules[1].respond, Respond::Status(503));
        assert_eq!(s.rules[1].times, Some(2));
        assert_eq!(s.rules[2].pattern, "");
        assert_eq!(s.jitter_ms, 4);
        assert!(MockScript::from_json(r#"{"rulez":[]}"#).is_err());
    }

    #[test]
    fn overlap_counts_concurrent_intervals() {
        let mk = |s: u64, f: u64| LoggedRequest {
            seq: 0,
            request_id: String::new(),
            prompts: vec![],
            status: 200,
            started: Duration::from_millis(s),
            finished: Duration::from_millis(f),
            in_flight_at_start: 1,
        };
        assert_eq!(max_overlap(&[]), 0);
        assert_eq!(max_overlap(&[mk(0, 10), mk(10, 20)]), 1);
        assert_eq!(max_overlap(&[mk(0, 10), mk(5, 20), mk(6, 7)]), 3);
    }

    #[test]
    fn rules_fire_in_order_and_budgets_run_out() {
        let script = MockScript::echo()
            .with_rule(MockRule::new("flaky", Respond::Status(503)).times(2))
            .with_rule(MockRule::new("forbidden", Respond::Refusal))
            .with_rule(MockRule::new(
                "cap",
                Respond::Template("<{prompt}|{image}>".into()),
            ));
        let shared = Shared {
            rules: Mutex::new(Rules {
                remaining: script.rules.iter().map(|r| r.times).collect(),
                rules: script.rules.clone(),
                jitter: ChaCha8Rng::seed_from_u64(0),
            }),
            script,
            log: Mutex::new(Vec::new()),
            seq: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            epoch: Instant::now(),
        };
        let req = BatchRequest::new("r", vec!["flaky one".into(), "forbidden".into()]);
        for _ in 0..2 {
            assert!(matches!(shared.plan(&req).0, Plan::Fail(503)));
        }
        match shared.plan(&req).0 {
            Plan::Complete(c) => assert_eq!(
                c,
                vec![
                    Some("flaky one".to_string()),
                    Some(REFUSAL_TEXT.to_string())
                ]
            ),
            _ => panic!("expected completions"),
        }
        let req = BatchRequest::new("r", vec!["cap".into()]).with_images(vec!["img7".into()]);
        match shared.plan(&req).0 {
            Plan::Complete(c) => assert_eq!(c, vec![Some("<cap|img7>".to_string())]),
            _ => panic!("expected completions"),
        }
    }
}
