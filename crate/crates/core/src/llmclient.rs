//! Batch-inference client for text-generation endpoints.
//!
//! Wire protocol: `POST <endpoint>/v1/batch_complete` with
//! `{"request_id": str, "prompts": [str, ...]}` (plus an optional parallel
//! `"images"` array for multimodal captioners), answered by
//! `200 {"request_id": str, "completions": [str, ...]}`. 429 and 5xx are
//! retried with exponential backoff and full jitter; any other status is fatal.
//!
//! Refusal text is a valid completion here. Classifying it is the caller's job.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, Stream, StreamExt};
use rand::Rng;
use serde::{Deserialize, Serialize};
use url::Url;

pub const BATCH_COMPLETE_PATH: &str = "/v1/batch_complete";
pub const DEFAULT_MAX_BATCH: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRequest {
    pub request_id: String,
    pub prompts: Vec<String>,
    /// Image keys aligned with `prompts`, for captioning endpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<Vec<String>>,
}

impl BatchRequest {
    pub fn new(request_id: impl Into<String>, prompts: Vec<String>) -> Self {
        Self {
            request_id: request_id.into(),
            prompts,
            images: None,
        }
    }

    pub fn with_images(mut self, images: Vec<String>) -> Self {
        self.images = Some(images);
        self
    }

    pub fn validate(&self, max_batch: usize) -> Result<(), LlmError> {
        if self.prompts.is_empty() {
            return Err(LlmError::InvalidRequest("batch has no prompts".into()));
        }
        if self.prompts.len() > max_batch {
            return Err(LlmError::InvalidRequest(format!(
                "batch of {} exceeds max_batch {max_batch}",
                self.prompts.len()
            )));
        }
        if let Some(i) = self.prompts.iter().position(|p| p.is_empty()) {
            return Err(LlmError::InvalidRequest(format!("prompt {i} is empty")));
        }
        if let Some(images) = &self.images {
            if images.len() != self.prompts.len() {
                return Err(LlmError::InvalidRequest(format!(
                    "{} images for {} prompts",
                    images.len(),
                    self.prompts.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchResponse {
    pub request_id: String,
    pub completions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport {
        attempts: u32,
        last_status: Option<u16>,
        message: String,
    },
    #[error("endpoint returned non-retryable status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("batch covering inputs {}..{}: {source}", range.start, range.end)]
    Batch {
        range: Range<usize>,
        #[source]
        source: Box<LlmError>,
    },
}

impl LlmError {
    /// Strips a [`LlmError::Batch`] annotation.
    pub fn root(&self) -> &LlmError {
        match self {
            LlmError::Batch { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Retry and timeout settings for one logical batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff: Duration,
    pub max_backoff: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_backoff: Duration::from_millis(250),
            max_backoff: Duration::from_secs(4),
            timeout: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.max_attempts == 0 {
            return Err(LlmError::InvalidRequest("max_attempts must be >= 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(LlmError::InvalidRequest("timeout must be positive".into()));
        }
        Ok(())
    }

    /// Upper bound of the backoff window after `failed_attempts` failures.
    pub fn backoff_ceiling(&self, failed_attempts: u32) -> Duration {
        let shift = failed_attempts.saturating_sub(1).min(31);
        self.base_backoff
            .saturating_mul(1u32 << shift)
            .min(self.max_backoff)
    }

    /// Full jitter: uniform in `[0, backoff_ceiling]`.
    pub fn backoff<R: Rng + ?Sized>(&self, failed_attempts: u32, rng: &mut R) -> Duration {
        let ceiling = self.backoff_ceiling(failed_attempts);
        if ceiling.is_zero() {
            return Duration::ZERO;
        }
        Duration::from_nanos(rng.random_range(0..=ceiling.as_nanos() as u64))
    }
}

/// Counters shared by every clone of a client.
#[derive(Debug, Default)]
pub struct ClientStats {
    batches: AtomicU64,
    attempts: AtomicU64,
    retries: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ClientStatsSnapshot {
    pub batches: u64,
    pub attempts: u64,
    pub retries: u64,
}

impl ClientStats {
    pub fn snapshot(&self) -> ClientStatsSnapshot {
        ClientStatsSnapshot {
            batches: self.batches.load(Ordering::Relaxed),
            attempts: self.attempts.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
        }
    }
}

/// One prompt, optionally tied to an image key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptItem {
    pub prompt: String,
    pub image: Option<String>,
}

impl From<String> for PromptItem {
    fn from(prompt: String) -> Self {
        Self {
            prompt,
            image: None,
        }
    }
}

impl From<&str> for PromptItem {
    fn from(prompt: &str) -> Self {
        prompt.to_string().into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleOptions {
    pub batch_size: usize,
    pub workers: usize,
    /// Request ids are `<prefix>-<batch index>`.
    pub request_prefix: String,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            workers: 4,
            request_prefix: "batch".into(),
        }
    }
}

/// Result of one scheduled batch, yielded in input order.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub index: usize,
    /// Positions of this batch's prompts in the scheduled input.
    pub range: Range<usize>,
    pub result: Result<Vec<String>, LlmError>,
}

enum AttemptError {
    Retryable {
        status: Option<u16>,
        message: String,
    },
    Fatal(LlmError),
}

#[derive(Debug, Clone)]
pub struct LlmClient {
    http: reqwest::Client,
    policy: RetryPolicy,
    bearer: Option<String>,
    max_batch: usize,
    stats: Arc<ClientStats>,
}

impl LlmClient {
    pub fn new(policy: RetryPolicy) -> Result<Self, LlmError> {
        policy.validate()?;
        let http = reqwest::Client::builder()
            .build()
            .map_err(|e| LlmError::InvalidRequest(format!("building HTTP client: {e}")))?;
        Ok(Self {
            http,
            policy,
            bearer: None,
            max_batch: DEFAULT_MAX_BATCH,
            stats: Arc::default(),
        })
    }

    /// Sends `Authorization: Bearer <token>` with every request.
    pub fn with_bearer_token(mut self, token: impl Into<String>) -> Self {
        self.bearer = Some(token.into());
        self
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch.max(1);
        self
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    pub fn max_batch(&self) -> usize {
        self.max_batch
    }

    pub fn stats(&self) -> ClientStatsSnapshot {
        self.stats.snapshot()
    }

    /// Sends one batch, retrying transient failures per the client's policy.
    /// `completions[i]` answers `prompts[i]`.
    pub async fn complete_batch(
        &self,
        endpoint: &Url,
        req: &BatchRequest,
    ) -> Result<BatchResponse, LlmError> {
        req.validate(self.max_batch)?;
        let url = batch_url(endpoint);
        self.stats.batches.fetch_add(1, Ordering::Relaxed);

        let mut attempt = 0;
        loop {
            attempt += 1;
            self.stats.attempts.fetch_add(1, Ordering::Relaxed);
            match self.attempt(&url, req).await {
                Ok(resp) => return Ok(resp),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retryable { status, message }) => {
                    if attempt >= self.policy.max_attempts {
                        return Err(LlmError::Transport {
                            attempts: attempt,
                            last_status: status,
                            message,
                        });
                    }
                    let wait = self.policy.backoff(attempt, &mut rand::rng());
                    log::debug!(
                        "request {} attempt {attempt} failed ({message}); retrying in {wait:?}",
                        req.request_id
                    );
                    self.stats.retries.fetch_add(1, Ordering::Relaxed);
                    tokio::time::sleep(wait).await;
                }
            }
        }
    }

    async fn attempt(&self, url: &Url, req: &BatchRequest) -> Result<BatchResponse, AttemptError> {
        let mut builder = self
            .http
            .post(url.clone())
            .timeout(self.policy.timeout)
            .json(req);
        if let Some(token) = &self.bearer {
            builder = builder.bearer_auth(token);
        }
        let resp = builder.send().await.map_err(transport_error)?;
        let status = resp.status().as_u16();
        let body = resp.bytes().await.map_err(transport_error)?;
        if status == 429 || (500..600).contains(&status) {
            return Err(AttemptError::Retryable {
                status: Some(status),
                message: format!("HTTP {status}"),
            });
        }
        if status != 200 {
            return Err(AttemptError::Fatal(LlmError::Status {
                status,
                body: String::from_utf8_lossy(&body).into_owned(),
            }));
        }
        let parsed: BatchResponse = serde_json::from_slice(&body).map_err(|e| {
            AttemptError::Fatal(LlmError::Protocol(format!("malformed response body: {e}")))
        })?;
        if parsed.request_id != req.request_id {
            return Err(AttemptError::Fatal(LlmError::Protocol(format!(
                "request_id mismatch: sent {:?}, got {:?}",
                req.request_id, parsed.request_id
            ))));
        }
        if parsed.completions.len() != req.prompts.len() {
            return Err(AttemptError::Fatal(LlmError::Protocol(format!(
                "{} completions for {} prompts",
                parsed.completions.len(),
                req.prompts.len()
            ))));
        }
        Ok(parsed)
    }

    /// Splits `items` into batches of `opts.batch_size` and runs at most
    /// `opts.workers` of them at a time. Outcomes come back in input order
    /// whatever order the endpoint answers in.
    pub fn schedule_batches<'a>(
        &'a self,
        endpoint: &'a Url,
        items: Vec<PromptItem>,
        opts: &ScheduleOptions,
    ) -> Result<impl Stream<Item = BatchOutcome> + 'a, LlmError> {
        if opts.batch_size == 0 || opts.batch_size > self.max_batch {
            return Err(LlmError::InvalidRequest(format!(
                "batch_size must be in 1..={}, got {}",
                self.max_batch, opts.batch_size
            )));
        }
        if opts.workers == 0 {
            return Err(LlmError::InvalidRequest("workers must be >= 1".into()));
        }
        let batches: Vec<(usize, Range<usize>, BatchRequest)> =
            chunk_requests(items, opts.batch_size, &opts.request_prefix);
        Ok(stream::iter(batches)
            .map(move |(index, range, req)| async move {
                let result = self
                    .complete_batch(endpoint, &req)
                    .await
                    .map(|r| r.completions)
                    .map_err(|e| LlmError::Batch {
                        range: range.clone(),
                        source: Box::new(e),
                    });
                BatchOutcome {
                    index,
                    range,
                    result,
                }
            })
            .buffered(opts.workers))
    }

    /// Like [`LlmClient::schedule_batches`] but gathers every completion,
    /// stopping at the first failed batch.
    pub async fn schedule(
        &self,
        endpoint: &Url,
        items: Vec<PromptItem>,
        opts: &ScheduleOptions,
    ) -> Result<Vec<String>, LlmError> {
        let n = items.len();
        let mut out = Vec::with_capacity(n);
        let mut outcomes = std::pin::pin!(self.schedule_batches(endpoint, items, opts)?);
        while let Some(outcome) = outcomes.next().await {
            out.extend(outcome.result?);
        }
        Ok(out)
    }
}

fn chunk_requests(
    items: Vec<PromptItem>,
    batch_size: usize,
    prefix: &str,
) -> Vec<(usize, Range<usize>, BatchRequest)> {
    let mut batches = Vec::with_capacity(items.len().div_ceil(batch_size));
    let mut iter = items.into_iter().peekable();
    let mut start = 0;
    while iter.peek().is_some() {
        let chunk: Vec<PromptItem> = iter.by_ref().take(batch_size).collect();
        let index = batches.len();
        let range = start..start + chunk.len();
        start = range.end;
        let with_images = chunk.iter().any(|c| c.image.is_some());
        let mut prompts = Vec::with_capacity(chunk.len());
        let mut images = Vec::with_capacity(chunk.len());
        for item in chunk {
            prompts.push(item.prompt);
            images.push(item.image.unwrap_or_default());
        }
        let mut req = BatchRequest::new(format!("{prefix}-{index:06}"), prompts);
        if with_images {
            req = req.with_images(images);
        }
        batches.push((index, range, req));
    }
    batches
}

fn batch_url(endpoint: &Url) -> Url {
    let mut url = endpoint.clone();
    let path = format!(
        "{}{}",
        endpoint.path().trim_end_matches('/'),
        BATCH_COMPLETE_PATH
    );
    url.set_path(&path);
    url
}

fn transport_error(e: reqwest::Error) -> AttemptError {
    let status = e.status().map(|s| s.as_u16());
    let kind = if e.is_timeout() {
        "timeout"
    } else if e.is_connect() {
        "connect"
    } else {
        "transport"
    };
    AttemptError::Retryable {
        status,
        message: format!("{kind}: {e}"),
    }
}
