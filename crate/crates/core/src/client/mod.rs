//! Chat-completion endpoints behind a record/replay cache.
//!
//! [`ModelClient`] is the only way pipelines talk to models. Every response
//! is persisted in a [`ResponseCache`] keyed by a content hash of the request,
//! so a run recorded once can be replayed offline with identical results.

mod cache;
mod config;
mod openai;
mod scripted;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::text::{letter, parse_choice_letter};

pub use cache::{cache_key, CacheStats, ResponseCache};
pub use config::{ClientConfig, EndpointConfig};
pub use openai::{build_request_body, parse_response_body, OpenAiBackend};
pub use scripted::ScriptedBackend;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_uri: Option<String>,
}

impl Message {
    pub fn user(text: impl Into<String>) -> Self {
        Message { role: Role::User, text: text.into(), image_uri: None }
    }

    pub fn user_with_image(text: impl Into<String>, image_uri: impl Into<String>) -> Self {
        Message { role: Role::User, text: text.into(), image_uri: Some(image_uri.into()) }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Message { role: Role::System, text: text.into(), image_uri: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub endpoint_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub want_choice_distribution: bool,
    /// Number of independent completions requested (sampling fallback).
    #[serde(default = "one")]
    pub samples: u32,
}

fn one() -> u32 {
    1
}

impl ChatRequest {
    /// Greedy single-message text request.
    pub fn text(endpoint_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        ChatRequest {
            endpoint_id: endpoint_id.into(),
            messages: vec![Message::user(prompt)],
            temperature: 0.0,
            max_tokens: 1024,
            want_choice_distribution: false,
            samples: 1,
        }
    }

    pub fn with_image(endpoint_id: impl Into<String>, prompt: impl Into<String>, image_uri: impl Into<String>) -> Self {
        ChatRequest {
            messages: vec![Message::user_with_image(prompt, image_uri)],
            ..ChatRequest::text(endpoint_id, "")
        }
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be >= 1".into());
        }
        if self.samples == 0 {
            return Err("samples must be >= 1".into());
        }
        if self.messages.is_empty() {
            return Err("request has no messages".into());
        }
        Ok(())
    }

    /// Concatenated text of all user messages.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn image_uri(&self) -> Option<&str> {
        self.messages.iter().find_map(|m| m.image_uri.as_deref())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceProb {
    pub label: String,
    pub probability: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice_distribution: Option<Vec<ChoiceProb>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<String>,
    #[serde(default)]
    pub cached: bool,
    #[serde(default)]
    pub latency_ms: f64,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ChatResponse { text: text.into(), ..Default::default() }
    }

    pub fn with_distribution(labels_probs: &[(&str, f64)]) -> Self {
        ChatResponse {
            text: String::new(),
            choice_distribution: Some(
                labels_probs
                    .iter()
                    .map(|(l, p)| ChoiceProb { label: l.to_string(), probability: *p })
                    .collect(),
            ),
            ..Default::default()
        }
    }

    pub fn with_samples(samples: Vec<String>) -> Self {
        ChatResponse { text: samples.first().cloned().unwrap_or_default(), samples, ..Default::default() }
    }

    /// Drops invalid distributions and renormalizes valid ones to sum to 1.
    fn normalize(&mut self) {
        if let Some(dist) = &mut self.choice_distribution {
            let valid = dist.iter().all(|c| c.probability.is_finite() && c.probability >= 0.0);
            let total: f64 = dist.iter().map(|c| c.probability).sum();
            if !valid || total <= 0.0 {
                self.choice_distribution = None;
            } else {
                for c in dist.iter_mut() {
                    c.probability /= total;
                }
            }
        }
    }
}

/// Transport-level failure reported by a backend.
#[derive(Clone, Debug, Error)]
#[error("status {status:?}: {message}")]
pub struct BackendError {
    pub status: Option<u16>,
    pub message: String,
}

impl BackendError {
    pub fn new(status: Option<u16>, message: impl Into<String>) -> Self {
        BackendError { status, message: message.into() }
    }

    /// Transport failures, 408, 429 and 5xx are retried.
    pub fn retryable(&self) -> bool {
        match self.status {
            None => true,
            Some(s) => s == 408 || s == 429 || s >= 500,
        }
    }
}

/// Something that can answer a chat request.
pub trait ChatBackend: Send + Sync {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("endpoint {endpoint} failed after {attempts} attempt(s): {source}")]
    Endpoint {
        endpoint: String,
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("replay cache has no entry for endpoint {endpoint} (key {key})")]
    CacheMiss { endpoint: String, key: String },
    #[error("unknown endpoint {0:?}")]
    UnknownEndpoint(String),
    #[error("endpoint {0:?} has no backend configured")]
    NoBackend(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("choice distribution unavailable from {endpoint}: {reason}")]
    DistributionUnavailable { endpoint: String, reason: String },
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Endpoint { source, .. } => source.status,
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Serve hits from the cache, call the endpoint on misses and record.
    #[default]
    ReadWrite,
    /// Cache only; a miss is an error.
    ReplayOnly,
    /// Bypass the cache entirely.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointSpec {
    pub id: String,
    #[serde(default)]
    pub supports_token_scores: bool,
    #[serde(default)]
    pub requests_per_second: Option<f64>,
}

impl EndpointSpec {
    pub fn new(id: impl Into<String>) -> Self {
        EndpointSpec { id: id.into(), supports_token_scores: false, requests_per_second: None }
    }

    pub fn token_scores(mut self, yes: bool) -> Self {
        self.supports_token_scores = yes;
        self
    }
}

#[derive(Clone, Debug)]
pub struct ClientOptions {
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
    /// Completions drawn for the sampling fallback of [`ModelClient::choice_probs`].
    pub sampling_budget: u32,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            max_in_flight: 8,
            max_retries: 4,
            backoff_base: Duration::from_millis(500),
            backoff_cap: Duration::from_secs(30),
            sampling_budget: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionMethod {
    TokenScores,
    Sampling,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceDistribution {
    /// Probabilities in the order of the options passed in.
    pub probs: [f64; 5],
    pub method: DistributionMethod,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub cache: CacheStats,
    pub backend_calls: u64,
    pub token_score_distributions: u64,
    pub sampled_distributions: u64,
}

struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    fn new(per_second: f64) -> Option<Self> {
        (per_second.is_finite() && per_second > 0.0).then(|| RateLimiter {
            interval: Duration::from_secs_f64(1.0 / per_second),
            next: Mutex::new(Instant::now()),
        })
    }

    fn wait(&self) {
        let delay = {
            let mut next = self.next.lock().unwrap_or_else(|p| p.into_inner());
            let now = Instant::now();
            if *next > now {
                let d = *next - now;
                *next += self.interval;
                d
            } else {
                *next = now + self.interval;
                Duration::ZERO
            }
        };
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
    }
}

struct Endpoint {
    spec: EndpointSpec,
    backend: Option<Arc<dyn ChatBackend>>,
    limiter: Option<RateLimiter>,
}

/// Thread-safe handle over all configured endpoints.
pub struct ModelClient {
    endpoints: HashMap<String, Endpoint>,
    cache: Option<ResponseCache>,
    mode: CacheMode,
    options: ClientOptions,
    pool: rayon::ThreadPool,
    backend_calls: AtomicU64,
    token_dists: AtomicU64,
    sampled_dists: AtomicU64,
}

impl fmt::Debug for ModelClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut ids: Vec<_> = self.endpoints.keys().collect();
        ids.sort();
        f.debug_struct("ModelClient")
            .field("endpoints", &ids)
            .field("mode", &self.mode)
            .field("cache", &self.cache.as_ref().map(|c| c.root().to_path_buf()))
            .finish()
    }
}

#[derive(Default)]
pub struct ModelClientBuilder {
    endpoints: Vec<(EndpointSpec, Option<Arc<dyn ChatBackend>>)>,
    cache: Option<ResponseCache>,
    mode: CacheMode,
    options: ClientOptions,
}

impl ModelClientBuilder {
    pub fn endpoint(mut self, spec: EndpointSpec, backend: Option<Arc<dyn ChatBackend>>) -> Self {
        self.endpoints.push((spec, backend));
        self
    }

    pub fn cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn mode(mut self, mode: CacheMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn options(mut self, options: ClientOptions) -> Self {
        self.options = options;
        self
    }

    pub fn build(self) -> Result<ModelClient, ClientError> {
        if self.mode == CacheMode::ReplayOnly && self.cache.is_none() {
            return Err(ClientError::InvalidRequest("replay mode requires a cache directory".into()));
        }
        let threads = self.options.max_in_flight.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .thread_name(|i| format!("finer-client-{i}"))
            .build()
            .map_err(|e| ClientError::InvalidRequest(e.to_string()))?;
        let mut endpoints = HashMap::new();
        for (spec, backend) in self.endpoints {
            let limiter = spec.requests_per_second.and_then(RateLimiter::new);
            endpoints.insert(spec.id.clone(), Endpoint { spec, backend, limiter });
        }
        Ok(ModelClient {
            endpoints,
            cache: self.cache,
            mode: self.mode,
            options: self.options,
            pool,
            backend_calls: AtomicU64::new(0),
            token_dists: AtomicU64::new(0),
            sampled_dists: AtomicU64::new(0),
        })
    }
}

impl ModelClient {
    pub fn builder() -> ModelClientBuilder {
        ModelClientBuilder::default()
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn options(&self) -> &ClientOptions {
        &self.options
    }

    pub fn endpoint_spec(&self, id: &str) -> Result<&EndpointSpec, ClientError> {
        self.endpoints
            .get(id)
            .map(|e| &e.spec)
            .ok_or_else(|| ClientError::UnknownEndpoint(id.to_string()))
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            cache: self.cache.as_ref().map(|c| c.stats()).unwrap_or_default(),
            backend_calls: self.backend_calls.load(Ordering::Relaxed),
            token_score_distributions: self.token_dists.load(Ordering::Relaxed),
            sampled_distributions: self.sampled_dists.load(Ordering::Relaxed),
        }
    }

    /// Runs `op` inside the client's bounded worker pool.
    pub fn install<R: Send>(&self, op: impl FnOnce() -> R + Send) -> R {
        self.pool.install(op)
    }

    /// Maps `f` over `items` concurrently, returning results in input order.
    pub fn map_ordered<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        self.pool.install(|| items.par_iter().map(f).collect())
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ClientError> {
        req.validate().map_err(ClientError::InvalidRequest)?;
        let endpoint = self
            .endpoints
            .get(&req.endpoint_id)
            .ok_or_else(|| ClientError::UnknownEndpoint(req.endpoint_id.clone()))?;

        if self.mode != CacheMode::Off {
            if let Some(cache) = &self.cache {
                if let Some(hit) = cache.get(req) {
                    return Ok(hit);
                }
            }
        }
        if self.mode == CacheMode::ReplayOnly {
            return Err(ClientError::CacheMiss { endpoint: req.endpoint_id.clone(), key: cache_key(req) });
        }
        let backend = endpoint
            .backend
            .as_ref()
            .ok_or_else(|| ClientError::NoBackend(req.endpoint_id.clone()))?;

        let mut attempt = 0u32;
        let mut response = loop {
            if let Some(l) = &endpoint.limiter {
                l.wait();
            }
            let started = Instant::now();
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            match backend.send(req) {
                Ok(mut resp) => {
                    if resp.latency_ms == 0.0 {
                        resp.latency_ms = (started.elapsed().as_secs_f64() * 1e6).round() / 1e3;
                    }
                    break resp;
                }
                Err(err) if err.retryable() && attempt < self.options.max_retries => {
                    let delay = self
                        .options
                        .backoff_base
                        .saturating_mul(1u32 << attempt.min(16))
                        .min(self.options.backoff_cap);
                    warn!(endpoint = %req.endpoint_id, attempt, ?delay, error = %err, "retrying request");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(source) => {
                    return Err(ClientError::Endpoint {
                        endpoint: req.endpoint_id.clone(),
                        attempts: attempt + 1,
                        source,
                    })
                }
            }
        };
        response.normalize();
        response.cached = false;
        if self.mode == CacheMode::ReadWrite {
            if let Some(cache) = &self.cache {
                cache.put(req, &response)?;
            }
        }
        Ok(response)
    }

    /// Distribution over five labelled options for an image question.
    ///
    /// Uses first-answer-token scores when the endpoint exposes them and
    /// falls back to letter voting over `sampling_budget` completions at
    /// temperature 1 otherwise.
    pub fn choice_probs(
        &self,
        endpoint_id: &str,
        image_uri: &str,
        question: &str,
        options: &[String; 5],
    ) -> Result<ChoiceDistribution, ClientError> {
        let spec = self.endpoint_spec(endpoint_id)?;
        let prompt = choice_prompt(question, options);
        if spec.supports_token_scores {
            let req = ChatRequest {
                want_choice_distribution: true,
                ..ChatRequest::with_image(endpoint_id, prompt, image_uri).max_tokens(1)
            };
            let resp = self.complete(&req)?;
            let dist = resp.choice_distribution.unwrap_or_default();
            let mut probs = [0.0; 5];
            for c in &dist {
                if let Some(i) = label_index(&c.label) {
                    probs[i] += c.probability;
                }
            }
            let probs = renormalize(probs).ok_or_else(|| ClientError::DistributionUnavailable {
                endpoint: endpoint_id.to_string(),
                reason: "no option letter among the scored tokens".into(),
            })?;
            self.token_dists.fetch_add(1, Ordering::Relaxed);
            debug!(endpoint = endpoint_id, method = "token_scores", "choice distribution");
            Ok(ChoiceDistribution { probs, method: DistributionMethod::TokenScores })
        } else {
            let budget = self.options.sampling_budget;
            if budget == 0 {
                return Err(ClientError::DistributionUnavailable {
                    endpoint: endpoint_id.to_string(),
                    reason: "no token scores and a zero sampling budget".into(),
                });
            }
            let req = ChatRequest {
                temperature: 1.0,
                samples: budget,
                ..ChatRequest::with_image(endpoint_id, prompt, image_uri).max_tokens(3)
            };
            let resp = self.complete(&req)?;
            let mut counts = [0.0; 5];
            let draws = if resp.samples.is_empty() { std::slice::from_ref(&resp.text) } else { &resp.samples[..] };
            for s in draws {
                if let Some(i) = parse_choice_letter(s) {
                    counts[i] += 1.0;
                }
            }
            let probs = renormalize(counts).ok_or_else(|| ClientError::DistributionUnavailable {
                endpoint: endpoint_id.to_string(),
                reason: "no parseable letter among sampled answers".into(),
            })?;
            self.sampled_dists.fetch_add(1, Ordering::Relaxed);
            debug!(endpoint = endpoint_id, method = "sampling", draws = draws.len(), "choice distribution");
            Ok(ChoiceDistribution { probs, method: DistributionMethod::Sampling })
        }
    }
}

fn label_index(label: &str) -> Option<usize> {
    let t = label.trim().trim_matches(|c: char| !c.is_alphanumeric());
    let mut chars = t.chars();
    let c = chars.next()?.to_ascii_uppercase();
    if chars.next().is_some() {
        return None;
    }
    crate::text::LETTERS.iter().position(|&l| l == c)
}

fn renormalize(p: [f64; 5]) -> Option<[f64; 5]> {
    let total: f64 = p.iter().sum();
    (total > 0.0 && total.is_finite()).then(|| p.map(|x| x / total))
}

/// Prompt used for discriminator queries: question, lettered options and a
/// letter-only instruction.
pub fn choice_prompt(question: &str, options: &[String; 5]) -> String {
    format!("{question}\n{}\nAnswer with the letter of the correct option.", render_options(options))
}

/// `A. first\nB. second\n...`
pub fn render_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}. {}", letter(i), o))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Recovers the lettered options from a prompt built by [`render_options`].
/// Used by scripted endpoints.
pub fn parse_rendered_options(prompt: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in prompt.lines() {
        let want = letter(out.len().min(4));
        if out.len() < 5 {
            if let Some(rest) = line.strip_prefix(&format!("{want}. ")) {
                out.push(rest.to_string());
            }
        }
    }
    out
}
