//! Uniform interface to teacher/judge/student chat models: a single
//! chat-completions wire shape, retries with exponential backoff, a
//! fingerprint-keyed disk cache, a request-count budget, bounded batch
//! concurrency, and a deterministic scripted backend for offline runs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;
use thiserror::Error;

/// Counting semaphore bounding in-flight network requests.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore lock");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore wait");
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.semaphore.permits.lock().expect("semaphore lock");
        *permits += 1;
        self.semaphore.available.notify_one();
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("request budget of {limit} exhausted")]
    BudgetExceeded { limit: u64 },
    #[error("cache i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A single-turn chat completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_tag: String,
    pub system: Option<String>,
    pub user: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub seed_hint: Option<u64>,
}

impl ChatRequest {
    pub fn new(model_tag: impl Into<String>, user: impl Into<String>) -> Self {
        ChatRequest {
            model_tag: model_tag.into(),
            system: None,
            user: user.into(),
            temperature: 0.7,
            top_p: 1.0,
            max_tokens: 2048,
            seed_hint: None,
        }
    }

    pub fn with_sampling(mut self, temperature: f64, top_p: f64) -> Self {
        self.temperature = temperature;
        self.top_p = top_p;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed_hint = Some(seed);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub request_fingerprint: String,
}

fn default_max_tokens_ceiling() -> u32 {
    4096
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub endpoint_url: String,
    pub api_key_env_var: String,
    pub max_concurrency: usize,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub cache_dir: PathBuf,
    /// Hard ceiling on per-request max_tokens.
    #[serde(default = "default_max_tokens_ceiling")]
    pub max_tokens_ceiling: u32,
    /// Optional cap on the number of network-issuing requests.
    #[serde(default)]
    pub request_budget: Option<u64>,
    /// Disables the response cache (fresh sampling every call).
    #[serde(default)]
    pub no_cache: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            endpoint_url: "http://localhost:8000/v1/chat/completions".to_string(),
            api_key_env_var: "LEMMA_FORGE_API_KEY".to_string(),
            max_concurrency: 4,
            max_retries: 3,
            backoff_base_ms: 250,
            cache_dir: PathBuf::from(".lemma-cache"),
            max_tokens_ceiling: default_max_tokens_ceiling(),
            request_budget: None,
            no_cache: false,
        }
    }
}

/// Canonical fingerprint of a request: a SHA-256 over the fields that define
/// the completion (model_tag, system, user, temperature, top_p, max_tokens).
/// Seed hints and anything timing-related never affect it.
pub fn request_fingerprint(req: &ChatRequest) -> String {
    #[derive(Serialize)]
    struct Canonical<'a> {
        model_tag: &'a str,
        system: &'a Option<String>,
        user: &'a str,
        temperature: f64,
        top_p: f64,
        max_tokens: u32,
    }
    let canonical = Canonical {
        model_tag: &req.model_tag,
        system: &req.system,
        user: &req.user,
        temperature: req.temperature,
        top_p: req.top_p,
        max_tokens: req.max_tokens,
    };
    let bytes = serde_json::to_vec(&canonical).expect("canonical request serializes");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    format!("{:x}", hasher.finalize())
}

/// What a backend returns on success.
#[derive(Debug, Clone)]
pub struct BackendReply {
    pub text: String,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Error)]
pub enum BackendError {
    /// Worth retrying (timeouts, 429, 5xx).
    #[error("{0}")]
    Transient(String),
    #[error("{0}")]
    Auth(String),
    /// Not worth retrying (malformed request, 4xx).
    #[error("{0}")]
    Fatal(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<BackendReply, BackendError>;
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

/// Speaks the ubiquitous JSON chat-completions shape: a messages array in,
/// `choices[0].message.content` out.
pub struct HttpBackend {
    endpoint_url: String,
    api_key_env_var: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(cfg: &GatewayConfig) -> Self {
        HttpBackend {
            endpoint_url: cfg.endpoint_url.clone(),
            api_key_env_var: cfg.api_key_env_var.clone(),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(120))
                .build(),
        }
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> Result<BackendReply, BackendError> {
        let api_key = std::env::var(&self.api_key_env_var).map_err(|_| {
            BackendError::Auth(format!(
                "environment variable {} is not set",
                self.api_key_env_var
            ))
        })?;

        let mut messages = Vec::new();
        if let Some(system) = &req.system {
            messages.push(serde_json::json!({"role": "system", "content": system}));
        }
        messages.push(serde_json::json!({"role": "user", "content": req.user}));
        let mut payload = serde_json::json!({
            "model": req.model_tag,
            "messages": messages,
            "temperature": req.temperature,
            "top_p": req.top_p,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed_hint {
            payload["seed"] = serde_json::json!(seed);
        }

        let response = self
            .agent
            .post(&self.endpoint_url)
            .set("Authorization", &format!("Bearer {api_key}"))
            .set("Content-Type", "application/json")
            .send_json(payload);

        let body: serde_json::Value = match response {
            Ok(resp) => resp
                .into_json()
                .map_err(|e| BackendError::Fatal(format!("invalid response body: {e}")))?,
            Err(ureq::Error::Status(code, resp)) => {
                let detail = resp.into_string().unwrap_or_default();
                let message = format!("HTTP {code}: {detail}");
                return Err(match code {
                    401 | 403 => BackendError::Auth(message),
                    408 | 429 | 500..=599 => BackendError::Transient(message),
                    _ => BackendError::Fatal(message),
                });
            }
            Err(ureq::Error::Transport(t)) => {
                return Err(BackendError::Transient(t.to_string()));
            }
        };

        let text = body["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::Fatal("response missing choices[0].message.content".into()))?
            .to_string();
        let finish_reason = match body["choices"][0]["finish_reason"].as_str() {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        Ok(BackendReply {
            text,
            finish_reason,
        })
    }
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

/// One scripted fixture entry: any request whose user prompt contains
/// `match_substring` is answered with `response_text`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub match_substring: String,
    pub response_text: String,
}

/// Deterministic fixture-backed stand-in for a hosted model.
///
/// Lookup keeps the entries with the longest matching substring (the most
/// specific ones) and rotates among them by `seed_hint`, so repeated
/// sampling of an identical prompt can yield distinct scripted responses.
pub struct ScriptedTeacher {
    entries: Vec<ScriptEntry>,
}

impl ScriptedTeacher {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        ScriptedTeacher { entries }
    }

    pub fn from_path(path: &Path) -> Result<Self, GatewayError> {
        let data = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in data.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line).map_err(|e| {
                GatewayError::InvalidRequest(format!(
                    "fixture {} line {}: {e}",
                    path.display(),
                    i + 1
                ))
            })?;
            entries.push(entry);
        }
        Ok(ScriptedTeacher { entries })
    }
}

impl ChatBackend for ScriptedTeacher {
    fn complete(&self, req: &ChatRequest) -> Result<BackendReply, BackendError> {
        let matches: Vec<&ScriptEntry> = self
            .entries
            .iter()
            .filter(|e| req.user.contains(&e.match_substring))
            .collect();
        if matches.is_empty() {
            return Err(BackendError::Fatal(format!(
                "no fixture entry matches request (user prompt head: {:?})",
                req.user.chars().take(80).collect::<String>()
            )));
        }
        let best_len = matches
            .iter()
            .map(|e| e.match_substring.len())
            .max()
            .unwrap_or(0);
        let best: Vec<&ScriptEntry> = matches
            .into_iter()
            .filter(|e| e.match_substring.len() == best_len)
            .collect();
        let idx = req.seed_hint.unwrap_or(0) as usize % best.len();
        Ok(BackendReply {
            text: best[idx].response_text.clone(),
            finish_reason: FinishReason::Stop,
        })
    }
}

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    cfg: GatewayConfig,
    issued: AtomicU64,
    in_flight: Semaphore,
}

impl Gateway {
    pub fn with_backend(cfg: GatewayConfig, backend: Arc<dyn ChatBackend>) -> Self {
        let in_flight = Semaphore::new(cfg.max_concurrency);
        Gateway {
            backend,
            cfg,
            issued: AtomicU64::new(0),
            in_flight,
        }
    }

    pub fn http(cfg: GatewayConfig) -> Self {
        let backend = Arc::new(HttpBackend::new(&cfg));
        Self::with_backend(cfg, backend)
    }

    pub fn scripted(cfg: GatewayConfig, fixture_path: &Path) -> Result<Self, GatewayError> {
        let backend = Arc::new(ScriptedTeacher::from_path(fixture_path)?);
        Ok(Self::with_backend(cfg, backend))
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    /// Number of requests that reached the backend (cache hits excluded).
    pub fn network_requests(&self) -> u64 {
        self.issued.load(Ordering::SeqCst)
    }

    fn cache_path(&self, req: &ChatRequest, fingerprint: &str) -> PathBuf {
        let name = match req.seed_hint {
            Some(seed) => format!("{fingerprint}-s{seed}.json"),
            None => format!("{fingerprint}.json"),
        };
        self.cfg.cache_dir.join(name)
    }

    fn read_cache(&self, path: &Path) -> Option<ChatResponse> {
        let data = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&data).ok()
    }

    fn write_cache(&self, path: &Path, response: &ChatResponse) -> Result<(), GatewayError> {
        std::fs::create_dir_all(&self.cfg.cache_dir)?;
        // Unique temp name: concurrent writers of the same fingerprint must
        // not race on one temp file (payloads are identical, so
        // last-write-wins on the final path is harmless).
        static WRITE_SEQ: AtomicU64 = AtomicU64::new(0);
        let seq = WRITE_SEQ.fetch_add(1, Ordering::Relaxed);
        let tmp = path.with_extension(format!("tmp{seq}"));
        let body = serde_json::to_string(response).expect("response serializes");
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Completes one request: cache lookup, then retried backend calls with
    /// exponential backoff, then cache write-through.
    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if req.user.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("user prompt is empty".into()));
        }
        if req.max_tokens == 0 || req.max_tokens > self.cfg.max_tokens_ceiling {
            return Err(GatewayError::InvalidRequest(format!(
                "max_tokens {} outside 1..={}",
                req.max_tokens, self.cfg.max_tokens_ceiling
            )));
        }
        if req.temperature.is_nan() || req.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(
                "temperature must be >= 0".into(),
            ));
        }
        if !(req.top_p > 0.0 && req.top_p <= 1.0) {
            return Err(GatewayError::InvalidRequest("top_p must be in (0,1]".into()));
        }

        let fingerprint = request_fingerprint(req);
        let cache_path = self.cache_path(req, &fingerprint);
        if !self.cfg.no_cache {
            if let Some(hit) = self.read_cache(&cache_path) {
                return Ok(hit);
            }
        }

        if let Some(limit) = self.cfg.request_budget {
            let prior = self.issued.fetch_add(1, Ordering::SeqCst);
            if prior >= limit {
                // Undo the reservation so the counter stays an honest count
                // of requests that actually went out.
                self.issued.fetch_sub(1, Ordering::SeqCst);
                return Err(GatewayError::BudgetExceeded { limit });
            }
        } else {
            self.issued.fetch_add(1, Ordering::SeqCst);
        }

        let mut attempt = 0u32;
        let reply = loop {
            let result = {
                let _permit = self.in_flight.acquire();
                self.backend.complete(req)
            };
            match result {
                Ok(reply) => break reply,
                Err(BackendError::Auth(m)) => return Err(GatewayError::Auth(m)),
                Err(BackendError::Fatal(m)) => {
                    return Err(GatewayError::Transport {
                        message: m,
                        attempts: attempt + 1,
                    })
                }
                Err(BackendError::Transient(m)) => {
                    if attempt >= self.cfg.max_retries {
                        return Err(GatewayError::Transport {
                            message: m,
                            attempts: attempt + 1,
                        });
                    }
                    let delay = self.cfg.backoff_base_ms.saturating_mul(1 << attempt.min(16));
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
            }
        };

        let response = ChatResponse {
            text: reply.text,
            finish_reason: reply.finish_reason,
            request_fingerprint: fingerprint,
        };
        if !self.cfg.no_cache {
            self.write_cache(&cache_path, &response)?;
        }
        Ok(response)
    }

    /// Completes a batch with at most `max_concurrency` requests in flight.
    /// Results are positionally aligned with the inputs; per-item failures
    /// come back with `FinishReason::Error` instead of aborting the batch.
    pub fn complete_batch(&self, reqs: &[ChatRequest]) -> Vec<ChatResponse> {
        if reqs.is_empty() {
            return Vec::new();
        }
        let queue: Mutex<VecDeque<usize>> = Mutex::new((0..reqs.len()).collect());
        let slots: Vec<Mutex<Option<ChatResponse>>> =
            reqs.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.cfg.max_concurrency.max(1).min(reqs.len());

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let next = queue.lock().expect("queue lock").pop_front();
                    let Some(i) = next else { break };
                    let req = &reqs[i];
                    let response = match self.complete(req) {
                        Ok(r) => r,
                        Err(_) => ChatResponse {
                            text: String::new(),
                            finish_reason: FinishReason::Error,
                            request_fingerprint: request_fingerprint(req),
                        },
                    };
                    *slots[i].lock().expect("slot lock") = Some(response);
                });
            }
        });

        slots
            .into_iter()
            .map(|slot| slot.into_inner().expect("slot lock").expect("slot filled"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    fn test_config(dir: &Path) -> GatewayConfig {
        GatewayConfig {
            cache_dir: dir.to_path_buf(),
            max_concurrency: 3,
            max_retries: 1,
            backoff_base_ms: 1,
            ..GatewayConfig::default()
        }
    }

    struct CountingBackend {
        inner: ScriptedTeacher,
        calls: AtomicUsize,
        in_flight: AtomicUsize,
        peak: AtomicUsize,
    }

    impl CountingBackend {
        fn new(entries: Vec<ScriptEntry>) -> Self {
            CountingBackend {
                inner: ScriptedTeacher::new(entries),
                calls: AtomicUsize::new(0),
                in_flight: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
            }
        }
    }

    impl ChatBackend for CountingBackend {
        fn complete(&self, req: &ChatRequest) -> Result<BackendReply, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(10));
            let result = self.inner.complete(req);
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            result
        }
    }

    fn entry(m: &str, r: &str) -> ScriptEntry {
        ScriptEntry {
            match_substring: m.to_string(),
            response_text: r.to_string(),
        }
    }

    #[test]
    fn config_parses_from_minimal_toml() {
        // Only the core fields; the extensions take their defaults.
        let toml_body = r#"
            endpoint_url = "https://api.example.com/v1/chat/completions"
            api_key_env_var = "KEY"
            max_concurrency = 8
            max_retries = 3
            backoff_base_ms = 250
            cache_dir = ".cache"
        "#;
        let cfg: GatewayConfig = toml::from_str(toml_body).unwrap();
        assert_eq!(cfg.max_concurrency, 8);
        assert_eq!(cfg.max_tokens_ceiling, 4096);
        assert_eq!(cfg.request_budget, None);
        assert!(!cfg.no_cache);
    }

    #[test]
    fn fingerprint_ignores_seed_hint() {
        let a = ChatRequest::new("m", "hello");
        let b = a.clone().with_seed(99);
        assert_eq!(request_fingerprint(&a), request_fingerprint(&b));
    }

    #[test]
    fn fingerprint_depends_on_canonical_fields() {
        let base = ChatRequest::new("m", "hello");
        let variants = [
            ChatRequest {
                model_tag: "m2".into(),
                ..base.clone()
            },
            ChatRequest {
                system: Some("sys".into()),
                ..base.clone()
            },
            ChatRequest {
                user: "other".into(),
                ..base.clone()
            },
            ChatRequest {
                temperature: 0.3,
                ..base.clone()
            },
            ChatRequest {
                top_p: 0.9,
                ..base.clone()
            },
            ChatRequest {
                max_tokens: 99,
                ..base.clone()
            },
        ];
        let fp = request_fingerprint(&base);
        for v in variants {
            assert_ne!(request_fingerprint(&v), fp);
        }
    }

    #[test]
    fn scripted_lookup_by_marker() {
        let dir = tempfile::tempdir().unwrap();
        let fixture = dir.path().join("fixture.jsonl");
        std::fs::write(
            &fixture,
            format!(
                "{}\n{}\n",
                serde_json::to_string(&entry("Q17", "R17")).unwrap(),
                serde_json::to_string(&entry("Q18", "R18")).unwrap()
            ),
        )
        .unwrap();
        let gw = Gateway::scripted(test_config(dir.path()), &fixture).unwrap();
        let resp = gw
            .complete(&ChatRequest::new("teacher", "please solve Q17 now"))
            .unwrap();
        assert_eq!(resp.text, "R17");
        assert_eq!(resp.finish_reason, FinishReason::Stop);
    }

    #[test]
    fn scripted_rotates_by_seed_among_equal_matches() {
        let backend = ScriptedTeacher::new(vec![
            entry("Q1", "first"),
            entry("Q1", "second"),
            entry("Q1", "third"),
        ]);
        let base = ChatRequest::new("m", "solve Q1");
        assert_eq!(backend.complete(&base.clone().with_seed(0)).unwrap().text, "first");
        assert_eq!(backend.complete(&base.clone().with_seed(1)).unwrap().text, "second");
        assert_eq!(backend.complete(&base.clone().with_seed(2)).unwrap().text, "third");
        assert_eq!(backend.complete(&base.with_seed(3)).unwrap().text, "first");
    }

    #[test]
    fn scripted_prefers_most_specific_match() {
        let backend = ScriptedTeacher::new(vec![
            entry("Q1", "generic"),
            entry("Q1 with more context", "specific"),
        ]);
        let req = ChatRequest::new("m", "solve Q1 with more context please");
        assert_eq!(backend.complete(&req).unwrap().text, "specific");
    }

    #[test]
    fn empty_user_rejected_preflight() {
        let dir = tempfile::tempdir().unwrap();
        let gw = Gateway::with_backend(
            test_config(dir.path()),
            Arc::new(ScriptedTeacher::new(vec![entry("x", "y")])),
        );
        let err = gw.complete(&ChatRequest::new("m", "  ")).unwrap_err();
        assert!(matches!(err, GatewayError::InvalidRequest(_)));
    }

    #[test]
    fn identical_request_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(CountingBackend::new(vec![entry("Q1", "R1")]));
        let gw = Gateway::with_backend(test_config(dir.path()), backend.clone());
        let req = ChatRequest::new("m", "solve Q1");
        let first = gw.complete(&req).unwrap();
        let second = gw.complete(&req).unwrap();
        assert_eq!(first.text, second.text);
        assert_eq!(first, second);
        // One network call, second served from cache.
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
        assert_eq!(gw.network_requests(), 1);
    }

    #[test]
    fn batch_preserves_order_and_isolates_failures() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<ScriptEntry> =
            (0..10).map(|i| entry(&format!("Q{i} "), &format!("R{i}"))).collect();
        let gw = Gateway::with_backend(
            test_config(dir.path()),
            Arc::new(ScriptedTeacher::new(entries)),
        );
        let mut reqs: Vec<ChatRequest> = (0..10)
            .map(|i| ChatRequest::new("m", format!("Q{i} solve")))
            .collect();
        // Poison one request: empty user fails preflight.
        reqs[4].user = "".into();
        let responses = gw.complete_batch(&reqs);
        assert_eq!(responses.len(), 10);
        for (i, resp) in responses.iter().enumerate() {
            if i == 4 {
                assert_eq!(resp.finish_reason, FinishReason::Error);
                assert!(resp.text.is_empty());
            } else {
                assert_eq!(resp.finish_reason, FinishReason::Stop);
                assert_eq!(resp.text, format!("R{i}"));
            }
        }
    }

    #[test]
    fn batch_bounds_in_flight_requests() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<ScriptEntry> =
            (0..10).map(|i| entry(&format!("Q{i} "), "ok")).collect();
        let backend = Arc::new(CountingBackend::new(entries));
        let mut cfg = test_config(dir.path());
        cfg.max_concurrency = 3;
        let gw = Gateway::with_backend(cfg, backend.clone());
        let reqs: Vec<ChatRequest> = (0..10)
            .map(|i| ChatRequest::new("m", format!("Q{i} go")))
            .collect();
        let responses = gw.complete_batch(&reqs);
        assert_eq!(responses.len(), 10);
        let peak = backend.peak.load(Ordering::SeqCst);
        assert!(peak <= 3, "peak in-flight was {peak}");
    }

    #[test]
    fn repeat_batch_hits_cache_only() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<ScriptEntry> =
            (0..5).map(|i| entry(&format!("Q{i} "), "ok")).collect();
        let backend = Arc::new(CountingBackend::new(entries));
        let gw = Gateway::with_backend(test_config(dir.path()), backend.clone());
        let reqs: Vec<ChatRequest> = (0..5)
            .map(|i| ChatRequest::new("m", format!("Q{i} go")))
            .collect();
        gw.complete_batch(&reqs);
        let after_first = backend.calls.load(Ordering::SeqCst);
        gw.complete_batch(&reqs);
        let after_second = backend.calls.load(Ordering::SeqCst);
        assert_eq!(after_first, 5);
        assert_eq!(after_second, 5, "second batch must be served from cache");
    }

    #[test]
    fn budget_cap_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_config(dir.path());
        cfg.request_budget = Some(2);
        cfg.no_cache = true;
        let gw = Gateway::with_backend(cfg, Arc::new(ScriptedTeacher::new(vec![entry("Q", "R")])));
        let req = ChatRequest::new("m", "Q");
        assert!(gw.complete(&req).is_ok());
        assert!(gw.complete(&req).is_ok());
        let err = gw.complete(&req).unwrap_err();
        assert!(matches!(err, GatewayError::BudgetExceeded { limit: 2 }));
    }

    #[test]
    fn seeded_requests_cache_separately() {
        let dir = tempfile::tempdir().unwrap();
        let gw = Gateway::with_backend(
            test_config(dir.path()),
            Arc::new(ScriptedTeacher::new(vec![
                entry("Q1", "first"),
                entry("Q1", "second"),
            ])),
        );
        let base = ChatRequest::new("m", "solve Q1");
        let a = gw.complete(&base.clone().with_seed(0)).unwrap();
        let b = gw.complete(&base.clone().with_seed(1)).unwrap();
        assert_eq!(a.text, "first");
        assert_eq!(b.text, "second");
        // Same fingerprint (seed is not canonical), distinct cache entries.
        assert_eq!(a.request_fingerprint, b.request_fingerprint);
        let cached = gw.complete(&base.with_seed(1)).unwrap();
        assert_eq!(cached.text, "second");
    }
}
