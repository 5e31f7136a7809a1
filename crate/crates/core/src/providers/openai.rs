use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{wire, Choice, Provider, ProviderError, SampleRequest, API_KEY_ENV, BASE_URL_ENV};

/// Exponential backoff with full jitter on 429, 5xx and transport errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 5, base_delay_ms: 500, max_delay_ms: 20_000 }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let cap = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20)).min(self.max_delay_ms);
        let jittered = if cap == 0 { 0 } else { rand::rng().random_range(cap / 2..=cap) };
        Duration::from_millis(jittered)
    }
}

/// Retries shared by every request of one run; once spent, failures surface
/// on the first attempt.
#[derive(Debug)]
pub struct RetryBudget {
    remaining: AtomicU32,
}

impl RetryBudget {
    pub fn new(retries: u32) -> Self {
        RetryBudget { remaining: AtomicU32::new(retries) }
    }

    fn take(&self) -> bool {
        self.remaining.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |r| r.checked_sub(1)).is_ok()
    }

    pub fn remaining(&self) -> u32 {
        self.remaining.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpClientConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_budget")]
    pub retry_budget: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    API_KEY_ENV.to_string()
}
fn default_budget() -> u32 {
    200
}
fn default_in_flight() -> usize {
    8
}
fn default_timeout() -> u64 {
    60
}

impl HttpClientConfig {
    pub fn new(base_url: &str) -> Self {
        HttpClientConfig {
            base_url: base_url.to_string(),
            api_key_env: default_key_env(),
            retry: RetryPolicy::default(),
            retry_budget: default_budget(),
            max_in_flight: default_in_flight(),
            timeout_secs: default_timeout(),
        }
    }

    /// Base URL from `LLMREGRESS_BASE_URL`, falling back to the public API.
    pub fn from_env() -> Self {
        let base = std::env::var(BASE_URL_ENV).unwrap_or_else(|_| "https://api.openai.com/v1".to_string());
        HttpClientConfig::new(&base)
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore { permits: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

/// Blocking client for OpenAI-compatible `/completions` and
/// `/chat/completions` endpoints. Safe to share across threads; at most
/// `max_in_flight` requests are outstanding at once.
pub struct OpenAiClient {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    budget: Arc<RetryBudget>,
    in_flight: Semaphore,
    requests: AtomicUsize,
}

impl OpenAiClient {
    /// Reads the API key from the configured variable. A missing key is not
    /// an error here since local compatibility servers often need none.
    pub fn new(config: &HttpClientConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        OpenAiClient {
            agent,
            base_url: config.base_url.trim_end_matches('/').to_string(),
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
            retry: config.retry,
            budget: Arc::new(RetryBudget::new(config.retry_budget)),
            in_flight: Semaphore::new(config.max_in_flight),
            requests: AtomicUsize::new(0),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    /// HTTP requests sent so far, retries included.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn retry_budget(&self) -> &RetryBudget {
        &self.budget
    }

    fn post_once(&self, url: &str, body: &[u8]) -> Result<(u16, Vec<u8>, u64), ProviderError> {
        let _permit = self.in_flight.acquire();
        self.requests.fetch_add(1, Ordering::SeqCst);
        let started = Instant::now();
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let bytes = resp.body_mut().read_to_vec().map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok((status, bytes, started.elapsed().as_millis() as u64))
    }
}

fn retryable(err: &ProviderError) -> bool {
    match err {
        ProviderError::Http { status, .. } => *status == 429 || *status >= 500,
        ProviderError::Transport(_) => true,
        _ => false,
    }
}

impl Provider for OpenAiClient {
    fn fetch(&self, request: &SampleRequest<'_>) -> Result<Vec<Choice>, ProviderError> {
        let n = request.sample_indices.len() as u32;
        let body = wire::request_body(request.model, request.prompt, request.params, n);
        let url = format!("{}{}", self.base_url, wire::endpoint_path(request.prompt));

        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = self.post_once(&url, &body).and_then(|(status, bytes, latency)| {
                if (200..300).contains(&status) {
                    wire::parse_response(&bytes, latency)
                } else {
                    Err(ProviderError::Http { status, body: String::from_utf8_lossy(&bytes).into_owned() })
                }
            });
            match result {
                Ok(choices) => return Ok(choices),
                Err(err) if retryable(&err) && attempt < self.retry.max_attempts && self.budget.take() => {
                    thread::sleep(self.retry.delay(attempt - 1));
                }
                Err(ProviderError::Http { status: 429, .. }) => {
                    return Err(ProviderError::RateLimited { attempts: attempt })
                }
                Err(err) => return Err(err),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_grows_and_is_capped() {
        let p = RetryPolicy { max_attempts: 5, base_delay_ms: 100, max_delay_ms: 1000 };
        for attempt in 0..8 {
            let d = p.delay(attempt).as_millis() as u64;
            let cap = (100u64 << attempt).min(1000);
            assert!(d >= cap / 2 && d <= cap, "attempt {attempt}: {d}");
        }
    }

    #[test]
    fn budget_is_shared_and_exhausts() {
        let b = RetryBudget::new(2);
        assert!(b.take());
        assert!(b.take());
        assert!(!b.take());
        assert_eq!(b.remaining(), 0);
    }

    #[test]
    fn semaphore_bounds_concurrency() {
        let sem = Semaphore::new(2);
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _p = sem.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(10));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
