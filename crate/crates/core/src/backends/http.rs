//! OpenAI-compatible chat-completions client that reads label-token log-probabilities.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, LabelScores, ScoreBackend};
use crate::prompting::PromptSample;

fn default_timeout() -> f64 {
    30.0
}
fn default_concurrency() -> usize {
    4
}
fn default_top_logprobs() -> usize {
    20
}
fn default_retries() -> usize {
    3
}
fn default_backoff_ms() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    pub endpoint_url: String,
    /// Environment variable holding the bearer token; no auth header when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env_var: Option<String>,
    pub model_name: String,
    /// Seconds.
    #[serde(default = "default_timeout")]
    pub request_timeout: f64,
    #[serde(default = "default_concurrency")]
    pub max_concurrent_requests: usize,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: usize,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    /// First backoff delay; doubles on each retry.
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
}

impl HttpConfig {
    pub(super) fn validate(&self) -> Result<(), BackendError> {
        if !(self.endpoint_url.starts_with("http://") || self.endpoint_url.starts_with("https://")) {
            return Err(BackendError::Config(format!("endpoint_url {:?} is not an http(s) URL", self.endpoint_url)));
        }
        if self.model_name.is_empty() {
            return Err(BackendError::Config("model_name is empty".into()));
        }
        if self.max_concurrent_requests == 0 {
            return Err(BackendError::Config("max_concurrent_requests must be at least 1".into()));
        }
        if !(self.request_timeout > 0.0 && self.request_timeout.is_finite()) {
            return Err(BackendError::Config("request_timeout must be positive".into()));
        }
        if self.top_logprobs == 0 {
            return Err(BackendError::Config("top_logprobs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Connection-level failure (DNS, refused, timeout).
#[derive(Debug, Clone)]
pub struct TransportError(pub String);

/// Sends one JSON POST and returns (status, body).
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<(u16, String), TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<(u16, String), TransportError> {
        let mut req = self.client.post(url).timeout(timeout).json(body);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| TransportError(e.to_string()))?;
        Ok((status, text))
    }
}

/// Counting semaphore bounding in-flight requests across all callers.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpBackend {
    cfg: HttpConfig,
    transport: Box<dyn Transport>,
    token: Option<String>,
    slots: Slots,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig, transport: Box<dyn Transport>) -> Result<Self, BackendError> {
        cfg.validate()?;
        let token = match &cfg.api_key_env_var {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| BackendError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let slots = Slots {
            free: Mutex::new(cfg.max_concurrent_requests),
            cv: Condvar::new(),
        };
        Ok(Self {
            cfg,
            transport,
            token,
            slots,
        })
    }

    pub fn request_body(&self, prompt: &PromptSample) -> Value {
        json!({
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt.rendered_text}],
            "temperature": 0,
            "max_completion_tokens": 1,
            "logprobs": true,
            "top_logprobs": self.cfg.top_logprobs,
        })
    }

    fn send_with_retries(&self, body: &Value) -> Result<String, BackendError> {
        let timeout = Duration::from_secs_f64(self.cfg.request_timeout);
        let attempts = self.cfg.max_retries + 1;
        let mut last_transport = None;
        let mut last_status = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.cfg.retry_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let outcome = {
                let _slot = self.slots.acquire();
                self.transport.post_json(&self.cfg.endpoint_url, self.token.as_deref(), body, timeout)
            };
            match outcome {
                Ok((200..=299, text)) => return Ok(text),
                Ok((status, text)) if status == 408 || status == 429 || status >= 500 => {
                    tracing::warn!(status, attempt, "retryable http status");
                    last_transport = None;
                    last_status = format!("status {status}: {}", truncate(&text));
                }
                Ok((status, text)) => {
                    return Err(BackendError::Fatal {
                        status,
                        body: truncate(&text),
                    })
                }
                Err(TransportError(msg)) => {
                    tracing::warn!(attempt, error = %msg, "transport failure");
                    last_transport = Some(msg);
                }
            }
        }
        Err(match last_transport {
            Some(message) => BackendError::Unreachable { attempts, message },
            None => BackendError::RetriesExhausted {
                attempts,
                message: last_status,
            },
        })
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(300).collect()
}

/// Alternatives for the first generated token as (token, logprob) pairs.
fn first_token_alternatives(body: &str) -> Result<Vec<(String, f64)>, BackendError> {
    let v: Value = serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    let first = v
        .pointer("/choices/0/logprobs/content/0")
        .ok_or_else(|| BackendError::Malformed("missing choices[0].logprobs.content[0]".into()))?;
    let pair = |t: &Value| -> Option<(String, f64)> {
        Some((t.get("token")?.as_str()?.to_string(), t.get("logprob")?.as_f64()?))
    };
    let mut out: Vec<(String, f64)> = first
        .get("top_logprobs")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(pair).collect())
        .unwrap_or_default();
    if out.is_empty() {
        out.extend(pair(first));
    }
    Ok(out)
}

fn token_label<'a>(token: &str, labels: &'a [String]) -> Option<&'a String> {
    let t = token.trim();
    let first = t.chars().next()?;
    if first.is_ascii_digit() {
        let digits: String = t.chars().take_while(char::is_ascii_digit).collect();
        labels.iter().find(|l| **l == digits)
    } else {
        labels.iter().find(|l| l.chars().count() == 1 && l.starts_with(first))
    }
}

/// Maps top-logprob alternatives onto prompt labels.
///
/// A token belongs to a label when its first character after whitespace
/// stripping is that label; digit labels match the token's leading digit run.
/// Several tokenizations of one label are combined by log-sum-exp.
pub fn extract_label_scores(
    alternatives: &[(String, f64)],
    labels: &[String],
) -> Result<LabelScores, BackendError> {
    let mut seen = std::collections::HashSet::new();
    let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (token, lp) in alternatives {
        if !lp.is_finite() || !seen.insert(token.as_str()) {
            continue;
        }
        if let Some(label) = token_label(token, labels) {
            grouped.entry(label.clone()).or_default().push(*lp);
        }
    }
    if grouped.len() < 2 {
        return Err(BackendError::Degraded {
            recovered: grouped.len(),
        });
    }
    Ok(grouped
        .into_iter()
        .map(|(label, lps)| {
            let m = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (label, m + lps.iter().map(|x| (x - m).exp()).sum::<f64>().ln())
        })
        .collect())
}

impl ScoreBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn model(&self) -> String {
        self.cfg.model_name.clone()
    }

    fn fetch_label_scores(&self, prompt: &PromptSample) -> Result<LabelScores, BackendError> {
        let text = self.send_with_retries(&self.request_body(prompt))?;
        extract_label_scores(&first_token_alternatives(&text)?, &prompt.labels)
    }

    fn fetch_batch(&self, prompts: &[PromptSample]) -> Vec<Result<LabelScores, BackendError>> {
        let workers = self.cfg.max_concurrent_requests.min(prompts.len());
        if workers <= 1 {
            return prompts.iter().map(|p| self.fetch_label_scores(p)).collect();
        }
        let next = AtomicUsize::new(0);
        let results: Vec<Mutex<Option<Result<LabelScores, BackendError>>>> =
            prompts.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(p) = prompts.get(i) else { break };
                    let r = self.fetch_label_scores(p);
                    *results[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
                });
            }
        });
        results
            .into_iter()
            .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every prompt fetched"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn cfg(max: usize) -> HttpConfig {
        HttpConfig {
            endpoint_url: "http://fake/v1/chat/completions".into(),
            api_key_env_var: None,
            model_name: "fake-model".into(),
            request_timeout: 5.0,
            max_concurrent_requests: max,
            top_logprobs: 20,
            max_retries: 3,
            retry_backoff_ms: 1,
        }
    }

    fn prompt(i: usize) -> PromptSample {
        PromptSample {
            user_id: format!("u{i}"),
            prompt_id: format!("d0-{i}"),
            draw_index: 0,
            rendered_text: format!("prompt {i}"),
            labels: ["A", "B", "C"].iter().map(|s| s.to_string()).collect(),
            permutation: vec![0, 1, 2],
            applied_history: vec![],
            edit: None,
            template_version: "1".into(),
        }
    }

    fn response(alts: &[(&str, f64)]) -> String {
        let top: Vec<Value> = alts.iter().map(|(t, l)| json!({"token": t, "logprob": l})).collect();
        json!({"choices": [{"logprobs": {"content": [{"token": alts[0].0, "logprob": alts[0].1, "top_logprobs": top}]}}]})
            .to_string()
    }

    struct Counting {
        in_flight: AtomicUsize,
        peak: AtomicUsize,
        calls: AtomicUsize,
    }

    impl Transport for Arc<Counting> {
        fn post_json(&self, _: &str, _: Option<&str>, _: &Value, _: Duration) -> Result<(u16, String), TransportError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            self.calls.fetch_add(1, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            Ok((200, response(&[("A", -0.2), ("B", -1.9), (" C", -3.0)])))
        }
    }

    #[test]
    fn in_flight_requests_stay_bounded() {
        let t = Arc::new(Counting {
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        });
        let backend = HttpBackend::new(cfg(3), Box::new(t.clone())).unwrap();
        let prompts: Vec<_> = (0..24).map(prompt).collect();
        // Outer parallelism on top of the batch workers must not break the bound.
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    let out = backend.fetch_batch(&prompts);
                    assert!(out.iter().all(|r| r.is_ok()));
                });
            }
        });
        assert!(t.peak.load(Ordering::SeqCst) <= 3);
        assert_eq!(t.calls.load(Ordering::SeqCst), 96);
    }

    struct Scripted {
        replies: Mutex<Vec<Result<(u16, String), TransportError>>>,
        calls: AtomicUsize,
    }

    impl Transport for Arc<Scripted> {
        fn post_json(&self, _: &str, _: Option<&str>, _: &Value, _: Duration) -> Result<(u16, String), TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let mut r = self.replies.lock().unwrap();
            if r.len() > 1 {
                r.remove(0)
            } else {
                r[0].clone()
            }
        }
    }

    fn scripted(replies: Vec<Result<(u16, String), TransportError>>) -> (Arc<Scripted>, HttpBackend) {
        let t = Arc::new(Scripted {
            replies: Mutex::new(replies),
            calls: AtomicUsize::new(0),
        });
        let b = HttpBackend::new(cfg(2), Box::new(t.clone())).unwrap();
        (t, b)
    }

    #[test]
    fn retryable_statuses_are_retried() {
        let ok = response(&[("A", -0.1), ("B", -2.5)]);
        let (t, b) = scripted(vec![Ok((503, "busy".into())), Ok((429, "slow".into())), Ok((200, ok))]);
        let scores = b.fetch_label_scores(&prompt(0)).unwrap();
        assert_eq!(scores["A"], -0.1);
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);

        let (t, b) = scripted(vec![Ok((500, "down".into()))]);
        assert!(matches!(b.fetch_label_scores(&prompt(0)), Err(BackendError::RetriesExhausted { attempts: 4, .. })));
        assert_eq!(t.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn client_errors_are_fatal_immediately() {
        let (t, b) = scripted(vec![Ok((401, "bad key".into()))]);
        assert!(matches!(b.fetch_label_scores(&prompt(0)), Err(BackendError::Fatal { status: 401, .. })));
        assert_eq!(t.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn connection_failures_mean_unreachable() {
        let (t, b) = scripted(vec![Err(TransportError("connection refused".into()))]);
        let err = b.fetch_label_scores(&prompt(0)).unwrap_err();
        assert!(err.is_unreachable());
        assert_eq!(t.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn request_body_shape() {
        let (_, b) = scripted(vec![Ok((200, String::new()))]);
        let body = b.request_body(&prompt(7));
        assert_eq!(body["model"], "fake-model");
        assert_eq!(body["temperature"], 0);
        assert_eq!(body["max_completion_tokens"], 1);
        assert_eq!(body["logprobs"], true);
        assert_eq!(body["top_logprobs"], 20);
        assert_eq!(body["messages"][0]["content"], "prompt 7");
    }

    #[test]
    fn duplicate_tokenizations_are_merged() {
        let labels: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let alts = vec![
            ("A".to_string(), (0.5f64).ln()),
            (" A".to_string(), (0.25f64).ln()),
            ("B".to_string(), (0.125f64).ln()),
            ("The".to_string(), (0.1f64).ln()),
        ];
        let s = extract_label_scores(&alts, &labels).unwrap();
        assert!((s["A"] - 0.75f64.ln()).abs() < 1e-15);
        assert_eq!(s["B"], 0.125f64.ln());
        assert!(!s.contains_key("C"));
    }

    #[test]
    fn digit_labels_use_the_leading_number() {
        let labels: Vec<String> = (1..=12).map(|i| i.to_string()).collect();
        let alts = vec![("1".to_string(), -0.5), ("12".to_string(), -1.0), (" 2".to_string(), -3.0)];
        let s = extract_label_scores(&alts, &labels).unwrap();
        assert_eq!(s["1"], -0.5);
        assert_eq!(s["12"], -1.0);
        assert_eq!(s["2"], -3.0);
    }

    #[test]
    fn fewer_than_two_labels_is_degraded() {
        let labels: Vec<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        let alts = vec![("A".to_string(), -0.01), ("Sure".to_string(), -5.0)];
        assert!(matches!(extract_label_scores(&alts, &labels), Err(BackendError::Degraded { recovered: 1 })));
        let (_, b) = scripted(vec![Ok((200, response(&[("A", -0.01), ("Sure", -5.0)])))]);
        assert!(matches!(b.fetch_label_scores(&prompt(0)), Err(BackendError::Degraded { .. })));
        let (_, b) = scripted(vec![Ok((200, "{}".into()))]);
        assert!(matches!(b.fetch_label_scores(&prompt(0)), Err(BackendError::Malformed(_))));
    }

    #[test]
    fn missing_api_key_variable_is_a_config_error() {
        let mut c = cfg(1);
        c.api_key_env_var = Some("RANKUNC_TEST_KEY_THAT_IS_NOT_SET".into());
        let (t, _) = scripted(vec![Ok((200, String::new()))]);
        assert!(matches!(HttpBackend::new(c, Box::new(t)), Err(BackendError::Config(_))));
    }
}
