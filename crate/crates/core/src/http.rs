//! Blocking JSON-over-HTTP with exponential backoff, shared by the chat and
//! embedding clients.

use std::fmt;
use std::thread;
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl RetryPolicy {
    pub fn exponential(max_retries: u32, base_delay: Duration) -> Self {
        Self { max_retries, base_delay, max_delay: Duration::from_secs(60) }
    }

    /// Delay before retry number `retry` (0-based): base · 2^retry, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(20)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Final failure after retries. `status` is the last HTTP status seen, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpFailure {
    pub status: Option<u16>,
    pub attempts: u32,
    pub timed_out: bool,
    pub message: String,
}

impl fmt::Display for HttpFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.status {
            Some(s) => write!(f, "HTTP {s} after {} attempt(s): {}", self.attempts, self.message),
            None => write!(f, "{} after {} attempt(s)", self.message, self.attempts),
        }
    }
}

impl std::error::Error for HttpFailure {}

#[derive(Debug, Clone)]
pub struct HttpReply {
    pub body: Value,
    pub status: u16,
    /// Retries consumed before the successful attempt.
    pub retries: u32,
}

fn retryable(status: u16) -> bool {
    status == 408 || status == 429 || status >= 500
}

pub struct HttpClient {
    agent: ureq::Agent,
    bearer: Option<String>,
}

impl HttpClient {
    /// `api_key_env` names an environment variable holding a bearer token.
    pub fn new(timeout: Duration, api_key_env: Option<&str>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let bearer = api_key_env.and_then(|k| std::env::var(k).ok()).filter(|k| !k.is_empty());
        Self { agent, bearer }
    }

    pub fn post_json<B: Serialize>(
        &self,
        url: &str,
        body: &B,
        policy: &RetryPolicy,
    ) -> Result<HttpReply, HttpFailure> {
        let mut attempt = 0u32;
        loop {
            let outcome = self.attempt(url, body);
            let failure = match outcome {
                Ok((status, json)) if (200..300).contains(&status) => {
                    return Ok(HttpReply { body: json, status, retries: attempt });
                }
                Ok((status, json)) => {
                    let f = HttpFailure {
                        status: Some(status),
                        attempts: attempt + 1,
                        timed_out: false,
                        message: json.to_string(),
                    };
                    if !retryable(status) {
                        return Err(f);
                    }
                    f
                }
                Err((timed_out, message)) => {
                    HttpFailure { status: None, attempts: attempt + 1, timed_out, message }
                }
            };
            if attempt >= policy.max_retries {
                return Err(failure);
            }
            log::warn!("POST {url} failed ({failure}); retrying");
            thread::sleep(policy.delay(attempt));
            attempt += 1;
        }
    }

    fn attempt<B: Serialize>(&self, url: &str, body: &B) -> Result<(u16, Value), (bool, String)> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = &self.bearer {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| {
            let timed_out = matches!(e, ureq::Error::Timeout(_));
            (timed_out, e.to_string())
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| (matches!(e, ureq::Error::Timeout(_)), e.to_string()))?;
        let json = serde_json::from_str(&text).unwrap_or(Value::String(text));
        Ok((status, json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy { max_retries: 5, base_delay: Duration::from_millis(100), max_delay: Duration::from_millis(500) };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(1), Duration::from_millis(200));
        assert_eq!(p.delay(2), Duration::from_millis(400));
        assert_eq!(p.delay(3), Duration::from_millis(500));
        assert_eq!(p.delay(40), Duration::from_millis(500));
    }

    #[test]
    fn connection_refused_exhausts_retries() {
        // Bind then drop to get a port nobody listens on.
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let c = HttpClient::new(Duration::from_secs(2), None);
        let p = RetryPolicy::exponential(2, Duration::from_millis(1));
        let err = c.post_json(&format!("http://127.0.0.1:{port}/"), &serde_json::json!({}), &p).unwrap_err();
        assert_eq!(err.attempts, 3);
        assert_eq!(err.status, None);
    }
}
