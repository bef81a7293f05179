//! HTTP verifier client: `POST {base}/score` with a batched statement list.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{PlausibilityScore, VerifierBackend};
use crate::error::{Error, Result};

/// Environment variable carrying the verifier base URL.
pub const VERIFIER_URL_ENV: &str = "CONKE_VERIFIER_URL";

/// Transport retry policy: `attempts` tries with exponential backoff.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, initial_backoff: Duration::from_millis(500) }
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    statements: &'a [String],
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

/// Client for an external scoring service.
///
/// One batched request per `score` call; concurrent callers are expected to
/// stay within `max_in_flight` (the client itself is synchronous).
pub struct HttpVerifier {
    base_url: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl HttpVerifier {
    pub fn new(base_url: impl Into<String>) -> HttpVerifier {
        HttpVerifier {
            base_url: base_url.into(),
            client: reqwest::blocking::Client::new(),
            retry: RetryPolicy::default(),
            max_in_flight: 4,
        }
    }

    /// Reads the base URL from `CONKE_VERIFIER_URL`.
    pub fn from_env() -> Result<HttpVerifier> {
        let url = std::env::var(VERIFIER_URL_ENV).map_err(|_| {
            Error::input(format!("{} is not set", VERIFIER_URL_ENV))
        })?;
        Ok(HttpVerifier::new(url))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> HttpVerifier {
        self.retry = retry;
        self
    }

    fn post_once(&self, statements: &[String]) -> Result<ScoreResponse> {
        let url = format!("{}/score", self.base_url.trim_end_matches('/'));
        let response = self
            .client
            .post(&url)
            .json(&ScoreRequest { statements })
            .send()
            .map_err(|e| Error::Backend(format!("verifier transport failure: {}", e)))?;
        if !response.status().is_success() {
            return Err(Error::Backend(format!(
                "verifier returned HTTP {}",
                response.status()
            )));
        }
        response
            .json::<ScoreResponse>()
            .map_err(|e| Error::Protocol(format!("verifier response malformed: {}", e)))
    }
}

impl VerifierBackend for HttpVerifier {
    fn kind(&self) -> &'static str {
        "http"
    }

    fn score(&self, statements: &[String]) -> Result<Vec<PlausibilityScore>> {
        if statements.is_empty() {
            return Err(Error::input("no statements to score"));
        }
        let mut backoff = self.retry.initial_backoff;
        let mut last_err = None;
        for attempt in 0..self.retry.attempts {
            match self.post_once(statements) {
                Ok(response) => {
                    if response.scores.len() != statements.len() {
                        return Err(Error::Protocol(format!(
                            "verifier returned {} scores for {} statements",
                            response.scores.len(),
                            statements.len()
                        )));
                    }
                    return response
                        .scores
                        .into_iter()
                        .map(PlausibilityScore::new)
                        .collect();
                }
                // protocol violations are not transient; do not retry them
                Err(err @ Error::Protocol(_)) => return Err(err),
                Err(err) => {
                    last_err = Some(err);
                    if attempt + 1 < self.retry.attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(last_err.unwrap_or_else(|| Error::Backend("verifier unreachable".into())))
    }
}
