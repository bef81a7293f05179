//! LLM-backed conceptualization over a completion HTTP service.
//!
//! Prompts are built from editable template files with `{head}`,
//! `{relation}`, `{tail}`, and `{k}` slots; completions are parsed as
//! numbered lists, skipping malformed lines.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ConceptBackend, Proposals};
use crate::error::{Error, Result};

/// Environment variable carrying the completion-service base URL.
pub const LLM_URL_ENV: &str = "CONKE_LLM_URL";
/// Environment variable carrying the bearer token, if any.
pub const API_KEY_ENV: &str = "CONKE_API_KEY";

const DEFAULT_ABSTRACTION_TEMPLATE: &str = include_str!("../../templates/abstraction.txt");
const DEFAULT_INSTANTIATION_TEMPLATE: &str = include_str!("../../templates/instantiation.txt");

#[derive(Serialize)]
struct CompleteRequest<'a> {
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompleteResponse {
    text: String,
}

pub struct LlmBackend {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    attempts: u32,
    initial_backoff: Duration,
    abstraction_template: String,
    instantiation_template: String,
    pub max_tokens: usize,
    pub temperature: f64,
}

impl LlmBackend {
    pub fn new(base_url: impl Into<String>) -> LlmBackend {
        LlmBackend {
            base_url: base_url.into(),
            api_key: None,
            client: reqwest::blocking::Client::new(),
            attempts: 3,
            initial_backoff: Duration::from_millis(500),
            abstraction_template: DEFAULT_ABSTRACTION_TEMPLATE.to_string(),
            instantiation_template: DEFAULT_INSTANTIATION_TEMPLATE.to_string(),
            max_tokens: 256,
            temperature: 0.0,
        }
    }

    /// Reads `CONKE_LLM_URL` and, when present, `CONKE_API_KEY`.
    pub fn from_env() -> Result<LlmBackend> {
        let url = std::env::var(LLM_URL_ENV)
            .map_err(|_| Error::input(format!("{} is not set", LLM_URL_ENV)))?;
        let mut backend = LlmBackend::new(url);
        backend.api_key = std::env::var(API_KEY_ENV).ok();
        Ok(backend)
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> LlmBackend {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_retry(mut self, attempts: u32, initial_backoff: Duration) -> LlmBackend {
        self.attempts = attempts;
        self.initial_backoff = initial_backoff;
        self
    }

    /// Replaces the built-in prompt templates with file contents.
    pub fn with_template_files(
        mut self,
        abstraction: impl AsRef<Path>,
        instantiation: impl AsRef<Path>,
    ) -> Result<LlmBackend> {
        self.abstraction_template = std::fs::read_to_string(abstraction.as_ref())
            .map_err(|e| Error::io(abstraction.as_ref().display().to_string(), e))?;
        self.instantiation_template = std::fs::read_to_string(instantiation.as_ref())
            .map_err(|e| Error::io(instantiation.as_ref().display().to_string(), e))?;
        Ok(self)
    }

    fn fill(template: &str, head: &str, relation: &str, tail: &str, k: usize) -> String {
        template
            .replace("{head}", head)
            .replace("{relation}", relation)
            .replace("{tail}", tail)
            .replace("{k}", &k.to_string())
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let url = format!("{}/complete", self.base_url.trim_end_matches('/'));
        let mut backoff = self.initial_backoff;
        let mut last_err = None;
        for attempt in 0..self.attempts {
            let mut request = self.client.post(&url).json(&CompleteRequest {
                prompt,
                max_tokens: self.max_tokens,
                temperature: self.temperature,
            });
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            let outcome = request
                .send()
                .map_err(|e| Error::Backend(format!("llm transport failure: {}", e)))
                .and_then(|response| {
                    if !response.status().is_success() {
                        return Err(Error::Backend(format!(
                            "llm returned HTTP {}",
                            response.status()
                        )));
                    }
                    response
                        .json::<CompleteResponse>()
                        .map_err(|e| Error::Protocol(format!("llm response malformed: {}", e)))
                });
            match outcome {
                Ok(response) => return Ok(response.text),
                Err(err @ Error::Protocol(_)) => return Err(err),
                Err(err) => {
                    last_err = Some(err);
                    if attempt + 1 < self.attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(last_err.unwrap_or_else(|| Error::Backend("llm unreachable".into())))
    }
}

/// Parses a numbered-list completion ("1. text"), counting malformed lines.
/// A completion with no parsable lines at all is a protocol error carrying
/// the raw text.
pub fn parse_numbered_list(text: &str) -> Result<Proposals> {
    let mut heads = Vec::new();
    let mut skipped = 0usize;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let digits: String = trimmed.chars().take_while(|c| c.is_ascii_digit()).collect();
        let rest = &trimmed[digits.len()..];
        let body = rest
            .strip_prefix('.')
            .or_else(|| rest.strip_prefix(')'))
            .or_else(|| rest.strip_prefix(':'));
        match (digits.is_empty(), body) {
            (false, Some(body)) if !body.trim().is_empty() => {
                heads.push(body.trim().to_string())
            }
            _ => skipped += 1,
        }
    }
    if heads.is_empty() {
        return Err(Error::Protocol(format!(
            "completion contained no numbered list: {:?}",
            text
        )));
    }
    Ok(Proposals { heads, skipped })
}

impl ConceptBackend for LlmBackend {
    fn kind(&self) -> &'static str {
        "llm-http"
    }

    fn propose_abstractions(
        &self,
        head: &str,
        relation: &str,
        tail: &str,
        k_hint: usize,
    ) -> Result<Proposals> {
        let prompt = LlmBackend::fill(&self.abstraction_template, head, relation, tail, k_hint);
        parse_numbered_list(&self.complete(&prompt)?)
    }

    fn propose_instantiations(
        &self,
        head_concept: &str,
        relation: &str,
        tail: &str,
        k_hint: usize,
    ) -> Result<Proposals> {
        let prompt =
            LlmBackend::fill(&self.instantiation_template, head_concept, relation, tail, k_hint);
        parse_numbered_list(&self.complete(&prompt)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbered_lists_parse_with_mixed_separators() {
        let text = "1. PersonX buys a beverage\n2) PersonX buys a drink\n3: PersonX buys a liquid";
        let proposals = parse_numbered_list(text).unwrap();
        assert_eq!(proposals.heads.len(), 3);
        assert_eq!(proposals.skipped, 0);
        assert_eq!(proposals.heads[1], "PersonX buys a drink");
    }

    #[test]
    fn malformed_lines_are_skipped_and_counted() {
        let text = "Here are the events:\n1. PersonX buys a beverage\nnot numbered\n2. PersonX buys a drink";
        let proposals = parse_numbered_list(text).unwrap();
        assert_eq!(proposals.heads.len(), 2);
        assert_eq!(proposals.skipped, 2);
    }

    #[test]
    fn completely_unparsable_text_is_a_protocol_error_with_the_raw_text() {
        let err = parse_numbered_list("no list at all").unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        assert!(err.to_string().contains("no list at all"));
    }

    #[test]
    fn templates_fill_all_slots() {
        let filled = LlmBackend::fill("{head}|{relation}|{tail}|{k}", "h", "r", "t", 4);
        assert_eq!(filled, "h|r|t|4");
    }
}
