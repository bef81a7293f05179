//! The three editing backends: single-fact rank-one update, multi-layer
//! batched update, and an external codebook adapter with deferral.
//!
//! Parameter editors mutate exactly one designated `mlp_out` matrix per
//! layer; the adapter mutates nothing. Every edit emits one [`EditRecord`].

mod covariance;
mod grace;
mod memit;
mod rome;

pub use covariance::{estimate_covariance, KeyCovariance};
pub use grace::{
    apply_adapter, grace_add, grace_lookup, load_codebook, save_codebook, AdaptedModel,
    CodebookAdapter, GraceBook, GraceEntry, LookupResult,
};
pub use memit::{memit_edit, solve_layer_update, MemitParams, ResidualSpread};
pub use rome::{mapping_error, rank_one_update, rome_edit, RomeParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::content_id;
use crate::model::TokenSpan;

/// A correction to install: prompt, subject span, and the (relation, tail)
/// continuation that should follow. Edits always target the pair, never a
/// single token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub prompt: String,
    pub subject_span: TokenSpan,
    pub relation: String,
    pub tail: String,
    pub source_triple_ids: Vec<String>,
}

impl EditRequest {
    pub fn new(
        prompt: impl Into<String>,
        subject_span: TokenSpan,
        relation: impl Into<String>,
        tail: impl Into<String>,
        source_triple_ids: Vec<String>,
    ) -> Result<EditRequest> {
        let request = EditRequest {
            prompt: prompt.into(),
            subject_span,
            relation: relation.into(),
            tail: tail.into(),
            source_triple_ids,
        };
        request.validate()?;
        Ok(request)
    }

    pub fn validate(&self) -> Result<()> {
        if self.relation.trim().is_empty() {
            return Err(Error::input("edit request relation is empty"));
        }
        if self.tail.trim().is_empty() {
            return Err(Error::input("edit request tail is empty"));
        }
        if self.prompt.trim().is_empty() {
            return Err(Error::input("edit request prompt is empty"));
        }
        Ok(())
    }

    /// Content-derived id; requests are ordered and deduplicated by it.
    pub fn id(&self) -> String {
        content_id(&[&self.prompt, &self.relation, &self.tail])
    }

    /// The continuation the edited model should produce after the prompt.
    ///
    /// The edit unit is always the (relation, tail) pair; when the prompt
    /// itself already ends with the relation tag (the usual construction,
    /// which keys the edit at the relation token), the continuation left to
    /// install is just the tail.
    pub fn target_text(&self) -> String {
        let prompt = crate::ids::normalize_ws(&self.prompt);
        if prompt.ends_with(&format!(" {}", self.relation)) || prompt == self.relation {
            self.tail.clone()
        } else {
            format!("{} {}", self.relation, self.tail)
        }
    }
}

/// Which editing backend produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditMethod {
    Rome,
    Memit,
    Grace,
}

impl std::fmt::Display for EditMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            EditMethod::Rome => "rome",
            EditMethod::Memit => "memit",
            EditMethod::Grace => "grace",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for EditMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<EditMethod> {
        match s {
            "rome" => Ok(EditMethod::Rome),
            "memit" => Ok(EditMethod::Memit),
            "grace" => Ok(EditMethod::Grace),
            other => Err(Error::input(format!(
                "unknown edit method '{}', expected rome|memit|grace",
                other
            ))),
        }
    }
}

/// Audit entry for one applied edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub method: EditMethod,
    /// Layers whose weights changed; empty for the adapter method.
    pub layers: Vec<usize>,
    pub delta_frobenius_norms: Vec<f64>,
    /// Mean target probability before the edit.
    pub pre_score: f64,
    /// Mean target probability after the edit.
    pub post_score: f64,
    pub timestamp_ms: u64,
    pub request_ids: Vec<String>,
}

impl EditRecord {
    pub(crate) fn now_ms() -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_frobenius_norms.iter().any(|n| !n.is_finite() || *n < 0.0) {
            return Err(Error::Numeric("edit record has a non-finite or negative norm".into()));
        }
        match self.method {
            EditMethod::Grace => {
                if !self.layers.is_empty() {
                    return Err(Error::input("adapter edits must record no layers"));
                }
            }
            _ => {
                if self.layers.is_empty() {
                    return Err(Error::input("parameter edits must record their layers"));
                }
            }
        }
        Ok(())
    }
}

/// Outcome of a parameter edit: the audit record plus the fraction of edited
/// prompts whose greedy continuation now equals the target.
#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub record: EditRecord,
    pub greedy_match_fraction: f64,
}
