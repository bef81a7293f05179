//! Codebook adapter with deferral: (key, value, radius) entries consulted at
//! one layer's MLP output, deferring to the unedited weights outside every
//! ball.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{EditMethod, EditRecord, EditRequest};
use crate::error::{Error, Result};
use crate::linalg::euclidean_distance;
use crate::model::{
    generate_hooked, key_at, optimize_value, target_nll, target_nll_hooked, ForwardOutput,
    GenerationMode, MlpHook, ToyModel, ValueOptions,
};

/// Radii never shrink below this; a conflict that would require it is
/// unresolvable.
const MIN_RADIUS: f64 = 1e-6;

/// One codebook row: map keys within `radius` of `key` to `value`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraceEntry {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub radius: f64,
    pub request_id: String,
    /// Target text of the originating request, used for the value-agreement
    /// test. Not persisted; entries loaded from disk are treated as
    /// conflicting with everything.
    #[serde(skip)]
    pub target: Option<String>,
}

impl GraceEntry {
    fn key_view(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.key)
    }

    fn agrees_with(&self, target: Option<&str>) -> bool {
        match (&self.target, target) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }
}

/// Append-only codebook; insertion order breaks lookup ties.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GraceBook {
    entries: Vec<GraceEntry>,
}

/// Result of a codebook lookup.
#[derive(Debug, Clone, PartialEq)]
pub enum LookupResult {
    /// Nearest covering entry's value.
    Hit { value: Vec<f64>, entry_index: usize },
    /// No entry covers the query; use the unedited MLP output.
    PassThrough,
}

impl GraceBook {
    pub fn new() -> GraceBook {
        GraceBook::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[GraceEntry] {
        &self.entries
    }

    /// Inserts a new entry, resolving collisions:
    ///
    /// - a conflicting new key inside an existing ball splits both radii to
    ///   half the key distance;
    /// - conflicting balls that merely overlap shrink until they are disjoint;
    /// - agreeing entries may coexist (overlap of same-valued balls is fine).
    ///
    /// A conflicting key at (or numerically indistinguishable from) zero
    /// distance cannot be split and is an unresolvable-conflict error. On any
    /// error the book is unchanged.
    pub fn insert(
        &mut self,
        key: Vec<f64>,
        value: Vec<f64>,
        init_radius: f64,
        request_id: String,
        target: Option<String>,
    ) -> Result<()> {
        if init_radius <= 0.0 {
            return Err(Error::input(format!("init_radius must be > 0, got {init_radius}")));
        }
        if key.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("codebook key is not finite".into()));
        }
        let key_arr = ArrayView1::from(&key);
        let mut new_radius = init_radius;
        // plan radius changes first so a failed insert leaves the book intact
        let mut shrinks: Vec<(usize, f64)> = Vec::new();
        for (idx, entry) in self.entries.iter().enumerate() {
            let dist = euclidean_distance(&key_arr, &entry.key_view());
            if entry.agrees_with(target.as_deref()) {
                continue;
            }
            if dist < entry.radius {
                // split rule
                let half = dist / 2.0;
                if half < MIN_RADIUS {
                    return Err(Error::UnresolvableConflict(format!(
                        "conflicting key at distance {:.3e} from entry {} cannot be split",
                        dist, entry.request_id
                    )));
                }
                shrinks.push((idx, half));
                new_radius = new_radius.min(half);
            } else if dist < entry.radius + new_radius {
                // disjoint key but overlapping balls: shrink the newcomer
                let allowed = dist - entry.radius;
                if allowed >= MIN_RADIUS {
                    new_radius = new_radius.min(allowed);
                } else {
                    let half = dist / 2.0;
                    if half < MIN_RADIUS {
                        return Err(Error::UnresolvableConflict(format!(
                            "conflicting key at distance {:.3e} from entry {} cannot be split",
                            dist, entry.request_id
                        )));
                    }
                    shrinks.push((idx, half));
                    new_radius = new_radius.min(half);
                }
            }
        }
        for (idx, radius) in shrinks {
            let entry = &mut self.entries[idx];
            entry.radius = entry.radius.min(radius);
        }
        self.entries.push(GraceEntry { key, value, radius: new_radius, request_id, target });
        Ok(())
    }

    /// True when no two entries with conflicting values have overlapping
    /// balls (tolerance only against floating error, not semantics).
    pub fn non_overlapping(&self) -> bool {
        for i in 0..self.entries.len() {
            for j in i + 1..self.entries.len() {
                let a = &self.entries[i];
                let b = &self.entries[j];
                let agree = match (&a.target, &b.target) {
                    (Some(x), Some(y)) => x == y,
                    _ => a.value == b.value,
                };
                if agree {
                    continue;
                }
                let dist = euclidean_distance(&a.key_view(), &b.key_view());
                if dist < a.radius + b.radius - 1e-12 {
                    return false;
                }
            }
        }
        true
    }
}

/// Returns the value of the nearest entry whose ball covers `query`, or
/// pass-through. Ties break toward the lowest insertion index.
pub fn grace_lookup(book: &GraceBook, query: ArrayView1<f64>) -> LookupResult {
    let mut best: Option<(usize, f64)> = None;
    for (idx, entry) in book.entries.iter().enumerate() {
        let dist = euclidean_distance(&query, &entry.key_view());
        if dist < entry.radius {
            let better = match best {
                None => true,
                Some((_, best_dist)) => dist < best_dist,
            };
            if better {
                best = Some((idx, dist));
            }
        }
    }
    match best {
        Some((idx, _)) => LookupResult::Hit {
            value: book.entries[idx].value.clone(),
            entry_index: idx,
        },
        None => LookupResult::PassThrough,
    }
}

/// Computes the key and optimized value for `request` and inserts them with
/// `init_radius`. The model is read, never written.
pub fn grace_add(
    book: &mut GraceBook,
    model: &ToyModel,
    request: &EditRequest,
    layer: usize,
    init_radius: f64,
    value_options: &ValueOptions,
) -> Result<EditRecord> {
    request.validate()?;
    let target = request.target_text();
    let key = key_at(model, &request.prompt, request.subject_span, layer)?;
    let fit = optimize_value(
        model,
        &request.prompt,
        request.subject_span,
        &target,
        layer,
        value_options,
    )?;
    let pre_score = (-target_nll(model, &request.prompt, &target)?).exp();
    book.insert(
        key.to_vec(),
        fit.vector.to_vec(),
        init_radius,
        request.id(),
        Some(target.clone()),
    )?;
    let adapter = CodebookAdapter { book, layer };
    let post_score =
        (-target_nll_hooked(model, &adapter, &request.prompt, &target)?).exp();
    let record = EditRecord {
        method: EditMethod::Grace,
        layers: vec![],
        delta_frobenius_norms: vec![],
        pre_score,
        post_score,
        timestamp_ms: EditRecord::now_ms(),
        request_ids: vec![request.id()],
    };
    record.validate()?;
    Ok(record)
}

/// MLP hook that consults the codebook at one layer.
pub struct CodebookAdapter<'a> {
    pub book: &'a GraceBook,
    pub layer: usize,
}

impl MlpHook for CodebookAdapter<'_> {
    fn override_output(
        &self,
        layer: usize,
        _position: usize,
        key: ArrayView1<f64>,
        _default: ArrayView1<f64>,
    ) -> Option<Array1<f64>> {
        if layer != self.layer {
            return None;
        }
        match grace_lookup(self.book, key) {
            LookupResult::Hit { value, .. } => Some(Array1::from(value)),
            LookupResult::PassThrough => None,
        }
    }
}

/// A model wrapped with a codebook at one layer; weights are untouched.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub base: ToyModel,
    pub book: GraceBook,
    pub layer: usize,
}

impl AdaptedModel {
    pub fn generate(&self, prompt: &str, max_new: usize, mode: GenerationMode) -> Result<String> {
        let adapter = CodebookAdapter { book: &self.book, layer: self.layer };
        generate_hooked(&self.base, &adapter, prompt, max_new, mode)
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardOutput> {
        let adapter = CodebookAdapter { book: &self.book, layer: self.layer };
        self.base.forward_hooked(tokens, &adapter)
    }

    pub fn target_nll(&self, prompt: &str, target: &str) -> Result<f64> {
        let adapter = CodebookAdapter { book: &self.book, layer: self.layer };
        target_nll_hooked(&self.base, &adapter, prompt, target)
    }
}

/// Routes the model's MLP output at `layer` through codebook lookups.
pub fn apply_adapter(model: ToyModel, book: GraceBook, layer: usize) -> Result<AdaptedModel> {
    if layer >= model.config.n_layers {
        return Err(Error::input(format!(
            "layer {} out of range ({} layers)",
            layer, model.config.n_layers
        )));
    }
    Ok(AdaptedModel { base: model, book, layer })
}

/// One JSON entry per line: `{"key": [...], "value": [...], "radius": r,
/// "request_id": id}`.
pub fn save_codebook(book: &GraceBook, path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path.as_ref())
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    for entry in &book.entries {
        let line = serde_json::to_string(entry).expect("entry serializes");
        writeln!(file, "{}", line).map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    }
    Ok(())
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<GraceBook> {
    let file = fs::File::open(path.as_ref())
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: GraceEntry = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("codebook line {}: {}", lineno + 1, e))
        })?;
        if entry.radius <= 0.0 {
            return Err(Error::Format(format!(
                "codebook line {}: radius must be > 0",
                lineno + 1
            )));
        }
        entries.push(entry);
    }
    Ok(GraceBook { entries })
}
