//! Single-fact rank-one edit of one `mlp_out` matrix.
//!
//! Installs `Ŵ = W + (v* − W k*)(C⁻¹k*)ᵀ / ((C⁻¹k*)ᵀ k*)`, which maps the
//! subject key `k*` exactly to the optimized value `v*` while the covariance
//! weighting keeps other keys close to their old images.

use ndarray::{Array1, Array2};

use super::{EditMethod, EditOutcome, EditRecord, EditRequest, KeyCovariance};
use crate::error::{Error, Result};
use crate::ids::normalize_ws;
use crate::linalg::{cholesky_solve, frobenius_norm, l2_norm, outer};
use crate::model::{
    generate, key_at_averaged, optimize_value, target_nll, GenerationMode, ToyModel,
    ValueOptions,
};

/// Denominator guard: rejecting the edit beats amplifying noise.
const DENOMINATOR_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct RomeParams {
    pub value: ValueOptions,
    /// Prefix contexts to average the subject key over; empty reads the key
    /// from the bare prompt.
    pub key_prefixes: Vec<String>,
}

/// Pure rank-one update: returns `(Ŵ, ‖Δ‖_F)` without touching a model.
pub fn rank_one_update(
    w: &Array2<f64>,
    key: &Array1<f64>,
    value: &Array1<f64>,
    cov: &KeyCovariance,
) -> Result<(Array2<f64>, f64)> {
    if value.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("target value vector is not finite".into()));
    }
    if key.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("subject key vector is not finite".into()));
    }
    let factor = cov.factor()?;
    let direction = cholesky_solve(&factor, &key.view()); // C⁻¹ k*
    let denominator = direction.dot(key);
    if denominator.abs() <= DENOMINATOR_GUARD {
        return Err(Error::Singularity(format!(
            "rank-one denominator {:.3e} within guard {:.0e}; edit rejected",
            denominator, DENOMINATOR_GUARD
        )));
    }
    let residual = value - &w.dot(key);
    let delta = outer(&residual.view(), &direction.view()).mapv(|v| v / denominator);
    let norm = frobenius_norm(&delta.view());
    Ok((w + &delta, norm))
}

/// Applies the rank-one edit for one request at `layer`.
///
/// On success only `mlp_out[layer]` differs from the input model; on any
/// error the model is left untouched.
pub fn rome_edit(
    model: &mut ToyModel,
    request: &EditRequest,
    layer: usize,
    cov: &KeyCovariance,
    params: &RomeParams,
) -> Result<EditOutcome> {
    request.validate()?;
    if layer >= model.config.n_layers {
        return Err(Error::input(format!(
            "layer {} out of range ({} layers)",
            layer, model.config.n_layers
        )));
    }
    if cov.layer != layer {
        return Err(Error::input(format!(
            "covariance was estimated at layer {} but the edit targets layer {}",
            cov.layer, layer
        )));
    }
    let target = request.target_text();
    let key = key_at_averaged(
        model,
        &request.prompt,
        request.subject_span,
        layer,
        &params.key_prefixes,
    )?;
    let fit = optimize_value(
        model,
        &request.prompt,
        request.subject_span,
        &target,
        layer,
        &params.value,
    )?;
    let pre_score = (-target_nll(model, &request.prompt, &target)?).exp();
    let (updated, norm) = rank_one_update(&model.layers[layer].mlp_out, &key, &fit.vector, cov)?;
    model.layers[layer].mlp_out = updated;
    let post_score = (-target_nll(model, &request.prompt, &target)?).exp();

    let continuation = generate(model, &request.prompt, 16, GenerationMode::Greedy)?;
    let matched = normalize_ws(&continuation) == normalize_ws(&target);
    let record = EditRecord {
        method: EditMethod::Rome,
        layers: vec![layer],
        delta_frobenius_norms: vec![norm],
        pre_score,
        post_score,
        timestamp_ms: EditRecord::now_ms(),
        request_ids: vec![request.id()],
    };
    record.validate()?;
    Ok(EditOutcome { record, greedy_match_fraction: if matched { 1.0 } else { 0.0 } })
}

/// Exactness check used by tests and the acceptance suite.
pub fn mapping_error(w: &Array2<f64>, key: &Array1<f64>, value: &Array1<f64>) -> f64 {
    let image = w.dot(key);
    let diff = &image - value;
    l2_norm(&diff.view()) / l2_norm(&value.view()).max(f64::MIN_POSITIVE)
}
