//! Batched multi-layer edit: spreads each request's residual over a layer
//! range and solves a regularized least-squares update per layer.

use ndarray::{Array1, Array2};

use super::{EditMethod, EditOutcome, EditRecord, EditRequest, KeyCovariance};
use crate::error::{Error, Result};
use crate::ids::normalize_ws;
use crate::linalg::{cholesky, cholesky_solve_multi, frobenius_norm};
use crate::model::{generate, optimize_value, target_nll, GenerationMode, ToyModel, ValueOptions};

/// How residuals are divided across the remaining layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualSpread {
    /// Each layer absorbs `1 / (remaining layers)` of the current residual.
    #[default]
    UniformRemaining,
}

#[derive(Debug, Clone, Default)]
pub struct MemitParams {
    pub value: ValueOptions,
    pub spread: ResidualSpread,
}

/// One layer's update: `Δ = R Kᵀ (C + K Kᵀ)⁻¹`.
///
/// `keys` is `[d_key, n]` (one column per request), `residuals` is
/// `[d_out, n]` with the residual fraction assigned to this layer.
pub fn solve_layer_update(
    cov: &KeyCovariance,
    keys: &Array2<f64>,
    residuals: &Array2<f64>,
) -> Result<Array2<f64>> {
    let d_key = keys.nrows();
    if cov.matrix.nrows() != d_key {
        return Err(Error::input(format!(
            "covariance is {}x{} but keys have dimension {}",
            cov.matrix.nrows(),
            cov.matrix.ncols(),
            d_key
        )));
    }
    if residuals.ncols() != keys.ncols() {
        return Err(Error::input("one residual column per key column required"));
    }
    let system = &cov.matrix + &keys.dot(&keys.t());
    let factor = cholesky(&system.view()).map_err(|_| {
        Error::Singularity("(C + K Kᵀ) is singular; batched update rejected".into())
    })?;
    let solved = cholesky_solve_multi(&factor, &keys.view()); // (C + KKᵀ)⁻¹ K
    Ok(residuals.dot(&solved.t()))
}

/// Applies a batched edit of `requests` across `layers` (ascending order,
/// one covariance per layer).
///
/// Target values are optimized once at the last layer of the range; each
/// earlier layer absorbs an equal fraction of the residual still missing at
/// that point. After all layers the edited prompts' greedy continuations are
/// re-checked and the match fraction reported.
pub fn memit_edit(
    model: &mut ToyModel,
    requests: &[EditRequest],
    layers: &[usize],
    covs: &[KeyCovariance],
    params: &MemitParams,
) -> Result<EditOutcome> {
    if requests.is_empty() {
        return Err(Error::input("memit needs at least one edit request"));
    }
    if layers.is_empty() {
        return Err(Error::input("memit needs a non-empty layer list"));
    }
    if !layers.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::input("memit layers must be strictly ascending"));
    }
    if *layers.last().expect("non-empty") >= model.config.n_layers {
        return Err(Error::input(format!(
            "layer {} out of range ({} layers)",
            layers.last().expect("non-empty"),
            model.config.n_layers
        )));
    }
    if covs.len() != layers.len() {
        return Err(Error::input(format!(
            "{} covariances supplied for {} layers",
            covs.len(),
            layers.len()
        )));
    }
    for (cov, &layer) in covs.iter().zip(layers) {
        if cov.layer != layer {
            return Err(Error::input(format!(
                "covariance estimated at layer {} paired with layer {}",
                cov.layer, layer
            )));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for request in requests {
        request.validate()?;
        if !seen.insert(request.id()) {
            return Err(Error::input(format!("duplicate request id {}", request.id())));
        }
    }
    let ResidualSpread::UniformRemaining = params.spread;

    let target_layer = *layers.last().expect("non-empty");
    let targets: Vec<String> = requests.iter().map(|r| r.target_text()).collect();

    // v* per request, optimized against the unedited model
    let mut desired = Vec::with_capacity(requests.len());
    for (request, target) in requests.iter().zip(&targets) {
        let fit = optimize_value(
            model,
            &request.prompt,
            request.subject_span,
            target,
            target_layer,
            &params.value,
        )?;
        desired.push(fit.vector);
    }
    let pre_score = mean_target_probability(model, requests, &targets)?;

    let mut norms = Vec::with_capacity(layers.len());
    for (idx, &layer) in layers.iter().enumerate() {
        let remaining = (layers.len() - idx) as f64;
        let (keys, currents) = key_and_current_values(model, requests, layer, target_layer)?;
        let mut residuals = Array2::<f64>::zeros((model.config.d_model, requests.len()));
        for (i, (want, have)) in desired.iter().zip(&currents).enumerate() {
            let r = (want - have) / remaining;
            residuals.column_mut(i).assign(&r);
        }
        let delta = solve_layer_update(&covs[idx], &keys, &residuals)?;
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("batched update is not finite".into()));
        }
        norms.push(frobenius_norm(&delta.view()));
        model.layers[layer].mlp_out = &model.layers[layer].mlp_out + &delta;
    }

    let post_score = mean_target_probability(model, requests, &targets)?;
    let mut matched = 0usize;
    for (request, target) in requests.iter().zip(&targets) {
        let continuation = generate(model, &request.prompt, 16, GenerationMode::Greedy)?;
        if normalize_ws(&continuation) == normalize_ws(target) {
            matched += 1;
        }
    }
    let record = EditRecord {
        method: EditMethod::Memit,
        layers: layers.to_vec(),
        delta_frobenius_norms: norms,
        pre_score,
        post_score,
        timestamp_ms: EditRecord::now_ms(),
        request_ids: requests.iter().map(|r| r.id()).collect(),
    };
    record.validate()?;
    Ok(EditOutcome {
        record,
        greedy_match_fraction: matched as f64 / requests.len() as f64,
    })
}

/// Keys at `layer` and current MLP output values at `value_layer` for every
/// request's subject position, from one forward pass per request.
fn key_and_current_values(
    model: &ToyModel,
    requests: &[EditRequest],
    layer: usize,
    value_layer: usize,
) -> Result<(Array2<f64>, Vec<Array1<f64>>)> {
    let mut keys = Array2::<f64>::zeros((model.config.d_mlp, requests.len()));
    let mut currents = Vec::with_capacity(requests.len());
    for (i, request) in requests.iter().enumerate() {
        let tokens = model.vocab.encode(&request.prompt)?;
        request.subject_span.validate(tokens.len())?;
        let out = model.forward(&tokens)?;
        let pos = request.subject_span.key_position();
        keys.column_mut(i).assign(&out.tap(layer, pos).key_vector);
        currents.push(out.tap(value_layer, pos).value_vector.clone());
    }
    Ok((keys, currents))
}

fn mean_target_probability(
    model: &ToyModel,
    requests: &[EditRequest],
    targets: &[String],
) -> Result<f64> {
    let mut sum = 0.0;
    for (request, target) in requests.iter().zip(targets) {
        sum += (-target_nll(model, &request.prompt, target)?).exp();
    }
    Ok(sum / requests.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::super::rome::{mapping_error, rank_one_update};
    use super::*;
    use crate::model::TokenSpan;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn hand_instance_matches_manual_arithmetic() {
        // orthonormal keys e1, e2 in R^2, C = I: (C + KKᵀ) = 2I, Δ = R/2
        let cov = KeyCovariance::from_matrix(0, Array2::eye(2), 1, 0.0).unwrap();
        let keys = array![[1.0, 0.0], [0.0, 1.0]];
        let residuals = array![[2.0, -4.0], [6.0, 0.5]];
        let delta = solve_layer_update(&cov, &keys, &residuals).unwrap();
        let expected = residuals.mapv(|v| v / 2.0);
        for (d, e) in delta.iter().zip(expected.iter()) {
            assert!((d - e).abs() <= 1e-9, "{d} vs {e}");
        }
    }

    #[test]
    fn single_request_approaches_rank_one_as_regularizer_shrinks() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let dm = 5;
        let dk = 7;
        let w = Array2::from_shape_fn((dm, dk), |_| rng.random::<f64>() - 0.5);
        let key: Array1<f64> = (0..dk).map(|_| rng.random::<f64>() + 0.2).collect();
        let value: Array1<f64> = (0..dm).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let mut cov_matrix = Array2::<f64>::eye(dk);
        cov_matrix[[0, 1]] = 0.2;
        cov_matrix[[1, 0]] = 0.2;
        let cov = KeyCovariance::from_matrix(0, cov_matrix, 10, 0.0).unwrap();

        let (rome_w, _) = rank_one_update(&w, &key, &value, &cov).unwrap();
        let shrunk = cov.scaled(1e-9);
        let mut keys = Array2::<f64>::zeros((dk, 1));
        keys.column_mut(0).assign(&key);
        let mut residuals = Array2::<f64>::zeros((dm, 1));
        residuals.column_mut(0).assign(&(&value - &w.dot(&key)));
        let delta = solve_layer_update(&shrunk, &keys, &residuals).unwrap();
        let memit_w = &w + &delta;

        let rome_image = rome_w.dot(&key);
        let memit_image = memit_w.dot(&key);
        let diff = (&rome_image - &memit_image).iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = rome_image.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / scale <= 1e-5, "relative gap {}", diff / scale);
        assert!(mapping_error(&memit_w, &key, &value) <= 1e-5);
    }

    #[test]
    fn dimension_mismatches_are_input_errors() {
        let cov = KeyCovariance::from_matrix(0, Array2::eye(3), 1, 0.0).unwrap();
        let keys = Array2::<f64>::zeros((2, 1));
        let residuals = Array2::<f64>::zeros((2, 1));
        assert!(matches!(
            solve_layer_update(&cov, &keys, &residuals),
            Err(Error::Input(_))
        ));
    }

    fn request(prompt: &str, tail: &str) -> EditRequest {
        EditRequest::new(prompt, TokenSpan::new(0, 2), "xNeed", tail, vec![]).unwrap()
    }

    #[test]
    fn layer_and_id_preconditions() {
        let vocab = crate::tokenizer::Vocabulary::build(["a b money time"]);
        let config = crate::model::ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_mlp: 16,
            vocab_size: 16,
            max_seq_len: 8,
            seed: 0,
        };
        let mut model = ToyModel::init(config, vocab).unwrap();
        let cov = KeyCovariance::from_matrix(0, Array2::eye(16), 1, 0.0).unwrap();
        let params = MemitParams::default();

        let err = memit_edit(&mut model, &[request("a b", "money")], &[], &[], &params)
            .unwrap_err();
        assert!(matches!(err, Error::Input(_)));

        let dup = vec![request("a b", "money"), request("a b", "money")];
        let err = memit_edit(&mut model, &dup, &[0], std::slice::from_ref(&cov), &params)
            .unwrap_err();
        assert!(err.to_string().contains("duplicate"));

        let cov1 = KeyCovariance::from_matrix(1, Array2::eye(16), 1, 0.0).unwrap();
        let err = memit_edit(
            &mut model,
            &[request("a b", "money")],
            &[1, 0],
            &[cov1, cov],
            &params,
        )
        .unwrap_err();
        assert!(err.to_string().contains("ascending"));
    }
}
