//! Manual backward pass through the toy transformer.
//!
//! One implementation serves two callers: training (weight gradients) and
//! value optimization (gradient with respect to a substituted MLP output).

use ndarray::{Array1, Array2, Axis};

use super::{gelu_derivative, FullTrace, ToyModel, RMS_EPS};

/// Per-weight gradients, in the same order as the model's matrices.
pub struct Gradients {
    pub token_embeddings: Array2<f64>,
    pub layers: Vec<LayerGradients>,
    pub unembedding: Array2<f64>,
}

pub struct LayerGradients {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub mlp_in: Array2<f64>,
    pub mlp_out: Array2<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &ToyModel) -> Gradients {
        Gradients {
            token_embeddings: Array2::zeros(model.token_embeddings.raw_dim()),
            layers: model
                .layers
                .iter()
                .map(|l| LayerGradients {
                    w_q: Array2::zeros(l.attn.w_q.raw_dim()),
                    w_k: Array2::zeros(l.attn.w_k.raw_dim()),
                    w_v: Array2::zeros(l.attn.w_v.raw_dim()),
                    w_o: Array2::zeros(l.attn.w_o.raw_dim()),
                    mlp_in: Array2::zeros(l.mlp_in.raw_dim()),
                    mlp_out: Array2::zeros(l.mlp_out.raw_dim()),
                })
                .collect(),
            unembedding: Array2::zeros(model.unembedding.raw_dim()),
        }
    }

    pub(crate) fn matrices_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![&mut self.token_embeddings];
        for layer in &mut self.layers {
            out.push(&mut layer.w_q);
            out.push(&mut layer.w_k);
            out.push(&mut layer.w_v);
            out.push(&mut layer.w_o);
            out.push(&mut layer.mlp_in);
            out.push(&mut layer.mlp_out);
        }
        out.push(&mut self.unembedding);
        out
    }
}

/// What the backward pass should produce.
pub(crate) struct BackwardRequest {
    /// Accumulate weight gradients (training).
    pub weight_grads: bool,
    /// Capture `dL/d(mlp output)` at this (layer, position) and stop there.
    pub capture_value_grad: Option<(usize, usize)>,
}

pub(crate) struct BackwardResult {
    pub grads: Option<Gradients>,
    pub value_grad: Option<Array1<f64>>,
}

/// Backpropagates `d_logits` through the traced forward pass.
pub(crate) fn backward(
    model: &ToyModel,
    trace: &FullTrace,
    d_logits: &Array2<f64>,
    request: BackwardRequest,
) -> BackwardResult {
    let t = trace.tokens.len();
    let n_heads = model.config.n_heads;
    let dh = model.config.d_model / n_heads;
    let mut grads = request.weight_grads.then(|| Gradients::zeros_like(model));
    let mut value_grad = None;

    // unembedding: logits = final_normed . U^T
    if let Some(g) = grads.as_mut() {
        g.unembedding += &d_logits.t().dot(&trace.final_normed);
    }
    let d_final_normed = d_logits.dot(&model.unembedding);
    let mut d_x = rmsnorm_backward(&trace.final_in, &d_final_normed);

    for layer_index in (0..model.config.n_layers).rev() {
        let lt = &trace.layers[layer_index];
        let lw = &model.layers[layer_index];
        // x_out = x_mid + mlp_used
        let mut d_mlp_used = d_x.clone();
        if let Some((cap_layer, cap_pos)) = request.capture_value_grad {
            if cap_layer == layer_index {
                value_grad = Some(d_mlp_used.row(cap_pos).to_owned());
                if !request.weight_grads {
                    return BackwardResult { grads: None, value_grad };
                }
            }
        }
        // Overridden positions took their MLP output from the hook, not the
        // weights; no gradient flows into the MLP there.
        for (pos, &over) in lt.overridden.iter().enumerate() {
            if over {
                d_mlp_used.row_mut(pos).fill(0.0);
            }
        }
        let d_act = d_mlp_used.dot(&lw.mlp_out);
        if let Some(g) = grads.as_mut() {
            g.layers[layer_index].mlp_out += &d_mlp_used.t().dot(&lt.act);
        }
        let mut d_pre_act = d_act;
        ndarray::Zip::from(&mut d_pre_act)
            .and(&lt.pre_act)
            .for_each(|g, &x| *g *= gelu_derivative(x));
        let d_normed_b = d_pre_act.dot(&lw.mlp_in);
        if let Some(g) = grads.as_mut() {
            g.layers[layer_index].mlp_in += &d_pre_act.t().dot(&lt.normed_b);
        }
        // x_mid receives the residual path plus the MLP-norm path
        let mut d_x_mid = &d_x + &rmsnorm_backward(&lt.x_mid, &d_normed_b);

        // attention: x_mid = x_in + ctx . W_o^T
        let d_attn_out = d_x_mid.clone();
        let d_ctx = d_attn_out.dot(&lw.attn.w_o);
        if let Some(g) = grads.as_mut() {
            g.layers[layer_index].w_o += &d_attn_out.t().dot(&lt.ctx);
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut d_q = Array2::<f64>::zeros((t, model.config.d_model));
        let mut d_k = Array2::<f64>::zeros((t, model.config.d_model));
        let mut d_v = Array2::<f64>::zeros((t, model.config.d_model));
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = lt.q.slice(ndarray::s![.., cols.clone()]);
            let kh = lt.k.slice(ndarray::s![.., cols.clone()]);
            let vh = lt.v.slice(ndarray::s![.., cols.clone()]);
            let ph = lt.probs.index_axis(Axis(0), h);
            let d_ctx_h = d_ctx.slice(ndarray::s![.., cols.clone()]);
            let d_p = d_ctx_h.dot(&vh.t());
            let d_v_h = ph.t().dot(&d_ctx_h);
            // softmax backward with the causal mask baked into p (p=0 above diag)
            let mut d_s = Array2::<f64>::zeros((t, t));
            for i in 0..t {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += d_p[[i, j]] * ph[[i, j]];
                }
                for j in 0..=i {
                    d_s[[i, j]] = ph[[i, j]] * (d_p[[i, j]] - dot);
                }
            }
            let d_q_h = d_s.dot(&kh).mapv(|v| v * scale);
            let d_k_h = d_s.t().dot(&qh).mapv(|v| v * scale);
            d_q.slice_mut(ndarray::s![.., cols.clone()]).assign(&d_q_h);
            d_k.slice_mut(ndarray::s![.., cols.clone()]).assign(&d_k_h);
            d_v.slice_mut(ndarray::s![.., cols]).assign(&d_v_h);
        }
        let d_normed_a = d_q.dot(&lw.attn.w_q) + d_k.dot(&lw.attn.w_k) + d_v.dot(&lw.attn.w_v);
        if let Some(g) = grads.as_mut() {
            g.layers[layer_index].w_q += &d_q.t().dot(&lt.normed_a);
            g.layers[layer_index].w_k += &d_k.t().dot(&lt.normed_a);
            g.layers[layer_index].w_v += &d_v.t().dot(&lt.normed_a);
        }
        d_x_mid += &rmsnorm_backward(&lt.x_in, &d_normed_a);
        d_x = d_x_mid;
    }

    if let Some(g) = grads.as_mut() {
        for (pos, &tok) in trace.tokens.iter().enumerate() {
            let mut row = g.token_embeddings.row_mut(tok as usize);
            row += &d_x.row(pos);
        }
    }
    BackwardResult { grads, value_grad }
}

fn rmsnorm_backward(x: &Array2<f64>, d_y: &Array2<f64>) -> Array2<f64> {
    let n = x.ncols() as f64;
    let mut d_x = Array2::<f64>::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let xr = x.row(i);
        let gr = d_y.row(i);
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / n;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        let gx: f64 = gr.iter().zip(xr.iter()).map(|(g, x)| g * x).sum();
        let s3_over_n = s * s * s * gx / n;
        for j in 0..x.ncols() {
            d_x[[i, j]] = s * gr[j] - xr[j] * s3_over_n;
        }
    }
    d_x
}

/// Mean next-token cross-entropy at selected positions, plus its logit
/// gradient. `targets` pairs the position whose logits make the prediction
/// with the token id expected there.
pub(crate) fn nll_and_dlogits(
    logits: &Array2<f64>,
    targets: &[(usize, u32)],
) -> (f64, Array2<f64>) {
    assert!(!targets.is_empty());
    let probs = super::softmax_rows(logits);
    let inv = 1.0 / targets.len() as f64;
    let mut d_logits = Array2::<f64>::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for &(pos, tok) in targets {
        let p = probs[[pos, tok as usize]].max(f64::MIN_POSITIVE);
        loss -= p.ln();
        for v in 0..logits.ncols() {
            d_logits[[pos, v]] += probs[[pos, v]] * inv;
        }
        d_logits[[pos, tok as usize]] -= inv;
    }
    (loss * inv, d_logits)
}

#[cfg(test)]
mod tests {
    use super::super::{ModelConfig, NoHook, ToyModel};
    use super::*;
    use crate::tokenizer::Vocabulary;

    fn tiny_model(seed: u64) -> ToyModel {
        let vocab = Vocabulary::build(["a b c d e", "c d a b e"]);
        let config = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_mlp: 16,
            vocab_size: 16,
            max_seq_len: 8,
            seed,
        };
        ToyModel::init(config, vocab).unwrap()
    }

    fn training_loss(model: &ToyModel, tokens: &[u32]) -> f64 {
        let trace = model.forward_traced(tokens, &NoHook).unwrap();
        let targets: Vec<(usize, u32)> =
            (0..tokens.len() - 1).map(|p| (p, tokens[p + 1])).collect();
        nll_and_dlogits(&trace.logits, &targets).0
    }

    /// Central-difference check of every weight gradient on a tiny model.
    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut model = tiny_model(42);
        let tokens = model.vocab.encode("a b c d").unwrap();
        let targets: Vec<(usize, u32)> =
            (0..tokens.len() - 1).map(|p| (p, tokens[p + 1])).collect();
        let trace = model.forward_traced(&tokens, &NoHook).unwrap();
        let (_, d_logits) = nll_and_dlogits(&trace.logits, &targets);
        let result = backward(
            &model,
            &trace,
            &d_logits,
            BackwardRequest { weight_grads: true, capture_value_grad: None },
        );
        let grads = result.grads.unwrap();

        let h = 1e-5;
        // probe a few entries in every matrix kind
        let probes: Vec<(usize, usize, usize)> = vec![
            (0, 0, 0),  // embeddings (row of token 'a'... token ids vary; entry 0,0 is EOS row)
            (1, 2, 3),  // w_q layer 0
            (4, 1, 1),  // w_o layer 0 (index into flattened list below)
            (5, 3, 2),  // mlp_in layer 0
            (6, 2, 7),  // mlp_out layer 0
            (12, 4, 5), // mlp_out layer 1
            (13, 3, 3), // unembedding
        ];
        // flattened matrix order mirrors weight_matrices()
        for (mat_idx, r, c) in probes {
            let analytic = {
                let mut gmats: Vec<&Array2<f64>> = vec![&grads.token_embeddings];
                for l in &grads.layers {
                    gmats.push(&l.w_q);
                    gmats.push(&l.w_k);
                    gmats.push(&l.w_v);
                    gmats.push(&l.w_o);
                    gmats.push(&l.mlp_in);
                    gmats.push(&l.mlp_out);
                }
                gmats.push(&grads.unembedding);
                gmats[mat_idx][[r, c]]
            };
            let orig = model.weight_matrices()[mat_idx][[r, c]];
            model.weight_matrices_mut()[mat_idx][[r, c]] = orig + h;
            let up = training_loss(&model, &tokens);
            model.weight_matrices_mut()[mat_idx][[r, c]] = orig - h;
            let down = training_loss(&model, &tokens);
            model.weight_matrices_mut()[mat_idx][[r, c]] = orig;
            let numeric = (up - down) / (2.0 * h);
            // absolute floor keeps FD truncation noise from failing near-zero entries
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom < 1e-3,
                "matrix {mat_idx} entry ({r},{c}): analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn nll_gradient_is_softmax_minus_onehot() {
        let logits = ndarray::array![[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]];
        let (_, d) = nll_and_dlogits(&logits, &[(0, 1)]);
        let probs = super::super::softmax_rows(&logits);
        assert!((d[[0, 0]] - probs[[0, 0]]).abs() < 1e-12);
        assert!((d[[0, 1]] - (probs[[0, 1]] - 1.0)).abs() < 1e-12);
        assert_eq!(d[[1, 0]], 0.0);
    }
}
