//! A small decoder-only transformer with per-layer hidden-state taps.
//!
//! The model exists to be edited: the `mlp_out` matrix of a chosen layer is
//! the associative memory that the editors rewrite, and [`ToyModel::forward`]
//! exposes the key/value activations flowing through it. The architecture is
//! deliberately plain: sinusoidal positions, parameter-free RMS norms, causal
//! multi-head attention, a GELU MLP, and an untied unembedding.

mod backward;
mod checkpoint;
mod infer;
mod train;

pub use backward::Gradients;
pub use checkpoint::{load_model, save_model, MODEL_FORMAT_VERSION};
pub use infer::{
    current_value_at, generate, generate_hooked, key_at, key_at_averaged, optimize_value,
    target_nll, target_nll_hooked, value_gradient, value_loss, GenerationMode, GradientMethod,
    TokenSpan, ValueFit, ValueOptions,
};
pub use train::{train_toy, TrainReport};

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

const RMS_EPS: f64 = 1e-6;

/// Shape and seed of a toy transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, d_model 64, d_mlp 256.
    pub fn desk_default(seed: u64) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_mlp: 256,
            vocab_size: 1024,
            max_seq_len: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in counts {
            if value < 1 {
                return Err(Error::input(format!("{name} must be >= 1, got {value}")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::input(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_mlp < self.d_model {
            return Err(Error::input(format!(
                "d_mlp {} must be >= d_model {}",
                self.d_mlp, self.d_model
            )));
        }
        Ok(())
    }

    /// Default layer whose `mlp_out` is edited: the middle of the stack
    /// (first layer for a 2-layer model, so later attention can move the
    /// edited value to subsequent positions).
    pub fn default_edit_layer(&self) -> usize {
        (self.n_layers - 1) / 2
    }
}

#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn: AttentionWeights,
    /// `[d_mlp, d_model]`; produces the inner activation (the edit key).
    pub mlp_in: Array2<f64>,
    /// `[d_model, d_mlp]`; the associative memory that parameter edits rewrite.
    pub mlp_out: Array2<f64>,
}

/// Decoder-only transformer plus its word-level vocabulary.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub token_embeddings: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub unembedding: Array2<f64>,
}

/// Hidden-state snapshot at one (layer, position).
#[derive(Debug, Clone)]
pub struct LayerTap {
    pub layer_index: usize,
    pub position: usize,
    /// MLP inner activation entering `mlp_out` (`d_mlp`).
    pub key_vector: Array1<f64>,
    /// MLP output that entered the residual stream (`d_model`).
    pub value_vector: Array1<f64>,
    /// Residual stream after the layer (`d_model`).
    pub residual: Array1<f64>,
}

/// Logits plus the taps for every layer and position.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[seq_len, vocab_size]`.
    pub logits: Array2<f64>,
    taps: Vec<LayerTap>,
    seq_len: usize,
}

impl ForwardOutput {
    pub fn tap(&self, layer: usize, position: usize) -> &LayerTap {
        &self.taps[layer * self.seq_len + position]
    }

    pub fn taps(&self) -> &[LayerTap] {
        &self.taps
    }
}

/// Replaces the MLP output at chosen positions during a forward pass.
///
/// The key passed in is the MLP inner activation, so adapter-style hooks can
/// run nearest-key lookups without recomputing it.
pub trait MlpHook {
    fn override_output(
        &self,
        layer: usize,
        position: usize,
        key: ArrayView1<f64>,
        default: ArrayView1<f64>,
    ) -> Option<Array1<f64>>;
}

/// The identity hook.
pub struct NoHook;

impl MlpHook for NoHook {
    fn override_output(
        &self,
        _layer: usize,
        _position: usize,
        _key: ArrayView1<f64>,
        _default: ArrayView1<f64>,
    ) -> Option<Array1<f64>> {
        None
    }
}

/// Substitutes a fixed vector for the MLP output at one (layer, position).
pub struct SubstituteValue<'a> {
    pub layer: usize,
    pub position: usize,
    pub value: &'a Array1<f64>,
}

impl MlpHook for SubstituteValue<'_> {
    fn override_output(
        &self,
        layer: usize,
        position: usize,
        _key: ArrayView1<f64>,
        _default: ArrayView1<f64>,
    ) -> Option<Array1<f64>> {
        (layer == self.layer && position == self.position).then(|| self.value.clone())
    }
}

/// Full activation cache of one forward pass, consumed by the backward pass.
pub(crate) struct FullTrace {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerTrace>,
    pub final_in: Array2<f64>,
    pub final_normed: Array2<f64>,
    pub logits: Array2<f64>,
}

pub(crate) struct LayerTrace {
    pub x_in: Array2<f64>,
    pub normed_a: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per-head attention probabilities `[n_heads, T, T]`.
    pub probs: Array3<f64>,
    /// Concatenated head contexts before the output projection.
    pub ctx: Array2<f64>,
    pub x_mid: Array2<f64>,
    pub normed_b: Array2<f64>,
    pub pre_act: Array2<f64>,
    pub act: Array2<f64>,
    pub mlp_used: Array2<f64>,
    /// Positions whose MLP output was overridden by a hook.
    pub overridden: Vec<bool>,
    pub x_out: Array2<f64>,
}

impl ToyModel {
    /// Random initialization from the config seed.
    pub fn init(config: ModelConfig, vocab: Vocabulary) -> Result<ToyModel> {
        config.validate()?;
        if vocab.len() > config.vocab_size {
            return Err(Error::input(format!(
                "vocabulary has {} words but config.vocab_size caps it at {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut config = config;
        config.vocab_size = vocab.len();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        // residual-path projections get the usual depth scaling
        let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut mat = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng) * scale)
        };
        let d = config.d_model;
        let m = config.d_mlp;
        let v = config.vocab_size;
        let token_embeddings = mat(v, d, 1.0);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn: AttentionWeights {
                    w_q: mat(d, d, 1.0),
                    w_k: mat(d, d, 1.0),
                    w_v: mat(d, d, 1.0),
                    w_o: mat(d, d, resid_scale),
                },
                mlp_in: mat(m, d, 1.0),
                mlp_out: mat(d, m, resid_scale),
            });
        }
        let unembedding = mat(v, d, 1.0);
        Ok(ToyModel { config, vocab, token_embeddings, layers, unembedding })
    }

    /// Forward pass returning logits and taps; pure, no weight mutation.
    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardOutput> {
        self.forward_hooked(tokens, &NoHook)
    }

    pub fn forward_hooked(&self, tokens: &[u32], hook: &dyn MlpHook) -> Result<ForwardOutput> {
        let trace = self.forward_traced(tokens, hook)?;
        Ok(self.output_from_trace(trace))
    }

    fn output_from_trace(&self, trace: FullTrace) -> ForwardOutput {
        let seq_len = trace.tokens.len();
        let mut taps = Vec::with_capacity(self.config.n_layers * seq_len);
        for (layer_index, lt) in trace.layers.iter().enumerate() {
            for position in 0..seq_len {
                taps.push(LayerTap {
                    layer_index,
                    position,
                    key_vector: lt.act.row(position).to_owned(),
                    value_vector: lt.mlp_used.row(position).to_owned(),
                    residual: lt.x_out.row(position).to_owned(),
                });
            }
        }
        ForwardOutput { logits: trace.logits, taps, seq_len }
    }

    pub(crate) fn forward_traced(&self, tokens: &[u32], hook: &dyn MlpHook) -> Result<FullTrace> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::input("token sequence is empty"));
        }
        if t > self.config.max_seq_len {
            return Err(Error::input(format!(
                "sequence length {} exceeds max_seq_len {}",
                t, self.config.max_seq_len
            )));
        }
        for &id in tokens {
            if id as usize >= self.config.vocab_size {
                return Err(Error::input(format!(
                    "token id {} out of range (vocab_size {})",
                    id, self.config.vocab_size
                )));
            }
        }
        let d = self.config.d_model;
        let mut x = Array2::<f64>::zeros((t, d));
        for (pos, &tok) in tokens.iter().enumerate() {
            let emb = self.token_embeddings.row(tok as usize);
            let pe = positional_encoding(pos, d);
            for j in 0..d {
                x[[pos, j]] = emb[j] + pe[j];
            }
        }

        let mut layers = Vec::with_capacity(self.config.n_layers);
        for (layer_index, layer) in self.layers.iter().enumerate() {
            let x_in = x;
            let normed_a = rmsnorm(&x_in);
            let q = normed_a.dot(&layer.attn.w_q.t());
            let k = normed_a.dot(&layer.attn.w_k.t());
            let v = normed_a.dot(&layer.attn.w_v.t());
            let (ctx, probs) = causal_attention(&q, &k, &v, self.config.n_heads);
            let attn_out = ctx.dot(&layer.attn.w_o.t());
            let x_mid = &x_in + &attn_out;

            let normed_b = rmsnorm(&x_mid);
            let pre_act = normed_b.dot(&layer.mlp_in.t());
            let act = pre_act.mapv(gelu);
            let mlp_raw = act.dot(&layer.mlp_out.t());
            let mut mlp_used = mlp_raw;
            let mut overridden = vec![false; t];
            for pos in 0..t {
                if let Some(replacement) = hook.override_output(
                    layer_index,
                    pos,
                    act.row(pos),
                    mlp_used.row(pos),
                ) {
                    if replacement.len() != d {
                        return Err(Error::input(format!(
                            "hook replacement has dim {}, expected {}",
                            replacement.len(),
                            d
                        )));
                    }
                    mlp_used.row_mut(pos).assign(&replacement);
                    overridden[pos] = true;
                }
            }
            let x_out = &x_mid + &mlp_used;
            x = x_out.clone();
            layers.push(LayerTrace {
                x_in,
                normed_a,
                q,
                k,
                v,
                probs,
                ctx,
                x_mid,
                normed_b,
                pre_act,
                act,
                mlp_used,
                overridden,
                x_out,
            });
        }

        let final_in = x;
        let final_normed = rmsnorm(&final_in);
        let logits = final_normed.dot(&self.unembedding.t());
        Ok(FullTrace {
            tokens: tokens.to_vec(),
            layers,
            final_in,
            final_normed,
            logits,
        })
    }

    /// SHA-256 over every weight matrix, for purity and locality checks.
    pub fn weight_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |a: &Array2<f64>| {
            hasher.update((a.nrows() as u64).to_le_bytes());
            hasher.update((a.ncols() as u64).to_le_bytes());
            for v in a.iter() {
                hasher.update(v.to_le_bytes());
            }
        };
        feed(&self.token_embeddings);
        for layer in &self.layers {
            feed(&layer.attn.w_q);
            feed(&layer.attn.w_k);
            feed(&layer.attn.w_v);
            feed(&layer.attn.w_o);
            feed(&layer.mlp_in);
            feed(&layer.mlp_out);
        }
        feed(&self.unembedding);
        hex_string(&hasher.finalize())
    }

    pub fn all_weights_finite(&self) -> bool {
        self.weight_matrices().into_iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn weight_matrices(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.token_embeddings];
        for layer in &self.layers {
            out.push(&layer.attn.w_q);
            out.push(&layer.attn.w_k);
            out.push(&layer.attn.w_v);
            out.push(&layer.attn.w_o);
            out.push(&layer.mlp_in);
            out.push(&layer.mlp_out);
        }
        out.push(&self.unembedding);
        out
    }

    pub(crate) fn weight_matrices_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![&mut self.token_embeddings];
        for layer in &mut self.layers {
            out.push(&mut layer.attn.w_q);
            out.push(&mut layer.attn.w_k);
            out.push(&mut layer.attn.w_v);
            out.push(&mut layer.attn.w_o);
            out.push(&mut layer.mlp_in);
            out.push(&mut layer.mlp_out);
        }
        out.push(&mut self.unembedding);
        out
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

fn positional_encoding(pos: usize, d_model: usize) -> Array1<f64> {
    // scaled down to the same order as the token embedding init, so token
    // identity is not drowned out at the start of training
    const PE_SCALE: f64 = 0.05;
    let mut pe = Array1::<f64>::zeros(d_model);
    for i in 0..d_model / 2 {
        let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d_model as f64);
        pe[2 * i] = rate.sin() * PE_SCALE;
        pe[2 * i + 1] = rate.cos() * PE_SCALE;
    }
    pe
}

pub(crate) fn rmsnorm(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let scale = 1.0 / (ms + RMS_EPS).sqrt();
        row.mapv_inplace(|v| v * scale);
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn causal_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    n_heads: usize,
) -> (Array2<f64>, Array3<f64>) {
    let t = q.nrows();
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::<f64>::zeros((t, d));
    let mut probs = Array3::<f64>::zeros((n_heads, t, t));
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(ndarray::s![.., cols.clone()]);
        let kh = k.slice(ndarray::s![.., cols.clone()]);
        let vh = v.slice(ndarray::s![.., cols.clone()]);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|s| s * scale);
        for i in 0..t {
            // causal mask + stable softmax over positions 0..=i
            let mut row_max = f64::NEG_INFINITY;
            for j in 0..=i {
                row_max = row_max.max(scores[[i, j]]);
            }
            let mut denom = 0.0;
            for j in 0..=i {
                let e = (scores[[i, j]] - row_max).exp();
                probs[[h, i, j]] = e;
                denom += e;
            }
            for j in 0..=i {
                probs[[h, i, j]] /= denom;
            }
        }
        let ph = probs.index_axis(Axis(0), h);
        let ctx_h = ph.dot(&vh);
        ctx.slice_mut(ndarray::s![.., cols]).assign(&ctx_h);
    }
    (ctx, probs)
}

/// Row-wise stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            denom += e;
            e
        });
        row.mapv_inplace(|v| v / denom);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(seed: u64) -> ToyModel {
        let vocab = Vocabulary::build(["alice buys coffee xNeed money", "bob adopts dog xNeed patience"]);
        let config = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_mlp: 32,
            vocab_size: 64,
            max_seq_len: 16,
            seed,
        };
        ToyModel::init(config, vocab).unwrap()
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut cfg = ModelConfig::desk_default(0);
        cfg.n_heads = 3; // 64 % 3 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk_default(0);
        cfg.d_mlp = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk_default(0);
        cfg.n_layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn softmax_of_logits_sums_to_one_at_every_position() {
        let model = tiny_model(7);
        let tokens = model.vocab.encode("alice buys coffee").unwrap();
        let out = model.forward(&tokens).unwrap();
        let probs = softmax_rows(&out.logits);
        for row in probs.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-6, "softmax sum {sum}");
        }
    }

    #[test]
    fn single_token_input_yields_one_tap_per_layer() {
        let model = tiny_model(1);
        let tokens = model.vocab.encode("alice").unwrap();
        let out = model.forward(&tokens).unwrap();
        assert_eq!(out.taps().len(), model.config.n_layers);
        assert_eq!(out.tap(0, 0).key_vector.len(), model.config.d_mlp);
        assert_eq!(out.tap(1, 0).value_vector.len(), model.config.d_model);
    }

    #[test]
    fn forward_is_deterministic_and_pure() {
        let model = tiny_model(3);
        let tokens = model.vocab.encode("bob adopts dog").unwrap();
        let before = model.weight_hash();
        let a = model.forward(&tokens).unwrap();
        let b = model.forward(&tokens).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(model.weight_hash(), before);
    }

    #[test]
    fn out_of_range_token_is_an_input_error() {
        let model = tiny_model(2);
        let bad = vec![model.config.vocab_size as u32];
        assert!(model.forward(&bad).is_err());
    }

    #[test]
    fn substitution_hook_changes_only_downstream_logits() {
        let model = tiny_model(5);
        let tokens = model.vocab.encode("alice buys coffee").unwrap();
        let base = model.forward(&tokens).unwrap();
        let value = Array1::<f64>::from_elem(model.config.d_model, 0.5);
        let hook = SubstituteValue { layer: 0, position: 1, value: &value };
        let subbed = model.forward_hooked(&tokens, &hook).unwrap();
        assert_eq!(subbed.tap(0, 1).value_vector, value);
        // position 0 logits are causally upstream of the change
        assert_eq!(base.logits.row(0), subbed.logits.row(0));
        assert_ne!(base.logits.row(1), subbed.logits.row(1));
    }

    #[test]
    fn same_seed_gives_identical_init() {
        let a = tiny_model(11);
        let b = tiny_model(11);
        assert_eq!(a.weight_hash(), b.weight_hash());
        assert_ne!(a.weight_hash(), tiny_model(12).weight_hash());
    }
}
