//! Training loop: per-sentence Adam on next-token cross-entropy.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::backward::{backward, nll_and_dlogits, BackwardRequest, Gradients};
use super::{ModelConfig, NoHook, ToyModel};
use crate::error::{Error, Result};
use crate::tokenizer::{Vocabulary, EOS_ID};

/// Training summary returned alongside the model.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    /// Fraction of corpus sentences that greedy decoding reproduces exactly
    /// from any prefix (equivalently: every next-token argmax is correct).
    pub memorization_accuracy: f64,
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &ToyModel, lr: f64) -> Adam {
        let shapes: Vec<Array2<f64>> = model
            .weight_matrices()
            .into_iter()
            .map(|w| Array2::zeros(w.raw_dim()))
            .collect();
        Adam { m: shapes.clone(), v: shapes, t: 0, lr }
    }

    fn step(&mut self, model: &mut ToyModel, grads: &mut Gradients) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for ((w, g), (m, v)) in model
            .weight_matrices_mut()
            .into_iter()
            .zip(grads.matrices_mut())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(w)
                .and(&*g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                    *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
                });
        }
    }
}

/// Trains a fresh toy model to memorize `corpus`.
///
/// Deterministic for a fixed (corpus, config, epochs, learning_rate, seed):
/// initialization and the per-epoch shuffle both derive from `config.seed`.
pub fn train_toy(
    corpus: &[String],
    config: &ModelConfig,
    epochs: usize,
    learning_rate: f64,
) -> Result<(ToyModel, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::input("training corpus is empty"));
    }
    let vocab = Vocabulary::build(corpus.iter().map(|s| s.as_str()));
    let mut model = ToyModel::init(config.clone(), vocab)?;

    let mut sentences = Vec::with_capacity(corpus.len());
    for line in corpus {
        let mut tokens = model.vocab.encode(line)?;
        if tokens.is_empty() {
            return Err(Error::input("corpus contains a blank sentence"));
        }
        tokens.push(EOS_ID);
        if tokens.len() > config.max_seq_len {
            return Err(Error::input(format!(
                "sentence '{}' has {} tokens, exceeding max_seq_len {}",
                line,
                tokens.len(),
                config.max_seq_len
            )));
        }
        sentences.push(tokens);
    }

    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed ^ 0x7261696e);
    let mut adam = Adam::new(&model, learning_rate);
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let tokens = &sentences[idx];
            let trace = model.forward_traced(tokens, &NoHook)?;
            let targets: Vec<(usize, u32)> =
                (0..tokens.len() - 1).map(|p| (p, tokens[p + 1])).collect();
            let (loss, d_logits) = nll_and_dlogits(&trace.logits, &targets);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            let result = backward(
                &model,
                &trace,
                &d_logits,
                BackwardRequest { weight_grads: true, capture_value_grad: None },
            );
            adam.step(&mut model, &mut result.grads.expect("requested"));
            epoch_loss += loss;
        }
        epoch_losses.push(epoch_loss / sentences.len() as f64);
    }

    let memorization_accuracy = memorization_accuracy(&model, &sentences)?;
    let final_loss = epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok((model, TrainReport { epoch_losses, final_loss, memorization_accuracy }))
}

/// Fraction of sentences whose every next-token argmax is the real token.
fn memorization_accuracy(model: &ToyModel, sentences: &[Vec<u32>]) -> Result<f64> {
    let mut memorized = 0usize;
    for tokens in sentences {
        let out = model.forward(tokens)?;
        let ok = (0..tokens.len() - 1).all(|p| {
            let row = out.logits.row(p);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i as u32)
                .expect("non-empty vocab");
            argmax == tokens[p + 1]
        });
        if ok {
            memorized += 1;
        }
    }
    Ok(memorized as f64 / sentences.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fact_corpus(n: usize) -> Vec<String> {
        // each sentence is uniquely determined by its first token, so full
        // memorization is actually attainable
        let tails = ["money", "rope", "paint", "grain"];
        (0..n)
            .map(|i| format!("name{:02} buys obj{:02} xNeed {}", i, i, tails[i % tails.len()]))
            .collect()
    }


    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_mlp: 64,
            vocab_size: 256,
            max_seq_len: 16,
            seed,
        }
    }

    #[test]
    fn empty_corpus_is_an_input_error() {
        let err = train_toy(&[], &tiny_config(0), 1, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn same_corpus_and_seed_give_bitwise_identical_weights() {
        let corpus = fact_corpus(6);
        let (a, _) = train_toy(&corpus, &tiny_config(9), 3, 1e-3).unwrap();
        let (b, _) = train_toy(&corpus, &tiny_config(9), 3, 1e-3).unwrap();
        assert_eq!(a.weight_hash(), b.weight_hash());
    }

    #[test]
    fn small_corpus_is_memorized() {
        let corpus = fact_corpus(12);
        let (model, report) = train_toy(&corpus, &tiny_config(4), 60, 2e-3).unwrap();
        assert!(
            report.memorization_accuracy >= 0.9,
            "memorization {}",
            report.memorization_accuracy
        );
        assert!(model.all_weights_finite());
        assert!(report.final_loss < report.epoch_losses[0]);
    }
}
