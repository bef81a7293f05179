//! Weight checkpoints: one JSON document with config, row-major weight
//! arrays, and the vocabulary list.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AttentionWeights, LayerWeights, ModelConfig, ToyModel};
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

pub const MODEL_FORMAT_VERSION: &str = "conke-model-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: String,
    config: ModelConfig,
    vocabulary: Vec<String>,
    token_embeddings: Vec<f64>,
    layers: Vec<LayerDoc>,
    unembedding: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    w_q: Vec<f64>,
    w_k: Vec<f64>,
    w_v: Vec<f64>,
    w_o: Vec<f64>,
    mlp_in: Vec<f64>,
    mlp_out: Vec<f64>,
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn unflat(data: Vec<f64>, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Format(format!(
            "{} has {} values, expected {}x{}",
            what,
            data.len(),
            rows,
            cols
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{} contains non-finite values", what)));
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Format(format!("{}: {}", what, e)))
}

pub fn save_model(model: &ToyModel, path: impl AsRef<Path>) -> Result<()> {
    let doc = CheckpointDoc {
        format_version: MODEL_FORMAT_VERSION.to_string(),
        config: model.config.clone(),
        vocabulary: model.vocab.words().to_vec(),
        token_embeddings: flat(&model.token_embeddings),
        layers: model
            .layers
            .iter()
            .map(|l| LayerDoc {
                w_q: flat(&l.attn.w_q),
                w_k: flat(&l.attn.w_k),
                w_v: flat(&l.attn.w_v),
                w_o: flat(&l.attn.w_o),
                mlp_in: flat(&l.mlp_in),
                mlp_out: flat(&l.mlp_out),
            })
            .collect(),
        unembedding: flat(&model.unembedding),
    };
    let json = serde_json::to_string(&doc).expect("checkpoint serializes");
    fs::write(path.as_ref(), json)
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ToyModel> {
    let text = fs::read_to_string(path.as_ref())
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    let doc: CheckpointDoc = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("checkpoint parse failed: {}", e)))?;
    if doc.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version '{}' does not match '{}'",
            doc.format_version, MODEL_FORMAT_VERSION
        )));
    }
    doc.config.validate()?;
    if doc.vocabulary.len() != doc.config.vocab_size {
        return Err(Error::Format(format!(
            "vocabulary has {} words but config says vocab_size {}",
            doc.vocabulary.len(),
            doc.config.vocab_size
        )));
    }
    if doc.layers.len() != doc.config.n_layers {
        return Err(Error::Format(format!(
            "checkpoint has {} layers but config says {}",
            doc.layers.len(),
            doc.config.n_layers
        )));
    }
    let d = doc.config.d_model;
    let m = doc.config.d_mlp;
    let v = doc.config.vocab_size;
    let vocab = Vocabulary::from_words(doc.vocabulary)?;

    let mut layers = Vec::with_capacity(doc.layers.len());
    for (i, l) in doc.layers.into_iter().enumerate() {
        layers.push(LayerWeights {
            attn: AttentionWeights {
                w_q: unflat(l.w_q, d, d, &format!("layer {i} w_q"))?,
                w_k: unflat(l.w_k, d, d, &format!("layer {i} w_k"))?,
                w_v: unflat(l.w_v, d, d, &format!("layer {i} w_v"))?,
                w_o: unflat(l.w_o, d, d, &format!("layer {i} w_o"))?,
            },
            mlp_in: unflat(l.mlp_in, m, d, &format!("layer {i} mlp_in"))?,
            mlp_out: unflat(l.mlp_out, d, m, &format!("layer {i} mlp_out"))?,
        });
    }
    Ok(ToyModel {
        config: doc.config,
        vocab,
        token_embeddings: unflat(doc.token_embeddings, v, d, "token_embeddings")?,
        layers,
        unembedding: unflat(doc.unembedding, v, d, "unembedding")?,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{ModelConfig, ToyModel};
    use super::*;
    use crate::tokenizer::Vocabulary;

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let vocab = Vocabulary::build(["mira buys kava xNeed coin"]);
        let config = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_mlp: 16,
            vocab_size: 16,
            max_seq_len: 8,
            seed: 5,
        };
        let model = ToyModel::init(config, vocab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model.weight_hash(), loaded.weight_hash());
        assert_eq!(model.vocab, loaded.vocab);
        assert_eq!(model.config, loaded.config);
        // loaded tokenizer still works
        assert!(loaded.vocab.encode("mira buys kava").is_ok());
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        std::fs::write(
            &path,
            r#"{"format_version":"conke-model-v0","config":{"n_layers":1,"d_model":2,"n_heads":1,"d_mlp":2,"vocab_size":1,"max_seq_len":2,"seed":0},"vocabulary":["</s>"],"token_embeddings":[0.0,0.0],"layers":[],"unembedding":[0.0,0.0]}"#,
        )
        .unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format(_))));
    }
}
