//! Second-moment statistics of MLP keys, used to localize parameter edits.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, cholesky};
use crate::model::ToyModel;

const SYMMETRY_TOL: f64 = 1e-9;

/// `C = (1/N) Σ k kᵀ + ridge·I` over sampled keys at one layer.
#[derive(Debug, Clone)]
pub struct KeyCovariance {
    pub layer: usize,
    pub matrix: Array2<f64>,
    pub sample_count: usize,
    pub ridge: f64,
}

impl KeyCovariance {
    /// Builds the statistic from explicit key vectors.
    pub fn from_keys(layer: usize, keys: &[Array1<f64>], ridge: f64) -> Result<KeyCovariance> {
        if keys.is_empty() {
            return Err(Error::input("cannot estimate covariance from zero keys"));
        }
        if ridge < 0.0 {
            return Err(Error::input(format!("ridge must be >= 0, got {ridge}")));
        }
        let dim = keys[0].len();
        let mut matrix = Array2::<f64>::zeros((dim, dim));
        for key in keys {
            if key.len() != dim {
                return Err(Error::input("covariance keys have inconsistent dimensions"));
            }
            if key.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("covariance key contains non-finite values".into()));
            }
            // accumulate k kᵀ symmetrically
            for i in 0..dim {
                let ki = key[i];
                for j in 0..dim {
                    matrix[[i, j]] += ki * key[j];
                }
            }
        }
        let inv_n = 1.0 / keys.len() as f64;
        matrix.mapv_inplace(|v| v * inv_n);
        for i in 0..dim {
            matrix[[i, i]] += ridge;
        }
        let cov = KeyCovariance { layer, matrix, sample_count: keys.len(), ridge };
        cov.validate()?;
        Ok(cov)
    }

    /// Wraps an explicit matrix (used by tests and the regularizer-shrink
    /// comparison); still enforces symmetry.
    pub fn from_matrix(
        layer: usize,
        matrix: Array2<f64>,
        sample_count: usize,
        ridge: f64,
    ) -> Result<KeyCovariance> {
        let cov = KeyCovariance { layer, matrix, sample_count, ridge };
        cov.validate()?;
        Ok(cov)
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrix.nrows() != self.matrix.ncols() {
            return Err(Error::input("covariance matrix must be square"));
        }
        let skew = asymmetry(&self.matrix.view());
        if skew > SYMMETRY_TOL {
            return Err(Error::Numeric(format!(
                "covariance asymmetry {} exceeds {}",
                skew, SYMMETRY_TOL
            )));
        }
        Ok(())
    }

    /// Lower Cholesky factor; succeeding is the positive-definiteness check.
    pub fn factor(&self) -> Result<Array2<f64>> {
        cholesky(&self.matrix.view())
    }

    /// Same statistic with the matrix scaled by `gamma` (shrinking the
    /// regularizer relative to the batch term).
    pub fn scaled(&self, gamma: f64) -> KeyCovariance {
        KeyCovariance {
            layer: self.layer,
            matrix: self.matrix.mapv(|v| v * gamma),
            sample_count: self.sample_count,
            ridge: self.ridge * gamma,
        }
    }
}

/// Estimates the key covariance at `layer` from the keys of every token of
/// every prompt.
pub fn estimate_covariance(
    model: &ToyModel,
    prompts: &[String],
    layer: usize,
    ridge: f64,
) -> Result<KeyCovariance> {
    if prompts.is_empty() {
        return Err(Error::input("cannot estimate covariance from an empty prompt list"));
    }
    if layer >= model.config.n_layers {
        return Err(Error::input(format!(
            "layer {} out of range ({} layers)",
            layer, model.config.n_layers
        )));
    }
    let mut keys = Vec::new();
    for prompt in prompts {
        let tokens = model.vocab.encode(prompt)?;
        if tokens.is_empty() {
            continue;
        }
        let out = model.forward(&tokens)?;
        for pos in 0..tokens.len() {
            keys.push(out.tap(layer, pos).key_vector.clone());
        }
    }
    KeyCovariance::from_keys(layer, &keys, ridge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::Vocabulary;
    use ndarray::array;
    use rand::Rng;

    fn basis(dim: usize, i: usize) -> Array1<f64> {
        let mut v = Array1::<f64>::zeros(dim);
        v[i] = 1.0;
        v
    }

    #[test]
    fn two_basis_keys_give_half_diagonal() {
        let keys = vec![basis(4, 0), basis(4, 1)];
        let cov = KeyCovariance::from_keys(0, &keys, 0.0).unwrap();
        let expected = array![
            [0.5, 0.0, 0.0, 0.0],
            [0.0, 0.5, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0]
        ];
        assert_eq!(cov.matrix, expected);
        assert_eq!(cov.sample_count, 2);
    }

    #[test]
    fn ridge_shifts_every_rayleigh_quotient() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let keys: Vec<Array1<f64>> = (0..5)
            .map(|_| (0..6).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let cov = KeyCovariance::from_keys(0, &keys, 0.1).unwrap();
        for _ in 0..20 {
            let u: Array1<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
            let norm2: f64 = u.iter().map(|v| v * v).sum();
            let quad = u.dot(&cov.matrix.dot(&u));
            assert!(quad / norm2 >= 0.1 - 1e-9, "rayleigh quotient {} below ridge", quad / norm2);
        }
        // SPD: factorization succeeds
        cov.factor().unwrap();
    }

    #[test]
    fn construction_is_symmetric() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        let keys: Vec<Array1<f64>> = (0..7)
            .map(|_| (0..5).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let cov = KeyCovariance::from_keys(1, &keys, 0.01).unwrap();
        assert!(asymmetry(&cov.matrix.view()) <= 1e-9);
    }

    #[test]
    fn empty_prompt_list_is_an_input_error() {
        let vocab = Vocabulary::build(["a b"]);
        let config = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_mlp: 16,
            vocab_size: 8,
            max_seq_len: 8,
            seed: 0,
        };
        let model = ToyModel::init(config, vocab).unwrap();
        assert!(estimate_covariance(&model, &[], 0, 0.01).is_err());
    }

    #[test]
    fn estimate_counts_keys_of_all_prompt_tokens() {
        let vocab = Vocabulary::build(["a b c"]);
        let config = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_mlp: 16,
            vocab_size: 8,
            max_seq_len: 8,
            seed: 1,
        };
        let model = ToyModel::init(config, vocab).unwrap();
        let prompts = vec!["a b c".to_string(), "c a".to_string()];
        let cov = estimate_covariance(&model, &prompts, 0, 0.01).unwrap();
        assert_eq!(cov.sample_count, 5);
        assert_eq!(cov.matrix.nrows(), 16);
    }
}
