//! Pipeline configuration: a flat key-value TOML document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conceptualizer::{ConceptBackend, LexiconBackend, LlmBackend};
use crate::editors::EditMethod;
use crate::error::{Error, Result};
use crate::model::{GradientMethod, ValueOptions};
use crate::verifier::{HttpVerifier, MockVerifier, Threshold, VerifierBackend};

fn default_threshold() -> f64 {
    0.5
}
fn default_k_abs() -> usize {
    3
}
fn default_k_inst() -> usize {
    5
}
fn default_ridge() -> f64 {
    1e-2
}
fn default_value_steps() -> usize {
    20
}
fn default_value_step_size() -> f64 {
    0.5
}
fn default_fd_step() -> f64 {
    1e-4
}
fn default_gradient() -> String {
    "finite-difference".to_string()
}
fn default_init_radius() -> f64 {
    1.0
}
fn default_template() -> String {
    "{head}".to_string()
}
fn default_max_new() -> usize {
    8
}
fn default_probe_extra() -> usize {
    8
}
fn default_verifier() -> String {
    "mock".to_string()
}
fn default_method() -> String {
    "memit".to_string()
}
fn default_concept_backend() -> String {
    "lexicon".to_string()
}
fn default_true() -> bool {
    true
}

/// Flat pipeline configuration; every key has a default so partial TOML
/// documents load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_method")]
    pub edit_method: String,
    /// Layers edited by parameter methods; empty means the model's default
    /// middle layer. The adapter method uses the first entry.
    #[serde(default)]
    pub edit_layers: Vec<usize>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_k_abs")]
    pub k_abs: usize,
    #[serde(default = "default_k_inst")]
    pub k_inst: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub conceptualization_enabled: bool,
    #[serde(default = "default_ridge")]
    pub covariance_ridge: f64,
    #[serde(default = "default_value_steps")]
    pub value_steps: usize,
    #[serde(default = "default_value_step_size")]
    pub value_step_size: f64,
    #[serde(default = "default_gradient")]
    pub value_gradient: String,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_init_radius")]
    pub init_radius: f64,
    #[serde(default = "default_template")]
    pub generation_template: String,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    /// 0 applies all edits as one batch.
    #[serde(default)]
    pub edit_batch_size: usize,
    #[serde(default = "default_probe_extra")]
    pub probe_extra: usize,
    #[serde(default = "default_verifier")]
    pub verifier: String,
    #[serde(default)]
    pub verifier_url: String,
    #[serde(default)]
    pub mock_rules_path: String,
    #[serde(default)]
    pub mock_salt: u64,
    #[serde(default = "default_concept_backend")]
    pub concept_backend: String,
    #[serde(default)]
    pub lexicon_path: String,
    #[serde(default)]
    pub llm_url: String,
    #[serde(default)]
    pub audit_log_path: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

impl PipelineConfig {
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        let config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| Error::Format(format!("config parse failed: {}", e)))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.method()?;
        self.threshold_checked()?;
        self.gradient_method()?;
        if self.init_radius <= 0.0 {
            return Err(Error::input("init_radius must be > 0"));
        }
        if self.value_steps < 1 {
            return Err(Error::input("value_steps must be >= 1"));
        }
        if !self.generation_template.contains("{head}") {
            return Err(Error::input("generation_template must contain {head}"));
        }
        match self.verifier.as_str() {
            "mock" | "http" => {}
            other => return Err(Error::input(format!("unknown verifier kind '{}'", other))),
        }
        match self.concept_backend.as_str() {
            "lexicon" | "llm-http" => {}
            other => return Err(Error::input(format!("unknown concept backend '{}'", other))),
        }
        Ok(())
    }

    pub fn method(&self) -> Result<EditMethod> {
        self.edit_method.parse()
    }

    pub fn threshold_checked(&self) -> Result<Threshold> {
        Threshold::new(self.threshold)
    }

    pub fn gradient_method(&self) -> Result<GradientMethod> {
        match self.value_gradient.as_str() {
            "finite-difference" => Ok(GradientMethod::FiniteDifference { step: self.fd_step }),
            "analytic" => Ok(GradientMethod::Analytic),
            other => Err(Error::input(format!(
                "unknown value_gradient '{}', expected finite-difference|analytic",
                other
            ))),
        }
    }

    pub fn value_options(&self) -> Result<ValueOptions> {
        Ok(ValueOptions {
            steps: self.value_steps,
            step_size: self.value_step_size,
            gradient: self.gradient_method()?,
        })
    }

    /// Layers to edit, resolved against a model's depth.
    pub fn layers_for(&self, n_layers: usize) -> Vec<usize> {
        if self.edit_layers.is_empty() {
            vec![(n_layers - 1) / 2]
        } else {
            self.edit_layers.clone()
        }
    }

    /// Builds the verifier backend; `force_mock` serves the CLI's
    /// `--mock-verifier` switch.
    pub fn build_verifier(&self, force_mock: bool) -> Result<Box<dyn VerifierBackend>> {
        if force_mock || self.verifier == "mock" {
            let mut mock = if self.mock_rules_path.is_empty() {
                MockVerifier::default()
            } else {
                MockVerifier::from_rules_file(&self.mock_rules_path)?
            };
            mock = mock.with_salt(self.mock_salt);
            return Ok(Box::new(mock));
        }
        let verifier = if self.verifier_url.is_empty() {
            HttpVerifier::from_env()?
        } else {
            HttpVerifier::new(self.verifier_url.clone())
        };
        Ok(Box::new(verifier))
    }

    /// Builds the concept backend; `force_lexicon` serves the CLI's
    /// `--mock-conceptualizer` switch.
    pub fn build_concept_backend(&self, force_lexicon: bool) -> Result<Box<dyn ConceptBackend>> {
        if force_lexicon || self.concept_backend == "lexicon" {
            if self.lexicon_path.is_empty() {
                return Err(Error::input(
                    "lexicon concept backend needs lexicon_path in the config",
                ));
            }
            return Ok(Box::new(LexiconBackend::from_file(&self.lexicon_path)?));
        }
        let backend = if self.llm_url.is_empty() {
            LlmBackend::from_env()?
        } else {
            LlmBackend::new(self.llm_url.clone())
        };
        Ok(Box::new(backend))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_flat_toml_round_trips() {
        let config = PipelineConfig::default();
        config.validate().unwrap();
        assert_eq!(config.threshold, 0.5);
        assert_eq!(config.k_abs, 3);
        assert_eq!(config.k_inst, 5);
        let text = config.to_toml_string();
        let parsed: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed.threshold, config.threshold);
    }

    #[test]
    fn partial_config_files_load_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conke.toml");
        std::fs::write(&path, "edit_method = \"rome\"\nseed = 9\n").unwrap();
        let config = PipelineConfig::from_toml_file(&path).unwrap();
        assert_eq!(config.method().unwrap(), EditMethod::Rome);
        assert_eq!(config.seed, 9);
        assert_eq!(config.k_inst, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conke.toml");
        std::fs::write(&path, "no_such_key = 1\n").unwrap();
        assert!(PipelineConfig::from_toml_file(&path).is_err());
    }

    #[test]
    fn layer_defaulting_targets_the_middle() {
        let config = PipelineConfig::default();
        assert_eq!(config.layers_for(2), vec![0]);
        assert_eq!(config.layers_for(5), vec![2]);
        let mut with_layers = PipelineConfig::default();
        with_layers.edit_layers = vec![0, 1];
        assert_eq!(with_layers.layers_for(2), vec![0, 1]);
    }
}
