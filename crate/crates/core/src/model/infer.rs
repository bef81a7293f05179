//! Generation, key extraction, and target-value optimization.

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

use super::backward::{backward, nll_and_dlogits, BackwardRequest};
use super::{softmax_rows, MlpHook, NoHook, SubstituteValue, ToyModel};
use crate::error::{Error, Result};
use crate::tokenizer::EOS_ID;

/// Decoding strategy for [`generate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationMode {
    Greedy,
    /// Softmax sampling with a fixed per-call seed.
    Sampled { seed: u64 },
}

/// Token range `[start, end)` over a prompt's tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> TokenSpan {
        TokenSpan { start, end }
    }

    pub fn validate(&self, prompt_len: usize) -> Result<()> {
        if self.start >= self.end || self.end > prompt_len {
            return Err(Error::input(format!(
                "subject span {}..{} outside prompt of {} tokens",
                self.start, self.end, prompt_len
            )));
        }
        Ok(())
    }

    /// Position of the span's last token, where the edit key is read.
    pub fn key_position(&self) -> usize {
        self.end - 1
    }
}

/// Generates a continuation of `prompt`; stops at EOS, `max_new` tokens, or
/// the context limit.
pub fn generate(model: &ToyModel, prompt: &str, max_new: usize, mode: GenerationMode) -> Result<String> {
    generate_hooked(model, &NoHook, prompt, max_new, mode)
}

/// [`generate`] with an MLP hook (used by the codebook adapter).
pub fn generate_hooked(
    model: &ToyModel,
    hook: &dyn MlpHook,
    prompt: &str,
    max_new: usize,
    mode: GenerationMode,
) -> Result<String> {
    let mut tokens = model.vocab.encode(prompt)?;
    if tokens.is_empty() {
        return Err(Error::input("prompt has no tokens"));
    }
    let mut rng = match mode {
        GenerationMode::Greedy => None,
        GenerationMode::Sampled { seed } => {
            Some(<ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed))
        }
    };
    let mut new_tokens = Vec::new();
    for _ in 0..max_new {
        if tokens.len() >= model.config.max_seq_len {
            break;
        }
        let out = model.forward_hooked(&tokens, hook)?;
        let last = out.logits.row(out.logits.nrows() - 1).to_owned();
        let next = match rng.as_mut() {
            None => argmax(&last),
            Some(rng) => sample_token(&last, rng),
        };
        if next == EOS_ID {
            break;
        }
        tokens.push(next);
        new_tokens.push(next);
    }
    model.vocab.decode(&new_tokens)
}

fn argmax(logits: &Array1<f64>) -> u32 {
    logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
        .map(|(i, _)| i as u32)
        .expect("non-empty logits")
}

fn sample_token(logits: &Array1<f64>, rng: &mut ChaCha8Rng) -> u32 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rand::Rng::random::<f64>(rng) * total;
    for (i, w) in weights.iter().enumerate() {
        draw -= w;
        if draw <= 0.0 {
            return i as u32;
        }
    }
    (weights.len() - 1) as u32
}

/// MLP inner activation at the subject's final token.
pub fn key_at(model: &ToyModel, prompt: &str, span: TokenSpan, layer: usize) -> Result<Array1<f64>> {
    let tokens = model.vocab.encode(prompt)?;
    span.validate(tokens.len())?;
    check_layer(model, layer)?;
    let out = model.forward(&tokens)?;
    Ok(out.tap(layer, span.key_position()).key_vector.clone())
}

/// Arithmetic mean of the subject key over several prefix contexts.
///
/// Each prefix is prepended to the prompt and the span shifted accordingly;
/// an empty prefix list reads the key from the bare prompt.
pub fn key_at_averaged(
    model: &ToyModel,
    prompt: &str,
    span: TokenSpan,
    layer: usize,
    prefixes: &[String],
) -> Result<Array1<f64>> {
    if prefixes.is_empty() {
        return key_at(model, prompt, span, layer);
    }
    check_layer(model, layer)?;
    let mut sum = Array1::<f64>::zeros(model.config.d_mlp);
    for prefix in prefixes {
        let mut tokens = model.vocab.encode(prefix)?;
        let offset = tokens.len();
        tokens.extend(model.vocab.encode(prompt)?);
        let shifted = TokenSpan::new(span.start + offset, span.end + offset);
        shifted.validate(tokens.len())?;
        let out = model.forward(&tokens)?;
        sum += &out.tap(layer, shifted.key_position()).key_vector;
    }
    Ok(sum / prefixes.len() as f64)
}

fn check_layer(model: &ToyModel, layer: usize) -> Result<()> {
    if layer >= model.config.n_layers {
        return Err(Error::input(format!(
            "layer {} out of range ({} layers)",
            layer, model.config.n_layers
        )));
    }
    Ok(())
}

/// How [`optimize_value`] obtains its gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientMethod {
    /// Central finite differences over the `d_model` coordinates.
    FiniteDifference { step: f64 },
    /// Backpropagation to the substituted vector.
    Analytic,
}

impl Default for GradientMethod {
    fn default() -> Self {
        GradientMethod::FiniteDifference { step: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct ValueOptions {
    pub steps: usize,
    pub step_size: f64,
    pub gradient: GradientMethod,
}

impl Default for ValueOptions {
    fn default() -> Self {
        ValueOptions { steps: 20, step_size: 0.5, gradient: GradientMethod::default() }
    }
}

/// Result of value optimization.
#[derive(Debug, Clone)]
pub struct ValueFit {
    pub vector: Array1<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// False is a convergence warning: the loss did not strictly decrease.
    pub converged: bool,
}

/// Internal problem setup shared by the loss and gradient evaluations.
pub(crate) struct ValueProblem {
    pub tokens: Vec<u32>,
    pub targets: Vec<(usize, u32)>,
    pub layer: usize,
    pub position: usize,
}

impl ValueProblem {
    pub(crate) fn build(
        model: &ToyModel,
        prompt: &str,
        span: TokenSpan,
        target: &str,
        layer: usize,
    ) -> Result<ValueProblem> {
        let prompt_tokens = model.vocab.encode(prompt)?;
        span.validate(prompt_tokens.len())?;
        check_layer(model, layer)?;
        let target_tokens = model.vocab.encode(target)?;
        if target_tokens.is_empty() {
            return Err(Error::input("target continuation is empty"));
        }
        let prompt_len = prompt_tokens.len();
        let mut tokens = prompt_tokens;
        tokens.extend_from_slice(&target_tokens);
        tokens.push(EOS_ID);
        if tokens.len() > model.config.max_seq_len {
            return Err(Error::input(format!(
                "prompt plus target spans {} tokens, exceeding max_seq_len {}",
                tokens.len(),
                model.config.max_seq_len
            )));
        }
        // position p predicts token p+1; the EOS after the tail is scored too
        let targets: Vec<(usize, u32)> = (prompt_len - 1..tokens.len() - 1)
            .map(|p| (p, tokens[p + 1]))
            .collect();
        Ok(ValueProblem { tokens, targets, layer, position: span.key_position() })
    }

    pub(crate) fn loss(&self, model: &ToyModel, value: &Array1<f64>) -> Result<f64> {
        let hook = SubstituteValue { layer: self.layer, position: self.position, value };
        let trace = model.forward_traced(&self.tokens, &hook)?;
        Ok(nll_and_dlogits(&trace.logits, &self.targets).0)
    }

    fn gradient(
        &self,
        model: &ToyModel,
        value: &Array1<f64>,
        method: GradientMethod,
    ) -> Result<Array1<f64>> {
        match method {
            GradientMethod::FiniteDifference { step } => {
                let mut grad = Array1::<f64>::zeros(value.len());
                let mut probe = value.clone();
                for i in 0..value.len() {
                    probe[i] = value[i] + step;
                    let up = self.loss(model, &probe)?;
                    probe[i] = value[i] - step;
                    let down = self.loss(model, &probe)?;
                    probe[i] = value[i];
                    grad[i] = (up - down) / (2.0 * step);
                }
                Ok(grad)
            }
            GradientMethod::Analytic => {
                let hook =
                    SubstituteValue { layer: self.layer, position: self.position, value };
                let trace = model.forward_traced(&self.tokens, &hook)?;
                let (_, d_logits) = nll_and_dlogits(&trace.logits, &self.targets);
                let result = backward(
                    model,
                    &trace,
                    &d_logits,
                    BackwardRequest {
                        weight_grads: false,
                        capture_value_grad: Some((self.layer, self.position)),
                    },
                );
                Ok(result.value_grad.expect("capture requested"))
            }
        }
    }
}

/// Descends a replacement MLP output vector that maximizes the probability
/// of `target` continuing `prompt`.
///
/// Starts from the model's current value vector at the subject position and
/// takes Adam steps on the configured gradient (the residual stream is
/// norm-invariant downstream, so raw gradient steps barely rotate a
/// large-norm vector). The best iterate is kept, so the returned loss never
/// exceeds the initial one.
pub fn optimize_value(
    model: &ToyModel,
    prompt: &str,
    span: TokenSpan,
    target: &str,
    layer: usize,
    options: &ValueOptions,
) -> Result<ValueFit> {
    if options.steps < 1 {
        return Err(Error::input("steps must be >= 1"));
    }
    let problem = ValueProblem::build(model, prompt, span, target, layer)?;
    let init = current_value(model, &problem)?;
    let initial_loss = problem.loss(model, &init)?;
    if !initial_loss.is_finite() {
        return Err(Error::Numeric("initial value loss is not finite".into()));
    }
    let mut v = init;
    let mut best = v.clone();
    let mut best_loss = initial_loss;
    let mut m = Array1::<f64>::zeros(v.len());
    let mut u = Array1::<f64>::zeros(v.len());
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    for t in 1..=options.steps {
        let grad = problem.gradient(model, &v, options.gradient)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("value gradient is not finite".into()));
        }
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        for i in 0..v.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
            u[i] = BETA2 * u[i] + (1.0 - BETA2) * grad[i] * grad[i];
            v[i] -= options.step_size * (m[i] / bc1) / ((u[i] / bc2).sqrt() + EPS);
        }
        let loss = problem.loss(model, &v)?;
        if loss < best_loss {
            best_loss = loss;
            best.assign(&v);
        }
    }
    if !best.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric("optimized value vector is not finite".into()));
    }
    Ok(ValueFit {
        vector: best,
        initial_loss,
        final_loss: best_loss,
        converged: best_loss < initial_loss,
    })
}

fn current_value(model: &ToyModel, problem: &ValueProblem) -> Result<Array1<f64>> {
    let out = model.forward(&problem.tokens)?;
    Ok(out.tap(problem.layer, problem.position).value_vector.clone())
}

/// The objective [`optimize_value`] descends: target NLL with `value`
/// substituted at the subject position.
pub fn value_loss(
    model: &ToyModel,
    prompt: &str,
    span: TokenSpan,
    target: &str,
    layer: usize,
    value: &Array1<f64>,
) -> Result<f64> {
    let problem = ValueProblem::build(model, prompt, span, target, layer)?;
    problem.loss(model, value)
}

/// Gradient of [`value_loss`] at `value`, by the chosen method.
pub fn value_gradient(
    model: &ToyModel,
    prompt: &str,
    span: TokenSpan,
    target: &str,
    layer: usize,
    value: &Array1<f64>,
    method: GradientMethod,
) -> Result<Array1<f64>> {
    let problem = ValueProblem::build(model, prompt, span, target, layer)?;
    problem.gradient(model, value, method)
}

/// The model's current MLP output at the subject position (the starting
/// point of [`optimize_value`]).
pub fn current_value_at(
    model: &ToyModel,
    prompt: &str,
    span: TokenSpan,
    target: &str,
    layer: usize,
) -> Result<Array1<f64>> {
    let problem = ValueProblem::build(model, prompt, span, target, layer)?;
    current_value(model, &problem)
}

/// Mean negative log-likelihood of `target` continuing `prompt`, with the
/// trailing EOS included. Used for pre/post edit scoring.
pub fn target_nll(model: &ToyModel, prompt: &str, target: &str) -> Result<f64> {
    target_nll_hooked(model, &NoHook, prompt, target)
}

/// [`target_nll`] under an MLP hook.
pub fn target_nll_hooked(
    model: &ToyModel,
    hook: &dyn MlpHook,
    prompt: &str,
    target: &str,
) -> Result<f64> {
    let prompt_tokens = model.vocab.encode(prompt)?;
    if prompt_tokens.is_empty() {
        return Err(Error::input("prompt has no tokens"));
    }
    let target_tokens = model.vocab.encode(target)?;
    let prompt_len = prompt_tokens.len();
    let mut tokens = prompt_tokens;
    tokens.extend_from_slice(&target_tokens);
    tokens.push(EOS_ID);
    let out = model.forward_hooked(&tokens, hook)?;
    let probs = softmax_rows(&out.logits);
    let positions: Vec<(usize, u32)> = (prompt_len - 1..tokens.len() - 1)
        .map(|p| (p, tokens[p + 1]))
        .collect();
    let nll: f64 = positions
        .iter()
        .map(|&(p, tok)| -probs[[p, tok as usize]].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / positions.len() as f64;
    Ok(nll)
}
