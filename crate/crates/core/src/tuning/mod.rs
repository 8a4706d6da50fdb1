//! Head and prompt training against exact oracle outputs.
//!
//! Heads are fitted by full-batch gradient descent on the mean logistic
//! loss, preconditioned by the fixed curvature bound `X^T X / (4 n)`; with a
//! unit step every iteration is a majorise-minimise step, so the loss never
//! increases. Prompts take projected gradient steps with Armijo backtracking
//! and are clamped to `[0, 1]` after every step.

mod attention;
mod linear;
mod prompt;

pub use attention::{attention_features, train_attention_head, AttentionFit, AttentionInputs};
pub use linear::{train_linear_head, train_linear_weights, LinearFit};
pub use prompt::{prompt_data, prompt_features, prompt_loss, prompt_loss_grad, train_prompt, PromptData, PromptFit};

use serde::{Deserialize, Serialize};

use crate::par::{map, Exec};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptInit {
    /// Entries uniform in `[0.25, 0.75]`.
    #[default]
    Uniform,
    /// All-ones vectors, equivalent to masked positions.
    Ones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Multiplier on the preconditioned head step; at most 1 keeps descent monotone.
    pub learning_rate: f64,
    /// Full-batch iterations.
    pub epochs: usize,
    pub prompt_len: usize,
    pub prompt_init: PromptInit,
    /// First trial step of the projected prompt update.
    pub prompt_step: f64,
    /// Head iterations between prompt updates.
    pub head_steps: usize,
    /// Softmax temperatures visited when annealing attention keys.
    pub temperatures: Vec<f64>,
    /// Key updates per temperature.
    pub attention_steps: usize,
    pub seed: u64,
    pub grad_mode: GradMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            epochs: 200,
            prompt_len: 20,
            prompt_init: PromptInit::Uniform,
            prompt_step: 1.0,
            head_steps: 3,
            temperatures: vec![0.1, 0.03, 0.01],
            attention_steps: 5,
            seed: 0,
            grad_mode: GradMode::Analytic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.prompt_step > 0.0) {
            return Err(crate::Error::invalid("learning rate and prompt step must be positive"));
        }
        if self.epochs == 0 {
            return Err(crate::Error::invalid("epochs must be at least 1"));
        }
        if self.temperatures.iter().any(|t| !(*t > 0.0)) {
            return Err(crate::Error::invalid("temperatures must be positive"));
        }
        Ok(())
    }
}

/// `log(1 + e^s)`, stable for large `|s|`.
pub(crate) fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Logistic loss of score `s` against label `y`.
pub(crate) fn logistic(s: f64, y: u8) -> f64 {
    softplus(s) - f64::from(y) * s
}

/// Fraction of items where `predict` matches `label`.
pub fn evaluate_accuracy<T, P>(exec: Exec, items: &[T], label: impl Fn(&T) -> u8 + Sync + Send, predict: P) -> Result<f64>
where
    T: Sync,
    P: Fn(&T) -> Result<u8> + Sync + Send,
{
    if items.is_empty() {
        return Err(crate::Error::invalid("empty split"));
    }
    let hits: Vec<bool> = map(exec, items, |it| predict(it).map(|p| p == label(it))).into_iter().collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_is_stable() {
        assert!((logistic(0.0, 1) - 2f64.ln()).abs() < 1e-15);
        assert!(logistic(800.0, 1).abs() < 1e-300);
        assert!((logistic(800.0, 0) - 800.0).abs() < 1e-9);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }

    #[test]
    fn accuracy_examples() {
        let items = [0u8, 1, 1, 0];
        assert_eq!(evaluate_accuracy(Exec::Sequential, &items, |x| *x, |x| Ok(*x)).unwrap(), 1.0);
        assert_eq!(evaluate_accuracy(Exec::Sequential, &items, |x| *x, |_| Ok(1)).unwrap(), 0.5);
    }
}
