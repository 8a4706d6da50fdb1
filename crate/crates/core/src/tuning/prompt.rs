use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use super::linear::train_linear_weights;
use super::{logistic, sigmoid, GradMode, LinearFit, PromptInit, TrainConfig};
use crate::downstream::Example;
use crate::inference::grad::{prompt_backward, prompt_forward, readout_grad};
use crate::inference::{embed_observations, messages, readout, Chain};
use crate::model::HmmParams;
use crate::par::{map, sum_vectors, Exec};
use crate::recovery::{LinearHead, PromptVector};
use crate::rng::{child_rng, tags};
use crate::{Error, Result};

/// Everything the prompt objective needs from a training set: the chain and,
/// per sequence, the unit-mass backward message into the masked first
/// position. Prompts only change the forward message entering that position.
#[derive(Debug, Clone)]
pub struct PromptData {
    pub chain: Chain,
    pub emission: DMatrix<f64>,
    pub betas: Vec<DVector<f64>>,
    pub labels: Vec<u8>,
}

/// Sequences are read with position 1 masked.
pub fn prompt_data(exec: Exec, params: &HmmParams, examples: &[Example]) -> Result<PromptData> {
    if examples.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let chain = Chain::from_hmm(params);
    let betas = map(exec, examples, |e| -> Result<DVector<f64>> {
        let obs: Vec<Option<usize>> = e.tokens.iter().enumerate().map(|(i, &z)| (i > 0).then_some(z)).collect();
        let evid = embed_observations(params, &obs)?;
        Ok(messages(&chain, &evid).beta.swap_remove(0))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(PromptData { chain, emission: params.emission.clone(), betas, labels: examples.iter().map(|e| e.label).collect() })
}

/// Oracle outputs at the masked position after the prompts; no prompts gives
/// the plain head-tuning features.
pub fn prompt_features(exec: Exec, data: &PromptData, prompts: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let fwd = prompt_forward(&data.chain, prompts);
    let alpha = fwd.last();
    map(exec, &data.betas, |b| readout(&data.emission, &alpha.component_mul(b)).0)
}

pub fn prompt_loss(exec: Exec, data: &PromptData, prompts: &[DVector<f64>], w: &DVector<f64>) -> f64 {
    let feats = prompt_features(exec, data, prompts);
    let acc = sum_vectors(exec, &feats, 1, |i, f, acc| acc[0] += logistic(w.dot(f), data.labels[i]));
    acc[0] / feats.len() as f64
}

/// Mean logistic loss and its gradient with respect to each prompt vector.
pub fn prompt_loss_grad(exec: Exec, data: &PromptData, prompts: &[DVector<f64>], w: &DVector<f64>) -> (f64, Vec<DVector<f64>>) {
    let fwd = prompt_forward(&data.chain, prompts);
    let alpha = fwd.last();
    let n = data.chain.dim();
    let acc = sum_vectors(exec, &data.betas, n + 1, |i, b, acc| {
        let tau = alpha.component_mul(b);
        let (g, _) = readout(&data.emission, &tau);
        let s = w.dot(&g);
        let y = data.labels[i];
        acc[n] += logistic(s, y);
        let r = sigmoid(s) - f64::from(y);
        let dtau = readout_grad(&data.emission, &tau, w);
        for h in 0..n {
            acc[h] += r * dtau[h] * b[h];
        }
    });
    let cnt = data.betas.len() as f64;
    let d_alpha = DVector::from_iterator(n, acc[..n].iter().map(|x| x / cnt));
    (acc[n] / cnt, prompt_backward(&data.chain, prompts, &fwd, &d_alpha))
}

/// Central differences, one-sided at the box boundary.
fn prompt_grad_fd(exec: Exec, data: &PromptData, prompts: &[DVector<f64>], w: &DVector<f64>) -> Vec<DVector<f64>> {
    const H: f64 = 1e-5;
    let mut out = Vec::with_capacity(prompts.len());
    for k in 0..prompts.len() {
        let mut g = DVector::zeros(prompts[k].len());
        for c in 0..prompts[k].len() {
            let x = prompts[k][c];
            let (lo, hi) = ((x - H).max(0.0), (x + H).min(1.0));
            let mut p = prompts.to_vec();
            p[k][c] = hi;
            let up = prompt_loss(exec, data, &p, w);
            p[k][c] = lo;
            let dn = prompt_loss(exec, data, &p, w);
            g[c] = (up - dn) / (hi - lo);
        }
        out.push(g);
    }
    out
}

#[derive(Debug, Clone)]
pub struct PromptFit {
    pub prompts: Vec<PromptVector>,
    pub head: LinearHead,
    /// Loss at the start of each epoch, then after the last one.
    pub losses: Vec<f64>,
    /// Head tuned without prompts, used as the warm start.
    pub head_only: LinearFit,
}

fn init_prompts(config: &TrainConfig, dim: usize) -> Vec<DVector<f64>> {
    match config.prompt_init {
        PromptInit::Ones => vec![DVector::from_element(dim, 1.0); config.prompt_len],
        PromptInit::Uniform => {
            let mut rng = child_rng(config.seed, tags::PROMPT_INIT);
            (0..config.prompt_len).map(|_| DVector::from_fn(dim, |_, _| rng.random_range(0.25..0.75))).collect()
        }
    }
}

/// Alternates a projected Armijo step on the prompts with a few head
/// iterations, starting from the prompt-free head.
pub fn train_prompt(exec: Exec, params: &HmmParams, train: &[Example], config: &TrainConfig) -> Result<PromptFit> {
    config.validate()?;
    if config.prompt_len == 0 {
        return Err(Error::invalid("prompt length must be at least 1"));
    }
    let data = prompt_data(exec, params, train)?;
    let base = prompt_features(exec, &data, &[]);
    let (w0, head_losses) = train_linear_weights(exec, &base, &data.labels, config, None)?;
    let head_only = LinearFit { head: LinearHead::new(w0.clone())?, losses: head_losses };

    let mut prompts = init_prompts(config, params.n_hidden);
    let mut w = w0;
    let mut step = config.prompt_step;
    let mut losses = Vec::with_capacity(config.epochs + 1);
    let head_cfg = TrainConfig { epochs: config.head_steps, ..config.clone() };
    for epoch in 0..config.epochs {
        let (loss, analytic) = prompt_loss_grad(exec, &data, &prompts, &w);
        let grad = match config.grad_mode {
            GradMode::Analytic => analytic,
            GradMode::FiniteDifference => prompt_grad_fd(exec, &data, &prompts, &w),
        };
        if !loss.is_finite() || grad.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("prompt objective at epoch {epoch}")));
        }
        losses.push(loss);
        for _ in 0..40 {
            let cand: Vec<DVector<f64>> = prompts.iter().zip(&grad).map(|(p, g)| (p - g * step).map(|x| x.clamp(0.0, 1.0))).collect();
            let decrease: f64 = cand.iter().zip(&prompts).zip(&grad).map(|((c, p), g)| g.dot(&(c - p))).sum();
            if decrease >= 0.0 {
                break;
            }
            if prompt_loss(exec, &data, &cand, &w) <= loss + 1e-4 * decrease {
                prompts = cand;
                step = (step * 2.0).min(1e6);
                break;
            }
            step *= 0.5;
        }
        if config.head_steps > 0 {
            let feats = prompt_features(exec, &data, &prompts);
            w = train_linear_weights(exec, &feats, &data.labels, &head_cfg, Some(&w))?.0;
        }
    }
    losses.push(prompt_loss(exec, &data, &prompts, &w));
    let prompts = prompts.into_iter().map(PromptVector::new).collect::<Result<_>>()?;
    Ok(PromptFit { prompts, head: LinearHead::new(w)?, losses, head_only })
}
