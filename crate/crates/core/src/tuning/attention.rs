use nalgebra::{DMatrix, DVector};

use super::linear::train_linear_weights;
use super::{logistic, sigmoid, TrainConfig};
use crate::downstream::Example;
use crate::inference::{gbar_mem, lifted_evidence, mem_proper_embedding};
use crate::linalg::softmax;
use crate::model::MemHmmParams;
use crate::par::{map, sum_vectors, Exec};
use crate::recovery::{eval_attention, AttentionHead, ARGMAX_TOL};
use crate::{Error, Result};

/// Oracle outputs of one sequence read with position 1 masked, and the
/// value embedding at each position (all ones at the mask).
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub outputs: Vec<DVector<f64>>,
    pub values: Vec<DVector<f64>>,
}

pub fn attention_features(params: &MemHmmParams, tokens: &[usize]) -> Result<AttentionInputs> {
    let obs: Vec<Option<usize>> = tokens.iter().enumerate().map(|(i, &z)| (i > 0).then_some(z)).collect();
    let out = gbar_mem(params, &lifted_evidence(params, &obs)?)?;
    let values = obs
        .iter()
        .map(|o| match o {
            Some(z) => mem_proper_embedding(params, *z),
            None => Ok(DVector::from_element(params.emission.ncols(), 1.0)),
        })
        .collect::<Result<_>>()?;
    Ok(AttentionInputs { outputs: out.dists, values })
}

#[derive(Debug, Clone)]
pub struct AttentionFit {
    pub head: AttentionHead,
    /// Training loss after the uniform stage and after each temperature.
    pub losses: Vec<f64>,
    /// Validation accuracy of each candidate under the hard rule; index 0 is uniform attention.
    pub val_accuracy: Vec<f64>,
    /// Index of the selected candidate.
    pub selected: usize,
}

/// `sum_i w_i vec(e_i g_i^T)`, flattened row-major over (value row, token).
fn pooled(inp: &AttentionInputs, w: &[f64]) -> DVector<f64> {
    let nz = inp.outputs[0].len();
    let nv = inp.values[0].len();
    let mut f = DVector::zeros(nv * nz);
    for ((g, e), &wi) in inp.outputs.iter().zip(&inp.values).zip(w) {
        for r in 0..nv {
            let c = wi * e[r];
            if c != 0.0 {
                for z in 0..nz {
                    f[r * nz + z] += c * g[z];
                }
            }
        }
    }
    f
}

fn weights(key: &DVector<f64>, inp: &AttentionInputs, temperature: f64) -> Vec<f64> {
    let scores: Vec<f64> = inp.outputs.iter().map(|g| key.dot(g)).collect();
    softmax(&scores, temperature)
}

fn head_from(key: &DVector<f64>, theta: &DVector<f64>, nh: usize, nv: usize, nz: usize) -> Result<AttentionHead> {
    let mut k = DMatrix::zeros(nh + 1, nz);
    k.row_mut(0).copy_from(&key.transpose());
    let mut q = DVector::zeros(nh + 1);
    q[0] = 1.0;
    let value = DMatrix::from_row_slice(nv, nz, theta.as_slice());
    AttentionHead::new(q, k, Vec::new(), value, DVector::from_element(nv, 1.0), ARGMAX_TOL)
}

/// Soft-attention loss and gradient in the key vector for fixed value weights.
fn key_loss_grad(exec: Exec, inputs: &[AttentionInputs], labels: &[u8], key: &DVector<f64>, theta: &DMatrix<f64>, temperature: f64) -> (f64, DVector<f64>) {
    let nz = key.len();
    let acc = sum_vectors(exec, inputs, nz + 1, |n, inp, acc| {
        let w = weights(key, inp, temperature);
        let vals: Vec<f64> = inp.outputs.iter().zip(&inp.values).map(|(g, e)| e.dot(&(theta * g))).collect();
        let score: f64 = w.iter().zip(&vals).map(|(a, b)| a * b).sum();
        acc[nz] += logistic(score, labels[n]);
        let r = sigmoid(score) - f64::from(labels[n]);
        for ((g, wi), vi) in inp.outputs.iter().zip(&w).zip(&vals) {
            let c = r * wi * (vi - score) / temperature;
            for z in 0..nz {
                acc[z] += c * g[z];
            }
        }
    });
    let cnt = inputs.len() as f64;
    (acc[nz] / cnt, DVector::from_iterator(nz, acc[..nz].iter().map(|x| x / cnt)))
}

/// Value weights are fitted under uniform attention first. Then key vectors
/// are trained by gradient descent on softmax attention at decreasing
/// temperatures, refitting value weights after each key step. Every
/// candidate is scored on the validation split with the hard argmax rule and
/// the best one is returned (earliest on ties).
pub fn train_attention_head(exec: Exec, params: &MemHmmParams, train: &[Example], val: &[Example], config: &TrainConfig) -> Result<AttentionFit> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("attention training needs nonempty train and validation splits"));
    }
    let inputs: Vec<AttentionInputs> = map(exec, train, |e| attention_features(params, &e.tokens)).into_iter().collect::<Result<_>>()?;
    let val_inputs: Vec<AttentionInputs> = map(exec, val, |e| attention_features(params, &e.tokens)).into_iter().collect::<Result<_>>()?;
    let labels: Vec<u8> = train.iter().map(|e| e.label).collect();
    let nh = params.n_hidden();
    let nz = params.n_vocab;
    let nv = params.emission.ncols();

    let val_acc = |head: &AttentionHead| -> Result<f64> {
        let hits: Vec<bool> = map(exec, &val_inputs, |inp| eval_attention(head, &inp.outputs, &inp.values).map(|ev| ev.label))
            .into_iter()
            .zip(val)
            .map(|(p, e)| p.map(|p| p == e.label))
            .collect::<Result<_>>()?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    };

    let mut key = DVector::zeros(nz);
    let uniform: Vec<DVector<f64>> = map(exec, &inputs, |inp| pooled(inp, &vec![1.0 / inp.outputs.len() as f64; inp.outputs.len()]));
    let (mut theta, trace) = train_linear_weights(exec, &uniform, &labels, config, None)?;
    let mut losses = vec![*trace.last().expect("at least one loss")];
    let mut candidates = vec![head_from(&key, &theta, nh, nv, nz)?];
    let mut val_accuracy = vec![val_acc(&candidates[0])?];

    let refit_cfg = TrainConfig { epochs: config.head_steps.max(1), ..config.clone() };
    let mut step = config.prompt_step;
    for &temp in &config.temperatures {
        let mut loss = 0.0;
        for _ in 0..config.attention_steps {
            let theta_m = DMatrix::from_row_slice(nv, nz, theta.as_slice());
            let (l, grad) = key_loss_grad(exec, &inputs, &labels, &key, &theta_m, temp);
            if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("attention objective at temperature {temp}")));
            }
            loss = l;
            let gg = grad.norm_squared();
            for _ in 0..30 {
                let cand = &key - &grad * step;
                let (lc, _) = key_loss_grad(exec, &inputs, &labels, &cand, &theta_m, temp);
                if lc <= l - 1e-4 * step * gg {
                    key = cand;
                    loss = lc;
                    step = (step * 2.0).min(1e6);
                    break;
                }
                step *= 0.5;
            }
            let pooled_w: Vec<DVector<f64>> = map(exec, &inputs, |inp| pooled(inp, &weights(&key, inp, temp)));
            theta = train_linear_weights(exec, &pooled_w, &labels, &refit_cfg, Some(&theta))?.0;
        }
        losses.push(loss);
        let head = head_from(&key, &theta, nh, nv, nz)?;
        val_accuracy.push(val_acc(&head)?);
        candidates.push(head);
    }
    let mut selected = 0;
    for (i, a) in val_accuracy.iter().enumerate() {
        if *a > val_accuracy[selected] {
            selected = i;
        }
    }
    Ok(AttentionFit { head: candidates.swap_remove(selected), losses, val_accuracy, selected })
}
