//! Reverse-mode differentiation of the extended oracle with respect to its
//! input embeddings.
//!
//! Every readout is invariant to positive rescaling of `tau`, so the
//! per-step normalisers can be carried through the adjoint recursion as plain
//! constants: with `a_k = C_k alpha_k` the scaled adjoint `C_k dL/da_k`
//! satisfies the same recursion as the unscaled one, divided by the step
//! normaliser. No quantity ever needs to be un-normalised.

use nalgebra::{DMatrix, DVector};

use super::lifting::{gbar_mem_chain, lift_embedding, MemShape};
use super::{check_evidence, gbar_chain, messages, Chain, Messages, OracleOutput};
use crate::linalg::{l1_norm, normalize_l1};
use crate::model::{HmmParams, MemHmmParams};
use crate::Result;

/// Gradient of `g . (W tau / |tau|_1)` with respect to `tau`.
pub fn readout_grad(emission: &DMatrix<f64>, tau: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
    let s = l1_norm(tau);
    if s <= 0.0 {
        return DVector::zeros(tau.len());
    }
    let wg = emission.tr_mul(g);
    let out_dot = wg.dot(tau) / s;
    wg.map(|x| (x - out_dot) / s)
}

/// Gradient of `g . (W phi(tau) / |phi(tau)|_1)` with respect to lifted `tau`.
pub fn readout_grad_mem(params: &MemHmmParams, tau: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
    let s = l1_norm(tau);
    if s <= 0.0 {
        return DVector::zeros(tau.len());
    }
    let wg = lift_embedding(MemShape::of(params), &params.emission.tr_mul(g)).expect("emission-space dimension");
    let out_dot = wg.dot(tau) / s;
    wg.map(|x| (x - out_dot) / s)
}

/// Given `dtau[k] = dL/dtau_k` evaluated at the unit-mass `tau_k`, returns
/// `dL/dv_k` for every evidence vector.
pub fn backprop(chain: &Chain, evid: &[DVector<f64>], msgs: &Messages, dtau: &[Option<DVector<f64>>]) -> Vec<DVector<f64>> {
    let t = evid.len();
    let n = chain.dim();
    let zero = DVector::zeros(n);
    let dt = |k: usize| dtau[k].as_ref().unwrap_or(&zero);

    // forward-message adjoints, right to left
    let mut abar = vec![DVector::zeros(n); t];
    let mut fwd_back = vec![DVector::zeros(n); t]; // A^T abar[k+1] / rho_k
    for k in (0..t).rev() {
        let mut a = dt(k).component_mul(&msgs.beta[k]);
        if k + 1 < t && msgs.alpha_scale[k] > 0.0 {
            let back = chain.op.apply_t(&abar[k + 1]) / msgs.alpha_scale[k];
            a += evid[k].component_mul(&back);
            fwd_back[k] = back;
        }
        abar[k] = a;
    }
    // backward-message adjoints, left to right
    let mut bbar = vec![DVector::zeros(n); t];
    let mut bwd_fwd = vec![DVector::zeros(n); t]; // A bbar[k-1] / sigma_k
    for k in 0..t {
        let mut b = dt(k).component_mul(&msgs.alpha[k]);
        if k > 0 && msgs.beta_scale[k] > 0.0 {
            let fwd = chain.op.apply(&bbar[k - 1]) / msgs.beta_scale[k];
            b += evid[k].component_mul(&fwd);
            bwd_fwd[k] = fwd;
        }
        bbar[k] = b;
    }
    (0..t)
        .map(|k| msgs.alpha[k].component_mul(&fwd_back[k]) + msgs.beta[k].component_mul(&bwd_fwd[k]))
        .collect()
}

/// Oracle outputs and the vector-Jacobian product `sum_i g_i . Gbar_i` with
/// respect to the embeddings, for a vanilla model.
pub fn gbar_vjp(params: &HmmParams, embeds: &[DVector<f64>], upstream: &[Option<DVector<f64>>]) -> Result<(OracleOutput, Vec<DVector<f64>>)> {
    let chain = Chain::from_hmm(params);
    check_evidence(chain.dim(), embeds)?;
    let out = gbar_chain(&chain, &params.emission, embeds);
    let msgs = messages(&chain, embeds);
    let dtau: Vec<Option<DVector<f64>>> = upstream
        .iter()
        .enumerate()
        .map(|(k, g)| g.as_ref().map(|g| readout_grad(&params.emission, &msgs.tau(k), g)))
        .collect();
    Ok((out, backprop(&chain, embeds, &msgs, &dtau)))
}

/// As [`gbar_vjp`] for a memory-augmented model over lifted embeddings.
pub fn gbar_mem_vjp(params: &MemHmmParams, embeds: &[DVector<f64>], upstream: &[Option<DVector<f64>>]) -> Result<(OracleOutput, Vec<DVector<f64>>)> {
    let chain = Chain::lifted(params);
    check_evidence(chain.dim(), embeds)?;
    let out = gbar_mem_chain(params, &chain, embeds);
    let msgs = messages(&chain, embeds);
    let dtau: Vec<Option<DVector<f64>>> = upstream
        .iter()
        .enumerate()
        .map(|(k, g)| g.as_ref().map(|g| readout_grad_mem(params, &msgs.tau(k), g)))
        .collect();
    Ok((out, backprop(&chain, embeds, &msgs, &dtau)))
}

/// Forward messages through a run of prompt vectors placed at positions `1..=L`.
#[derive(Debug, Clone)]
pub struct PromptForward {
    /// Unit-mass forward messages at positions `1..=L+1`.
    pub alpha: Vec<DVector<f64>>,
    /// Step normalisers, one per prompt vector.
    pub scale: Vec<f64>,
}

impl PromptForward {
    /// Forward message entering the first position after the prompts.
    pub fn last(&self) -> &DVector<f64> {
        self.alpha.last().expect("at least the initial message")
    }
}

pub fn prompt_forward(chain: &Chain, prompts: &[DVector<f64>]) -> PromptForward {
    let mut a = chain.first.clone();
    normalize_l1(&mut a);
    let mut alpha = vec![a];
    let mut scale = Vec::with_capacity(prompts.len());
    for (k, p) in prompts.iter().enumerate() {
        let mut next = chain.op.apply(&alpha[k].component_mul(p));
        scale.push(normalize_l1(&mut next));
        alpha.push(next);
    }
    PromptForward { alpha, scale }
}

/// Gradient with respect to each prompt vector, given `dL/dalpha` at the
/// message leaving the prompts. The loss must be invariant to positive
/// rescaling of that message.
pub fn prompt_backward(chain: &Chain, prompts: &[DVector<f64>], fwd: &PromptForward, d_last: &DVector<f64>) -> Vec<DVector<f64>> {
    let mut grads = vec![DVector::zeros(chain.dim()); prompts.len()];
    let mut abar = d_last.clone();
    for k in (0..prompts.len()).rev() {
        if fwd.scale[k] <= 0.0 {
            break;
        }
        let back = chain.op.apply_t(&abar) / fwd.scale[k];
        grads[k] = fwd.alpha[k].component_mul(&back);
        abar = prompts[k].component_mul(&back);
    }
    grads
}
