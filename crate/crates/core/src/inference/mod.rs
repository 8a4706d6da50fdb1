//! Exact masked-LM oracle by scaled forward/backward message passing.
//!
//! For evidence vectors `v_1..v_t` (a proper embedding is a row of the
//! emission matrix, a masked position is all ones) the forward message at `i`
//! is proportional to `P(H_i, v_{1..i-1})` and the backward message to
//! `P(v_{i+1..t} | H_i)`. Their product `tau_i` is proportional to
//! `P(H_i, v_{-i})`, so the output `W tau_i / |tau_i|_1` is the conditional
//! distribution of `X_i` given everything else. Messages are renormalised to
//! unit l1 mass after every step; the scale factors are kept so the
//! likelihood and the gradients stay exact.

mod fake_token;
pub mod grad;
mod lifting;

pub use fake_token::{fake_token_extend, FakeTokenModel};
pub use lifting::{gbar_mem, lift_embedding, lifted_evidence, mem_oracle, mem_proper_embedding, reverse_lift, MemShape};

use nalgebra::{DMatrix, DVector};

use crate::linalg::{l1_norm, normalize_l1};
use crate::model::{HmmParams, MemHmmParams};
use crate::{Error, Result};

/// Transition operator of a chain. `Blocked` is `I_blocks (x) base`, the shape of
/// a lifted memory chain, applied without materialising the big matrix.
#[derive(Debug, Clone)]
pub enum TransitionOp {
    Dense(DMatrix<f64>),
    Blocked { base: DMatrix<f64>, blocks: usize },
}

impl TransitionOp {
    pub fn dim(&self) -> usize {
        match self {
            TransitionOp::Dense(m) => m.nrows(),
            TransitionOp::Blocked { base, blocks } => base.nrows() * blocks,
        }
    }

    /// `A v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            TransitionOp::Dense(m) => m * v,
            TransitionOp::Blocked { base, blocks } => {
                let n = base.nrows();
                let mut out = DVector::zeros(n * blocks);
                for b in 0..*blocks {
                    let r = base * v.rows(b * n, n);
                    out.rows_mut(b * n, n).copy_from(&r);
                }
                out
            }
        }
    }

    /// `A^T v`.
    pub fn apply_t(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            TransitionOp::Dense(m) => m.tr_mul(v),
            TransitionOp::Blocked { base, blocks } => {
                let n = base.nrows();
                let mut out = DVector::zeros(n * blocks);
                for b in 0..*blocks {
                    let r = base.tr_mul(&v.rows(b * n, n));
                    out.rows_mut(b * n, n).copy_from(&r);
                }
                out
            }
        }
    }
}

/// Hidden chain seen by the message passer.
#[derive(Debug, Clone)]
pub struct Chain {
    pub op: TransitionOp,
    /// Distribution of `H_0`.
    pub start: DVector<f64>,
    /// Distribution of `H_1`.
    pub first: DVector<f64>,
}

impl Chain {
    pub fn from_hmm(params: &HmmParams) -> Self {
        Self { op: TransitionOp::Dense(params.transition.clone()), start: params.start.clone(), first: params.first_marginal() }
    }

    /// Chain over `(M_1..M_N, H)`; memory never changes.
    pub fn lifted(params: &MemHmmParams) -> Self {
        let op = TransitionOp::Blocked { base: params.transition.clone(), blocks: params.n_mem_configs() };
        let nh = params.n_hidden();
        let start = DVector::from_fn(params.n_lifted(), |l, _| params.mem_prior[l / nh] * params.start[l % nh]);
        let first = op.apply(&start);
        Self { op, start, first }
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    /// Marginal of `H_i`, `i >= 1`.
    pub fn marginal(&self, i: usize) -> DVector<f64> {
        let mut p = self.first.clone();
        for _ in 1..i {
            p = self.op.apply(&p);
        }
        p
    }
}

/// Scaled messages for one evidence sequence. Index `k` is position `k + 1`.
#[derive(Debug, Clone)]
pub struct Messages {
    /// Unit-mass forward messages, `alpha[k]` proportional to `P(H_{k+1}, v_{1..k})`.
    pub alpha: Vec<DVector<f64>>,
    /// Unit-mass backward messages, `beta[k]` proportional to `P(v_{k+2..t} | H_{k+1})`.
    pub beta: Vec<DVector<f64>>,
    /// `alpha_scale[k] = |A (alpha[k] . v[k])|_1`, for `k < t - 1`.
    pub alpha_scale: Vec<f64>,
    /// `beta_scale[k] = |A^T (v[k] . beta[k])|_1`, for `k >= 1`; `beta_scale[0]` is unused.
    pub beta_scale: Vec<f64>,
}

impl Messages {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// Unit-mass `tau` at index `k`, proportional to `P(H_{k+1}, v_{-(k+1)})`.
    pub fn tau(&self, k: usize) -> DVector<f64> {
        self.alpha[k].component_mul(&self.beta[k])
    }
}

fn check_evidence(dim: usize, evid: &[DVector<f64>]) -> Result<()> {
    if evid.is_empty() {
        return Err(Error::invalid("empty embedding sequence"));
    }
    for v in evid {
        if v.len() != dim {
            return Err(Error::DimensionMismatch { what: "embedding length", expected: dim, got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::invalid("embedding entries must be finite and nonnegative"));
        }
    }
    Ok(())
}

/// Forward/backward pass. Evidence must be nonempty with matching dimensions.
pub fn messages(chain: &Chain, evid: &[DVector<f64>]) -> Messages {
    let t = evid.len();
    let mut alpha = Vec::with_capacity(t);
    let mut alpha_scale = Vec::with_capacity(t.saturating_sub(1));
    let mut a = chain.first.clone();
    normalize_l1(&mut a);
    alpha.push(a);
    for k in 0..t.saturating_sub(1) {
        let mut next = chain.op.apply(&alpha[k].component_mul(&evid[k]));
        alpha_scale.push(normalize_l1(&mut next));
        alpha.push(next);
    }
    let n = chain.dim();
    let mut beta = vec![DVector::zeros(n); t];
    let mut beta_scale = vec![1.0; t];
    beta[t - 1] = DVector::from_element(n, 1.0 / n as f64);
    for k in (1..t).rev() {
        let mut prev = chain.op.apply_t(&evid[k].component_mul(&beta[k]));
        beta_scale[k] = normalize_l1(&mut prev);
        beta[k - 1] = prev;
    }
    Messages { alpha, beta, alpha_scale, beta_scale }
}

/// Log-probability of the whole evidence sequence (`-inf` if zero).
pub fn log_evidence(chain: &Chain, evid: &[DVector<f64>], msgs: &Messages) -> f64 {
    let t = evid.len();
    let last: f64 = msgs.alpha[t - 1].component_mul(&evid[t - 1]).sum();
    let first_mass = l1_norm(&chain.first);
    msgs.alpha_scale.iter().map(|s| s.ln()).sum::<f64>() + last.ln() + first_mass.ln()
}

/// `P(H_i | v_{-i})` for position `i = k + 1`; `None` when the mass is zero.
pub fn leave_one_out_posterior(msgs: &Messages, k: usize) -> Option<DVector<f64>> {
    let mut tau = msgs.tau(k);
    (normalize_l1(&mut tau) > 0.0).then_some(tau)
}

/// `P(H_i | v_{1..t})` for position `i = k + 1`.
pub fn smoothed_posterior(msgs: &Messages, evid: &[DVector<f64>], k: usize) -> Option<DVector<f64>> {
    let mut p = msgs.tau(k).component_mul(&evid[k]);
    (normalize_l1(&mut p) > 0.0).then_some(p)
}

/// `P(H_0 | v_{1..t})`.
pub fn initial_posterior(chain: &Chain, evid: &[DVector<f64>], msgs: &Messages) -> Option<DVector<f64>> {
    let back = chain.op.apply_t(&evid[0].component_mul(&msgs.beta[0]));
    let mut p = chain.start.component_mul(&back);
    (normalize_l1(&mut p) > 0.0).then_some(p)
}

/// Per-position conditional token distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    /// 1-based positions the distributions refer to.
    pub positions: Vec<usize>,
    pub dists: Vec<DVector<f64>>,
    /// Set where the conditioning evidence has zero mass; the distribution is all zeros.
    pub zero: Vec<bool>,
}

impl OracleOutput {
    /// Distribution at 1-based position `pos`, if present.
    pub fn at(&self, pos: usize) -> Option<&DVector<f64>> {
        self.positions.iter().position(|&p| p == pos).map(|k| &self.dists[k])
    }
}

/// `W tau / |tau|_1`, or zeros when `tau` vanishes.
pub fn readout(emission: &DMatrix<f64>, tau: &DVector<f64>) -> (DVector<f64>, bool) {
    let s = l1_norm(tau);
    if s > 0.0 {
        ((emission * tau) / s, false)
    } else {
        (DVector::zeros(emission.nrows()), true)
    }
}

/// Proper embedding of `token`: row `token` of the emission matrix.
pub fn proper_embedding(params: &HmmParams, token: usize) -> Result<DVector<f64>> {
    params.check_token(token)?;
    Ok(params.emission.row(token).transpose())
}

/// No-evidence embedding for a masked position.
pub fn mask_embedding(dim: usize) -> DVector<f64> {
    DVector::from_element(dim, 1.0)
}

/// Embeds a partially observed sequence; `None` becomes the mask embedding.
pub fn embed_observations(params: &HmmParams, obs: &[Option<usize>]) -> Result<Vec<DVector<f64>>> {
    obs.iter()
        .map(|o| match o {
            Some(z) => proper_embedding(params, *z),
            None => Ok(mask_embedding(params.n_hidden)),
        })
        .collect()
}

/// Extended oracle on arbitrary nonnegative embeddings, at every position.
pub fn gbar(params: &HmmParams, embeds: &[DVector<f64>]) -> Result<OracleOutput> {
    let chain = Chain::from_hmm(params);
    check_evidence(chain.dim(), embeds)?;
    Ok(gbar_chain(&chain, &params.emission, embeds))
}

pub(crate) fn gbar_chain(chain: &Chain, emission: &DMatrix<f64>, embeds: &[DVector<f64>]) -> OracleOutput {
    let msgs = messages(chain, embeds);
    let mut dists = Vec::with_capacity(embeds.len());
    let mut zero = Vec::with_capacity(embeds.len());
    for k in 0..embeds.len() {
        let (d, z) = readout(emission, &msgs.tau(k));
        dists.push(d);
        zero.push(z);
    }
    OracleOutput { positions: (1..=embeds.len()).collect(), dists, zero }
}

/// Masked-LM oracle: `P(X_i | X_{-i})` for each 1-based position in `masked`.
/// Other masked positions are marginalised.
pub fn mlm_oracle(params: &HmmParams, tokens: &[usize], masked: &[usize]) -> Result<OracleOutput> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    let mut obs: Vec<Option<usize>> = tokens.iter().map(|&z| Some(z)).collect();
    for &i in masked {
        if i == 0 || i > tokens.len() {
            return Err(Error::invalid(format!("masked position {i} outside 1..={}", tokens.len())));
        }
        obs[i - 1] = None;
    }
    let embeds = embed_observations(params, &obs)?;
    let full = gbar(params, &embeds)?;
    let mut out = OracleOutput { positions: Vec::new(), dists: Vec::new(), zero: Vec::new() };
    for &i in masked {
        out.positions.push(i);
        out.dists.push(full.dists[i - 1].clone());
        out.zero.push(full.zero[i - 1]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enumerate::enumerate_conditionals;
    use crate::model::{random_hmm, DEFAULT_CAP};
    use approx::assert_abs_diff_eq;

    fn symmetric() -> HmmParams {
        HmmParams::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]),
            DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.8]),
            DVector::from_vec(vec![0.5, 0.5]),
        )
        .unwrap()
    }

    #[test]
    fn four_path_value() {
        let out = mlm_oracle(&symmetric(), &[1, 0], &[1]).unwrap();
        assert_abs_diff_eq!(out.dists[0][0], 0.644, epsilon = 1e-12);
    }

    #[test]
    fn masked_token_does_not_matter() {
        let p = random_hmm(3, 3, 4).unwrap();
        let a = mlm_oracle(&p, &[0, 1, 2, 3], &[2]).unwrap();
        let b = mlm_oracle(&p, &[0, 3, 2, 3], &[2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_state_outputs_its_column() {
        let p = random_hmm(1, 1, 5).unwrap();
        let out = mlm_oracle(&p, &[0, 4, 2], &[1, 2, 3]).unwrap();
        for d in &out.dists {
            assert_abs_diff_eq!(*d, p.emission.column(0).into_owned(), epsilon = 1e-12);
        }
    }

    #[test]
    fn all_ones_prompt_equals_masked_first_position() {
        let p = symmetric();
        let embeds = vec![mask_embedding(2), proper_embedding(&p, 0).unwrap(), proper_embedding(&p, 1).unwrap()];
        let out = gbar(&p, &embeds).unwrap();
        let e = enumerate_conditionals(&p, &[None, None, Some(1)], DEFAULT_CAP).unwrap();
        assert_abs_diff_eq!(out.dists[1], e[1].dist, epsilon = 1e-12);
    }

    #[test]
    fn zero_prompt_under_excluded_start_gives_zero_output() {
        let p = HmmParams::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 0.0]),
        )
        .unwrap();
        let embeds = vec![DVector::zeros(2), proper_embedding(&p, 0).unwrap()];
        let out = gbar(&p, &embeds).unwrap();
        assert!(out.zero[1]);
        assert_eq!(out.dists[1].sum(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = symmetric();
        assert!(matches!(gbar(&p, &[DVector::zeros(3)]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn likelihood_matches_brute_force() {
        let p = random_hmm(8, 3, 4).unwrap();
        let obs = [Some(1), Some(3), None, Some(0)];
        let ev = embed_observations(&p, &obs).unwrap();
        let chain = Chain::from_hmm(&p);
        let m = messages(&chain, &ev);
        let sums = crate::enumerate::path_sums(&p, &obs, DEFAULT_CAP).unwrap();
        assert_abs_diff_eq!(log_evidence(&chain, &ev, &m).exp(), sums.total, epsilon = 1e-14);
        let post = initial_posterior(&chain, &ev, &m).unwrap();
        assert_abs_diff_eq!(post, sums.joint[0].clone() / sums.total, epsilon = 1e-12);
    }
}
