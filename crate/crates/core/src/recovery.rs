//! Constructive heads and prompts that recover downstream labels from the
//! oracle outputs, and the rules that evaluate them.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::assumptions::{check_nondegenerate_emissions, check_regularity, check_relaxed_vanilla, check_stationary, CertTag, RecoveryCertificate, STATIONARY_TOL};
use crate::inference::{embed_observations, gbar, gbar_mem, lift_embedding, lifted_evidence, mask_embedding, mem_proper_embedding, proper_embedding, MemShape};
use crate::io::ParamDoc;
use crate::linalg::{left_inverse, select_columns};
use crate::model::{HmmParams, MemHmmParams};
use crate::{Error, Result};

/// Absolute tolerance on key scores when forming the attended set.
pub const ARGMAX_TOL: f64 = 1e-9;

/// `1(b . g >= 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weights: DVector<f64>,
}

impl LinearHead {
    pub fn new(weights: DVector<f64>) -> Result<Self> {
        if weights.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("linear head weights".into()));
        }
        Ok(Self { weights })
    }

    pub fn score(&self, g: &DVector<f64>) -> f64 {
        self.weights.dot(g)
    }

    pub fn to_doc(&self) -> ParamDoc {
        ParamDoc::new("linear_head").vector("weights", &self.weights)
    }

    pub fn from_doc(doc: &ParamDoc) -> Result<Self> {
        Self::new(doc.get_vector("weights")?)
    }
}

pub fn eval_linear(head: &LinearHead, g: &DVector<f64>) -> u8 {
    u8::from(head.score(g) >= 0.0)
}

/// Soft prompt: one embedding vector with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptVector {
    pub entries: DVector<f64>,
}

impl PromptVector {
    pub fn new(entries: DVector<f64>) -> Result<Self> {
        if entries.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::invalid("prompt entries must lie in [0, 1]"));
        }
        Ok(Self { entries })
    }

    pub fn to_doc(&self) -> ParamDoc {
        ParamDoc::new("prompt").vector("entries", &self.entries)
    }

    pub fn from_doc(doc: &ParamDoc) -> Result<Self> {
        Self::new(doc.get_vector("entries")?)
    }
}

/// Hard-attention head. Key scores are `q . (key G_i + offset_i)`; the
/// output is the mean value over all positions within `argmax_tol` of the
/// best score, with value `b . ((value G_i) * e_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub query: DVector<f64>,
    pub key: DMatrix<f64>,
    /// Offsets for positions `1..`; missing trailing offsets are zero.
    pub offsets: Vec<DVector<f64>>,
    pub value: DMatrix<f64>,
    pub value_weights: DVector<f64>,
    pub argmax_tol: f64,
}

impl AttentionHead {
    pub fn new(query: DVector<f64>, key: DMatrix<f64>, offsets: Vec<DVector<f64>>, value: DMatrix<f64>, value_weights: DVector<f64>, argmax_tol: f64) -> Result<Self> {
        if key.nrows() != query.len() {
            return Err(Error::DimensionMismatch { what: "key rows", expected: query.len(), got: key.nrows() });
        }
        if let Some(o) = offsets.iter().find(|o| o.len() != query.len()) {
            return Err(Error::DimensionMismatch { what: "offset length", expected: query.len(), got: o.len() });
        }
        if value.nrows() != value_weights.len() {
            return Err(Error::DimensionMismatch { what: "value rows", expected: value_weights.len(), got: value.nrows() });
        }
        if value.ncols() != key.ncols() {
            return Err(Error::DimensionMismatch { what: "value columns", expected: key.ncols(), got: value.ncols() });
        }
        if !(argmax_tol > 0.0) {
            return Err(Error::invalid("argmax tolerance must be positive"));
        }
        Ok(Self { query, key, offsets, value, value_weights, argmax_tol })
    }

    pub fn key_score(&self, pos: usize, g: &DVector<f64>) -> f64 {
        let mut s = self.query.dot(&(&self.key * g));
        if let Some(o) = self.offsets.get(pos) {
            s += self.query.dot(o);
        }
        s
    }

    /// `b . ((value g) * e)`.
    pub fn value_of(&self, g: &DVector<f64>, e: &DVector<f64>) -> f64 {
        (&self.value * g).component_mul(e).dot(&self.value_weights)
    }

    pub fn to_doc(&self) -> ParamDoc {
        let mut doc = ParamDoc::new("attention_head")
            .vector("query", &self.query)
            .matrix("key", &self.key)
            .matrix("value", &self.value)
            .vector("value_weights", &self.value_weights)
            .scalar("argmax_tol", self.argmax_tol);
        for (i, o) in self.offsets.iter().enumerate() {
            doc = doc.vector(&format!("offset_{i:04}"), o);
        }
        doc
    }

    pub fn from_doc(doc: &ParamDoc) -> Result<Self> {
        let offsets = doc
            .vectors
            .iter()
            .filter(|(k, _)| k.starts_with("offset_"))
            .map(|(_, v)| DVector::from_vec(v.clone()))
            .collect();
        Self::new(
            doc.get_vector("query")?,
            doc.get_matrix("key")?,
            offsets,
            doc.get_matrix("value")?,
            doc.get_vector("value_weights")?,
            doc.get_scalar("argmax_tol")?,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionEval {
    pub score: f64,
    pub label: u8,
    /// 0-based indices of attended positions.
    pub attended: Vec<usize>,
    pub key_scores: Vec<f64>,
}

pub fn eval_attention(head: &AttentionHead, outputs: &[DVector<f64>], values: &[DVector<f64>]) -> Result<AttentionEval> {
    if outputs.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    if outputs.len() != values.len() {
        return Err(Error::DimensionMismatch { what: "value embeddings", expected: outputs.len(), got: values.len() });
    }
    let key_scores: Vec<f64> = outputs.iter().enumerate().map(|(i, g)| head.key_score(i, g)).collect();
    let best = key_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let attended: Vec<usize> = (0..outputs.len()).filter(|&i| key_scores[i] >= best - head.argmax_tol).collect();
    let score = attended.iter().map(|&i| head.value_of(&outputs[i], &values[i])).sum::<f64>() / attended.len() as f64;
    Ok(AttentionEval { score, label: u8::from(score >= 0.0), attended, key_scores })
}

/// Softmax-weighted attention at temperature `temperature`.
pub fn eval_attention_soft(head: &AttentionHead, outputs: &[DVector<f64>], values: &[DVector<f64>], temperature: f64) -> Result<f64> {
    if outputs.is_empty() || outputs.len() != values.len() {
        return Err(Error::invalid("outputs and values must be nonempty and of equal length"));
    }
    let keys: Vec<f64> = outputs.iter().enumerate().map(|(i, g)| head.key_score(i, g)).collect();
    let w = crate::linalg::softmax(&keys, temperature);
    Ok(w.iter().zip(outputs.iter().zip(values)).map(|(w, (g, e))| w * head.value_of(g, e)).sum())
}

fn refuse(verdict: &crate::assumptions::Verdict) -> Error {
    Error::AssumptionFailed(format!("{}: {:?} {}", verdict.name, verdict.reasons, verdict.detail))
}

fn check_weight_len(q_star: &DVector<f64>, n: usize) -> Result<()> {
    if q_star.len() != n {
        return Err(Error::DimensionMismatch { what: "task weight", expected: n, got: q_star.len() });
    }
    Ok(())
}

/// Linear head on the output at a masked first position:
/// `b = W^+T diag(P(H_0) / P(H_1)) q*`.
pub fn construct_linear_head_thm1(params: &HmmParams, q_star: &DVector<f64>, tol: f64) -> Result<LinearHead> {
    check_weight_len(q_star, params.n_hidden)?;
    let em = check_nondegenerate_emissions(&params.emission, tol);
    if !em.verdict.pass {
        return Err(refuse(&em.verdict));
    }
    let reg = check_regularity(&params.transition, &params.start);
    if !reg.pass {
        return Err(refuse(&reg));
    }
    let pinv = em.left_inverse.expect("left inverse on pass");
    let first = params.first_marginal();
    let rescaled = DVector::from_fn(params.n_hidden, |h, _| q_star[h] * params.start[h] / first[h]);
    LinearHead::new(pinv.tr_mul(&rescaled))
}

/// Oracle output at position 1 of `(mask, x_1, .., x_T)`.
pub fn masked_first_feature(params: &HmmParams, tokens: &[usize]) -> Result<DVector<f64>> {
    let mut obs = vec![None];
    obs.extend(tokens.iter().map(|&z| Some(z)));
    let out = gbar(params, &embed_observations(params, &obs)?)?;
    Ok(out.dists[0].clone())
}

#[derive(Debug, Clone)]
pub struct PromptHead {
    pub prompt: PromptVector,
    pub head: LinearHead,
    pub certificate: RecoveryCertificate,
}

/// Prompt `1_B` followed by a masked position, with a head reading the
/// masked output: `b = W_*^+T diag(P(H_0) / c) q*` where
/// `c = A (prompt * P(H_1))` and `W_*^+` is the left inverse of the
/// essential columns padded with zero rows.
pub fn construct_prompt_head_thm2(params: &HmmParams, q_star: &DVector<f64>, h_star: &[usize], b_set: &[usize], tol: f64) -> Result<PromptHead> {
    check_weight_len(q_star, params.n_hidden)?;
    let reg = check_regularity(&params.transition, &params.start);
    if !reg.pass {
        return Err(refuse(&reg));
    }
    let relaxed = check_relaxed_vanilla(params, q_star, h_star, b_set, tol);
    let certificate = match relaxed.certificate {
        Some(c) if relaxed.verdict.pass => c,
        _ => return Err(refuse(&relaxed.verdict)),
    };
    let n = params.n_hidden;
    let mut pi = DVector::zeros(n);
    for &b in b_set {
        pi[b] = 1.0;
    }
    let c = &params.transition * pi.component_mul(&params.first_marginal());
    let cols = &certificate.sets.h_star;
    let pinv = left_inverse(&select_columns(&params.emission, cols));
    let mut weights = DVector::zeros(params.n_vocab);
    for (r, &h) in cols.iter().enumerate() {
        if c[h] <= 0.0 {
            return Err(Error::AssumptionFailed(format!("prompt leaves essential state {h} unreachable")));
        }
        let coef = q_star[h] * params.start[h] / c[h];
        weights += pinv.row(r).transpose() * coef;
    }
    Ok(PromptHead { prompt: PromptVector::new(pi)?, head: LinearHead::new(weights)?, certificate })
}

/// Oracle output at position 2 of `(prompt, mask, x_1, .., x_T)`, and
/// whether the conditioning mass was zero there.
pub fn prompt_masked_feature(params: &HmmParams, prompt: &PromptVector, tokens: &[usize]) -> Result<(DVector<f64>, bool)> {
    let mut embeds = vec![prompt.entries.clone(), mask_embedding(params.n_hidden)];
    for &z in tokens {
        embeds.push(proper_embedding(params, z)?);
    }
    let out = gbar(params, &embeds)?;
    Ok((out.dists[1].clone(), out.zero[1]))
}

fn check_cert(cert: &RecoveryCertificate, tag: CertTag, j_star: usize, s_star: &[usize], m_star: Option<&[usize]>) -> Result<()> {
    let s: Vec<usize> = s_star.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mismatch = cert.tag != tag
        || cert.sets.j_star != Some(j_star)
        || cert.sets.s_star != s
        || m_star.is_some_and(|m| cert.sets.m_star != m);
    if mismatch {
        return Err(Error::AssumptionFailed("certificate does not match the requested sets".into()));
    }
    cert.verify().map_err(|e| Error::AssumptionFailed(format!("certificate replay failed: {e}")))
}

/// Key rows `1^T B^(h)` for recovered states, `1^T B_bar` on the lowest
/// state outside them, and value rows `(W_{:, (mems, h)})^+ B^(h)`.
fn attention_blocks(params: &MemHmmParams, j_star: usize, mems: &[usize], q_star: &DVector<f64>, cert: &RecoveryCertificate) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let nh = params.n_hidden();
    let nz = params.n_vocab;
    let h_star = &cert.sets.h_star;
    let mut key = DMatrix::zeros(nh + 1, nz);
    let mut value = DMatrix::zeros(params.mem_size * nh, nz);
    for (g, &h) in h_star.iter().enumerate() {
        let rec = &cert.recovery[g];
        key.row_mut(h).copy_from(&rec.row_sum());
        let cols: Vec<usize> = mems.iter().map(|&m| params.emission_index(m, h)).collect();
        let theta = left_inverse(&select_columns(&params.emission, &cols)) * rec;
        for (r, &m) in mems.iter().enumerate() {
            value.row_mut(params.emission_index(m, h)).copy_from(&theta.row(r));
        }
    }
    if let Some(h_bar) = (0..nh).find(|h| !h_star.contains(h)) {
        key.row_mut(h_bar).copy_from(&cert.complement_recovery.row_sum());
    }
    let mut b = DVector::zeros(params.mem_size * nh);
    for s in 0..params.syntax_size {
        let h = params.hidden_index(j_star, s);
        for m in 0..params.mem_size {
            b[params.emission_index(m, h)] = q_star[m];
        }
    }
    (key, value, b)
}

fn state_indicator(params: &MemHmmParams, h_star: &[usize], last: f64) -> DVector<f64> {
    let mut q = DVector::zeros(params.n_hidden() + 1);
    for &h in h_star {
        q[h] = 1.0;
    }
    q[params.n_hidden()] = last;
    q
}

/// Attention head over the oracle outputs of a memory-augmented model.
pub fn construct_attention_thm3(params: &MemHmmParams, q_star: &DVector<f64>, j_star: usize, s_star: &[usize], cert: &RecoveryCertificate) -> Result<AttentionHead> {
    check_weight_len(q_star, params.mem_size)?;
    let reg = check_regularity(&params.transition, &params.start);
    if !reg.pass {
        return Err(refuse(&reg));
    }
    check_cert(cert, CertTag::Recoverable, j_star, s_star, None)?;
    let mems: Vec<usize> = (0..params.mem_size).collect();
    let (key, value, b) = attention_blocks(params, j_star, &mems, q_star, cert);
    let query = state_indicator(params, &cert.sets.h_star, 0.0);
    AttentionHead::new(query, key, Vec::new(), value, b, ARGMAX_TOL)
}

/// Per-position oracle outputs paired with value embeddings.
pub type OutputsValues = (Vec<DVector<f64>>, Vec<DVector<f64>>);

/// Oracle outputs `P(X_i | x_{-i})` at every position, and value embeddings
/// (emission rows of the observed tokens).
pub fn mem_attention_inputs(params: &MemHmmParams, tokens: &[usize]) -> Result<OutputsValues> {
    let obs: Vec<Option<usize>> = tokens.iter().map(|&z| Some(z)).collect();
    let out = gbar_mem(params, &lifted_evidence(params, &obs)?)?;
    let values = tokens.iter().map(|&z| mem_proper_embedding(params, z)).collect::<Result<_>>()?;
    Ok((out.dists, values))
}

#[derive(Debug, Clone)]
pub struct PromptAttention {
    /// Prompt over the lifted state space.
    pub prompt: PromptVector,
    pub head: AttentionHead,
}

/// Prompt that keeps only memory assignments with `m_{j*}` in the support of
/// `q*`, followed by an attention head that never attends to the prompt.
pub fn construct_prompt_attention_thm4(params: &MemHmmParams, q_star: &DVector<f64>, j_star: usize, s_star: &[usize], cert: &RecoveryCertificate) -> Result<PromptAttention> {
    check_weight_len(q_star, params.mem_size)?;
    let reg = check_regularity(&params.transition, &params.start);
    if !reg.pass {
        return Err(refuse(&reg));
    }
    let st = check_stationary(&params.transition, &params.start, STATIONARY_TOL);
    if !st.pass {
        return Err(refuse(&st));
    }
    let m_star: Vec<usize> = (0..params.mem_size).filter(|&m| q_star[m] != 0.0).collect();
    check_cert(cert, CertTag::RecoverablePrompt, j_star, s_star, Some(&m_star))?;
    let nh = params.n_hidden();
    let prompt = DVector::from_fn(params.n_lifted(), |l, _| {
        let config = l / nh;
        if m_star.contains(&params.cell_value(config, j_star)) {
            1.0
        } else {
            0.0
        }
    });
    let (key, value, b) = attention_blocks(params, j_star, &m_star, q_star, cert);
    let query = state_indicator(params, &cert.sets.h_star, 1.0);
    // the prompt position's output is a probability vector, so its key
    // score before the offset is at most |key^T q|_inf
    let reach = key.tr_mul(&query).amax();
    let mut first = DVector::zeros(nh + 1);
    first[nh] = -(1.0 + reach.max(1.0));
    let head = AttentionHead::new(query, key, vec![first], value, b, ARGMAX_TOL)?;
    Ok(PromptAttention { prompt: PromptVector::new(prompt)?, head })
}

/// Outputs of `(prompt, eta(e(x_1)), ..)` at positions `1..=T+1` and value
/// embeddings, zero at the prompt position.
pub fn mem_prompt_attention_inputs(params: &MemHmmParams, prompt: &PromptVector, tokens: &[usize]) -> Result<OutputsValues> {
    let shape = MemShape::of(params);
    let mut embeds = vec![prompt.entries.clone()];
    let mut values = vec![DVector::zeros(shape.emission_dim())];
    for &z in tokens {
        let e = mem_proper_embedding(params, z)?;
        embeds.push(lift_embedding(shape, &e)?);
        values.push(e);
    }
    let out = gbar_mem(params, &embeds)?;
    Ok((out.dists, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_hmm;

    fn head_1d(q: f64) -> AttentionHead {
        AttentionHead::new(
            DVector::from_vec(vec![q]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            Vec::new(),
            DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            DVector::from_vec(vec![1.0]),
            ARGMAX_TOL,
        )
        .unwrap()
    }

    #[test]
    fn linear_rule() {
        let h = LinearHead::new(DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(eval_linear(&h, &DVector::zeros(2)), 1);
        assert_eq!(eval_linear(&h, &DVector::from_vec(vec![0.7, 0.3])), 1);
        let neg = LinearHead::new(-h.weights.clone()).unwrap();
        assert_eq!(eval_linear(&neg, &DVector::from_vec(vec![0.7, 0.3])), 0);
    }

    #[test]
    fn attended_set_rules() {
        let one = DVector::from_element(1, 1.0);
        let g = |a: f64| DVector::from_vec(vec![a, 1.0 - a]);
        let head = head_1d(1.0);
        let all = eval_attention(&head, &[g(0.5), g(0.5), g(0.5)], &[one.clone(), one.clone(), one.clone()]).unwrap();
        assert_eq!(all.attended, vec![0, 1, 2]);
        let single = eval_attention(&head, &[g(0.2), g(0.9), g(0.5)], &[one.clone(), one.clone(), one.clone()]).unwrap();
        assert_eq!(single.attended, vec![1]);
        assert!((single.score - 0.8).abs() < 1e-15);
        let scaled = eval_attention(&head_1d(7.0), &[g(0.2), g(0.9), g(0.5)], &[one.clone(), one.clone(), one]).unwrap();
        assert_eq!(scaled.attended, single.attended);
        assert!(eval_attention(&head, &[], &[]).is_err());
    }

    #[test]
    fn identity_emission_stationary_start_gives_q_star() {
        let t = DMatrix::from_row_slice(3, 3, &[0.2, 0.3, 0.5, 0.3, 0.5, 0.2, 0.5, 0.2, 0.3]);
        let params = HmmParams::new(t, DMatrix::identity(3, 3), DVector::from_element(3, 1.0 / 3.0)).unwrap();
        let q = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let head = construct_linear_head_thm1(&params, &q, crate::linalg::RANK_TOL).unwrap();
        assert!((head.weights - q).amax() < 1e-12);
    }

    #[test]
    fn degenerate_emissions_are_refused() {
        let params = random_hmm(2, 5, 3).unwrap();
        let err = construct_linear_head_thm1(&params, &DVector::from_element(5, 1.0), crate::linalg::RANK_TOL);
        assert!(matches!(err, Err(Error::AssumptionFailed(_))));
    }

    #[test]
    fn head_documents_round_trip() {
        let head = head_1d(2.0);
        let doc = ParamDoc::from_json(&head.to_doc().to_json().unwrap()).unwrap();
        assert_eq!(AttentionHead::from_doc(&doc).unwrap(), head);
    }
}
