//! Non-degeneracy, regularity and stationarity checks with numerical
//! certificates.
//!
//! Rank decisions compare the recorded singular-value gap
//! `sigma_min / sigma_max` against the tolerance: a check passes exactly when
//! `gap > tol`.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::io::ParamDoc;
use crate::linalg::{hstack, left_inverse, rank_info, select_columns, span_basis, RankInfo, RANK_TOL};
use crate::model::{HmmParams, MemHmmParams};

/// Default tolerance for stationarity checks.
pub const STATIONARY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    RankDeficient,
    MoreColumnsThanRows,
    NotIrreducible,
    Periodic,
    StartNotFullSupport,
    WeightOutsideEssential,
    ReachableSetMismatch,
    IndexOutOfRange,
    EmptySet,
    PrimaryDependent,
    /// Stacked basis is rank deficient although every pair of spans meets trivially.
    DirectSumFailsPairwiseTrivial,
    /// Some pair of spans has a nontrivial intersection.
    SpansIntersect,
    NotStationary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: &'static str,
    pub pass: bool,
    pub reasons: Vec<Reason>,
    /// Singular-value gap or residual, depending on the check.
    pub gap: Option<f64>,
    pub tol: f64,
    pub detail: String,
}

impl Verdict {
    fn new(name: &'static str, tol: f64) -> Self {
        Self { name, pass: true, reasons: Vec::new(), gap: None, tol, detail: String::new() }
    }

    fn fail(&mut self, reason: Reason, detail: impl Into<String>) {
        self.pass = false;
        if !self.reasons.contains(&reason) {
            self.reasons.push(reason);
        }
        let d = detail.into();
        if !d.is_empty() {
            if !self.detail.is_empty() {
                self.detail.push_str("; ");
            }
            self.detail.push_str(&d);
        }
    }
}

/// Full column rank of the emission matrix, with its left inverse on pass.
#[derive(Debug, Clone)]
pub struct EmissionCheck {
    pub verdict: Verdict,
    pub rank: RankInfo,
    pub left_inverse: Option<DMatrix<f64>>,
}

pub fn check_nondegenerate_emissions(emission: &DMatrix<f64>, tol: f64) -> EmissionCheck {
    let mut verdict = Verdict::new("nondegenerate_emissions", tol);
    let rank = rank_info(emission, tol);
    verdict.gap = Some(rank.gap);
    if emission.ncols() > emission.nrows() {
        verdict.fail(Reason::MoreColumnsThanRows, format!("{} columns, {} rows", emission.ncols(), emission.nrows()));
    }
    if !rank.full_column_rank(tol) {
        verdict.fail(Reason::RankDeficient, format!("rank {} of {} columns", rank.rank, rank.columns));
    }
    let left_inverse = verdict.pass.then(|| left_inverse(emission));
    EmissionCheck { verdict, rank, left_inverse }
}

fn reachable(adj: &[Vec<usize>], from: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; adj.len()];
    level[from] = Some(0);
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        let lu = level[u].expect("queued nodes have levels");
        for &v in &adj[u] {
            if level[v].is_none() {
                level[v] = Some(lu + 1);
                queue.push_back(v);
            }
        }
    }
    level
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Strong connectivity and period of the graph of positive transitions.
/// Returns `(irreducible, period)`; the period is only meaningful when irreducible.
pub fn chain_structure(transition: &DMatrix<f64>) -> (bool, usize) {
    let n = transition.nrows();
    let mut fwd = vec![Vec::new(); n];
    let mut bwd = vec![Vec::new(); n];
    for from in 0..n {
        for to in 0..n {
            if transition[(to, from)] > 0.0 {
                fwd[from].push(to);
                bwd[to].push(from);
            }
        }
    }
    let lf = reachable(&fwd, 0);
    let lb = reachable(&bwd, 0);
    let irreducible = lf.iter().all(Option::is_some) && lb.iter().all(Option::is_some);
    if !irreducible {
        return (false, 0);
    }
    let mut g = 0;
    for (u, targets) in fwd.iter().enumerate() {
        for &v in targets {
            let lu = lf[u].expect("irreducible");
            let lv = lf[v].expect("irreducible");
            g = gcd(g, (lu + 1).abs_diff(lv));
        }
    }
    (true, g)
}

/// Ergodic chain (irreducible and aperiodic) started from a full-support distribution.
pub fn check_regularity(transition: &DMatrix<f64>, start: &DVector<f64>) -> Verdict {
    let mut v = Verdict::new("regularity", 0.0);
    let (irreducible, period) = chain_structure(transition);
    if !irreducible {
        v.fail(Reason::NotIrreducible, "transition graph is not strongly connected");
    } else if period != 1 {
        v.fail(Reason::Periodic, format!("period {period}"));
    }
    if let Some(h) = start.iter().position(|&p| p <= 0.0) {
        v.fail(Reason::StartNotFullSupport, format!("start has zero mass on state {h}"));
    }
    v
}

pub fn check_regularity_hmm(params: &HmmParams) -> Verdict {
    check_regularity(&params.transition, &params.start)
}

/// `|A start - start|_inf <= tol`.
pub fn check_stationary(transition: &DMatrix<f64>, start: &DVector<f64>, tol: f64) -> Verdict {
    let mut v = Verdict::new("stationary", tol);
    let residual = (transition * start - start).amax();
    v.gap = Some(residual);
    if residual > tol {
        v.fail(Reason::NotStationary, format!("residual {residual:e}"));
    }
    v
}

fn support(v: &DVector<f64>) -> BTreeSet<usize> {
    v.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(i, _)| i).collect()
}

fn column_support(m: &DMatrix<f64>, col: usize) -> BTreeSet<usize> {
    m.column(col).iter().enumerate().filter(|(_, x)| **x > 0.0).map(|(i, _)| i).collect()
}

/// Essential-state condition for vanilla prompt recovery.
#[derive(Debug, Clone)]
pub struct RelaxedCheck {
    pub verdict: Verdict,
    pub certificate: Option<RecoveryCertificate>,
}

pub fn check_relaxed_vanilla(params: &HmmParams, q_star: &DVector<f64>, h_star: &[usize], b_set: &[usize], tol: f64) -> RelaxedCheck {
    let mut v = Verdict::new("relaxed_vanilla", tol);
    let n = params.n_hidden;
    if q_star.len() != n || h_star.iter().chain(b_set).any(|&h| h >= n) {
        v.fail(Reason::IndexOutOfRange, "state index or weight length out of range");
        return RelaxedCheck { verdict: v, certificate: None };
    }
    if h_star.is_empty() || b_set.is_empty() {
        v.fail(Reason::EmptySet, "essential set and source set must be nonempty");
        return RelaxedCheck { verdict: v, certificate: None };
    }
    let hs: BTreeSet<usize> = h_star.iter().copied().collect();
    if !support(q_star).is_subset(&hs) {
        v.fail(Reason::WeightOutsideEssential, "task weight has support outside the essential set");
    }
    let cols: Vec<usize> = hs.iter().copied().collect();
    let block = select_columns(&params.emission, &cols);
    let rank = rank_info(&block, tol);
    v.gap = Some(rank.gap);
    if !rank.full_column_rank(tol) {
        v.fail(Reason::RankDeficient, format!("essential columns have rank {} of {}", rank.rank, cols.len()));
    }
    let reach: BTreeSet<usize> = b_set.iter().flat_map(|&b| column_support(&params.transition, b)).collect();
    if reach != hs {
        v.fail(Reason::ReachableSetMismatch, format!("one-step reachable set {reach:?} differs from essential set {hs:?}"));
    }
    let certificate = v.pass.then(|| {
        let mut cert = RecoveryCertificate::from_stack(CertTag::RelaxedVanilla, tol, &[block], &DMatrix::zeros(params.n_vocab, 0));
        cert.sets.h_star = cols.clone();
        cert.sets.b_set = b_set.to_vec();
        cert
    });
    RelaxedCheck { verdict: v, certificate }
}

/// First (lexicographic, smallest size first) source set of size at most
/// `k_max` whose one-step reachable set is exactly `h_star`.
pub fn search_b_set(transition: &DMatrix<f64>, h_star: &[usize], k_max: usize) -> Option<Vec<usize>> {
    let target: BTreeSet<usize> = h_star.iter().copied().collect();
    if target.is_empty() {
        return None;
    }
    let candidates: Vec<(usize, BTreeSet<usize>)> = (0..transition.ncols())
        .map(|c| (c, column_support(transition, c)))
        .filter(|(_, s)| s.is_subset(&target))
        .collect();
    fn rec(cands: &[(usize, BTreeSet<usize>)], from: usize, k: usize, chosen: &mut Vec<usize>, union: &BTreeSet<usize>, target: &BTreeSet<usize>) -> bool {
        if chosen.len() == k {
            return union == target;
        }
        for i in from..cands.len() {
            chosen.push(cands[i].0);
            let u: BTreeSet<usize> = union.union(&cands[i].1).copied().collect();
            if rec(cands, i + 1, k, chosen, &u, target) {
                return true;
            }
            chosen.pop();
        }
        false
    }
    for k in 1..=k_max {
        let mut chosen = Vec::new();
        if rec(&candidates, 0, k, &mut chosen, &BTreeSet::new(), &target) {
            return Some(chosen);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CertTag {
    RelaxedVanilla,
    Recoverable,
    RecoverablePrompt,
    SpanDisjoint,
}

/// Index sets the certificate was built for.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CertSets {
    pub h_star: Vec<usize>,
    pub s_star: Vec<usize>,
    pub m_star: Vec<usize>,
    pub b_set: Vec<usize>,
    pub j_star: Option<usize>,
}

/// Direct-sum certificate: stacked primary bases and a complement basis with
/// their least-squares recovery maps.
#[derive(Debug, Clone)]
pub struct RecoveryCertificate {
    pub tag: CertTag,
    pub tol: f64,
    /// Residual bound used when replaying the certificate.
    pub replay_tol: f64,
    pub gap: f64,
    /// Column ranges `(start, len)` of each primary block in `stacked`.
    pub blocks: Vec<(usize, usize)>,
    /// Orthonormal basis of the complement span.
    pub complement_basis: DMatrix<f64>,
    pub stacked: DMatrix<f64>,
    pub stacked_pinv: DMatrix<f64>,
    /// `B^(g) = P_g (S^+)_g`, one per primary block.
    pub recovery: Vec<DMatrix<f64>>,
    /// `B_bar = U_bar (S^+)_bar`.
    pub complement_recovery: DMatrix<f64>,
    pub sets: CertSets,
}

impl RecoveryCertificate {
    fn from_stack(tag: CertTag, tol: f64, primary: &[DMatrix<f64>], complement_basis: &DMatrix<f64>) -> Self {
        let mut parts: Vec<&DMatrix<f64>> = primary.iter().collect();
        parts.push(complement_basis);
        let stacked = hstack(&parts);
        let info = rank_info(&stacked, tol);
        let stacked_pinv = left_inverse(&stacked);
        let mut blocks = Vec::new();
        let mut at = 0;
        for p in primary {
            blocks.push((at, p.ncols()));
            at += p.ncols();
        }
        let recovery = primary
            .iter()
            .zip(&blocks)
            .map(|(p, &(s, l))| p * stacked_pinv.rows(s, l))
            .collect();
        let nb = complement_basis.ncols();
        let complement_recovery = complement_basis * stacked_pinv.rows(at, nb);
        let cond = if info.sigma_min > 0.0 { info.sigma_max / info.sigma_min } else { f64::INFINITY };
        let replay_tol = tol.max(1e3 * f64::EPSILON * cond);
        Self {
            tag,
            tol,
            replay_tol,
            gap: info.gap,
            blocks,
            complement_basis: complement_basis.clone(),
            stacked,
            stacked_pinv,
            recovery,
            complement_recovery,
            sets: CertSets::default(),
        }
    }

    /// Replays the identities: `S^+ S = I`, and each recovery map reproduces
    /// its own block while annihilating every other block.
    pub fn verify(&self) -> Result<(), String> {
        let n = self.stacked.ncols();
        let id = &self.stacked_pinv * &self.stacked;
        let err = (id - DMatrix::identity(n, n)).amax();
        if err > self.replay_tol {
            return Err(format!("left inverse residual {err:e}"));
        }
        let scale = self.stacked.amax().max(1.0);
        let mut ranges = self.blocks.clone();
        let comp_start = self.blocks.iter().map(|b| b.1).sum::<usize>();
        ranges.push((comp_start, self.complement_basis.ncols()));
        let maps: Vec<&DMatrix<f64>> = self.recovery.iter().chain(std::iter::once(&self.complement_recovery)).collect();
        for (g, map) in maps.iter().enumerate() {
            let image = *map * &self.stacked;
            for (h, &(s, l)) in ranges.iter().enumerate() {
                let got = image.columns(s, l);
                let err = if g == h {
                    (got - self.stacked.columns(s, l)).amax()
                } else {
                    got.amax()
                };
                if err > self.replay_tol * scale {
                    return Err(format!("recovery map {g} on block {h}: residual {err:e}"));
                }
            }
        }
        Ok(())
    }

    pub fn to_doc(&self) -> ParamDoc {
        let mut doc = ParamDoc::new("recovery_certificate")
            .scalar("tol", self.tol)
            .scalar("replay_tol", self.replay_tol)
            .scalar("gap", self.gap)
            .matrix("stacked", &self.stacked)
            .matrix("stacked_pinv", &self.stacked_pinv)
            .matrix("complement_recovery", &self.complement_recovery);
        for (g, m) in self.recovery.iter().enumerate() {
            doc = doc.matrix(&format!("recovery_{g}"), m);
        }
        doc
    }

    /// SHA-256 of the certificate's JSON document.
    pub fn digest(&self) -> String {
        let json = self.to_doc().to_json().unwrap_or_default();
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Outcome of a direct-sum check.
#[derive(Debug, Clone)]
pub struct SpanCheck {
    pub verdict: Verdict,
    pub certificate: Option<RecoveryCertificate>,
    /// Column count minus rank of the stacked basis.
    pub deficiency: usize,
}

/// Each primary block must have independent columns, and the primary blocks
/// together with a basis of the complement span must be jointly independent.
pub fn check_span_disjoint(primary: &[DMatrix<f64>], complement: &DMatrix<f64>, tol: f64) -> SpanCheck {
    check_span_disjoint_tagged(CertTag::SpanDisjoint, primary, complement, tol)
}

fn check_span_disjoint_tagged(tag: CertTag, primary: &[DMatrix<f64>], complement: &DMatrix<f64>, tol: f64) -> SpanCheck {
    let mut v = Verdict::new("span_disjoint", tol);
    if primary.is_empty() || primary.iter().any(|p| p.ncols() == 0) {
        v.fail(Reason::EmptySet, "no primary columns");
        return SpanCheck { verdict: v, certificate: None, deficiency: 0 };
    }
    for (g, p) in primary.iter().enumerate() {
        let r = rank_info(p, tol);
        if !r.full_column_rank(tol) {
            v.fail(Reason::PrimaryDependent, format!("primary block {g} has rank {} of {}", r.rank, r.columns));
        }
    }
    let comp_basis = span_basis(complement, RANK_TOL);
    let mut parts: Vec<&DMatrix<f64>> = primary.iter().collect();
    parts.push(&comp_basis);
    let stacked = hstack(&parts);
    let info = rank_info(&stacked, tol);
    v.gap = Some(info.gap);
    let deficiency = info.columns - info.rank.min(info.columns);
    if !info.full_column_rank(tol) && v.pass {
        let spans: Vec<DMatrix<f64>> = parts.iter().map(|p| span_basis(p, RANK_TOL)).collect();
        let pairwise_trivial = (0..spans.len()).all(|a| {
            (a + 1..spans.len()).all(|b| {
                let pair = hstack(&[&spans[a], &spans[b]]);
                pair.ncols() == 0 || rank_info(&pair, tol).full_column_rank(tol)
            })
        });
        let reason = if pairwise_trivial { Reason::DirectSumFailsPairwiseTrivial } else { Reason::SpansIntersect };
        v.fail(reason, format!("stacked basis deficient by {} of {} columns", deficiency.max(1), info.columns));
    }
    let certificate = v.pass.then(|| RecoveryCertificate::from_stack(tag, tol, primary, &comp_basis));
    SpanCheck { verdict: v, certificate, deficiency }
}

fn mem_columns(params: &MemHmmParams, mems: &[usize], h: usize) -> DMatrix<f64> {
    let cols: Vec<usize> = mems.iter().map(|&m| params.emission_index(m, h)).collect();
    select_columns(&params.emission, &cols)
}

/// Recoverable states `{j*} x S*` for attention recovery without a prompt:
/// blocks `W[:, (M, j*, s)]` for `s` in `S*` against every other column.
pub fn check_recoverable(params: &MemHmmParams, j_star: usize, s_star: &[usize], tol: f64) -> SpanCheck {
    let all_m: Vec<usize> = (0..params.mem_size).collect();
    recoverable_impl(params, j_star, s_star, &all_m, CertTag::Recoverable, tol)
}

/// Relaxed version restricted to memory values `m_star`: blocks
/// `W[:, (M*, j*, s)]` against `(M*, j*, s not in S*)` and `(M, j != j*, s)`.
pub fn check_recoverable_prompt(params: &MemHmmParams, j_star: usize, s_star: &[usize], m_star: &[usize], tol: f64) -> SpanCheck {
    recoverable_impl(params, j_star, s_star, m_star, CertTag::RecoverablePrompt, tol)
}

fn recoverable_impl(params: &MemHmmParams, j_star: usize, s_star: &[usize], m_star: &[usize], tag: CertTag, tol: f64) -> SpanCheck {
    if j_star >= params.n_cells || s_star.iter().any(|&s| s >= params.syntax_size) || m_star.iter().any(|&m| m >= params.mem_size) {
        let mut v = Verdict::new("span_disjoint", tol);
        v.fail(Reason::IndexOutOfRange, "cell, syntax or memory index out of range");
        return SpanCheck { verdict: v, certificate: None, deficiency: 0 };
    }
    let s_set: BTreeSet<usize> = s_star.iter().copied().collect();
    let all_m: Vec<usize> = (0..params.mem_size).collect();
    let primary: Vec<DMatrix<f64>> = s_set.iter().map(|&s| mem_columns(params, m_star, params.hidden_index(j_star, s))).collect();
    let mut comp_cols = Vec::new();
    for h in 0..params.n_hidden() {
        let (j, s) = params.hidden_parts(h);
        if j == j_star && s_set.contains(&s) {
            continue;
        }
        let mems = if j == j_star { m_star } else { &all_m[..] };
        comp_cols.extend(mems.iter().map(|&m| params.emission_index(m, h)));
    }
    let complement = select_columns(&params.emission, &comp_cols);
    let mut out = check_span_disjoint_tagged(tag, &primary, &complement, tol);
    if let Some(cert) = out.certificate.as_mut() {
        cert.sets = CertSets {
            h_star: s_set.iter().map(|&s| params.hidden_index(j_star, s)).collect(),
            s_star: s_set.iter().copied().collect(),
            m_star: m_star.to_vec(),
            b_set: Vec::new(),
            j_star: Some(j_star),
        };
    }
    out
}
