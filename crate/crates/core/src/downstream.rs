//! Downstream tasks: sparse linear classifiers on exact latent posteriors,
//! labelled datasets, and membership in the set of sequences with a
//! position whose hidden posterior sits inside a target state set.

use std::io::{BufRead, Write};

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::inference::{embed_observations, initial_posterior, leave_one_out_posterior, lifted_evidence, messages, smoothed_posterior, Chain};
use crate::model::{sample_mem_sequence, sample_sequence, HmmParams, MemHmmParams};
use crate::par::{map, map_range, Exec};
use crate::rng::{child_rng, derive_seed, tags};
use crate::{Error, Result};

/// Posterior mass below this counts as zero when deciding supports.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;
/// Smallest acceptable minority-class fraction.
pub const MIN_MINORITY: f64 = 0.05;
/// Task draws tried before giving up on a degenerate dataset.
pub const MAX_TASK_ATTEMPTS: usize = 20;

/// Sparse Gaussian classifier `1(w . p >= 0)` with `w = r_1 - r_2`, which
/// labels exactly like the argmax of the two rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub weights: DVector<f64>,
    pub rows: [DVector<f64>; 2],
    /// Memory cell whose posterior is classified; `None` for vanilla tasks.
    pub cell: Option<usize>,
    pub k: usize,
    pub seed: u64,
    pub support: Vec<usize>,
    /// Coordinates the support was drawn from.
    pub pool: Vec<usize>,
}

pub fn make_task(seed: u64, dim: usize, k: usize) -> Result<TaskSpec> {
    make_task_on(seed, dim, &(0..dim).collect::<Vec<_>>(), k)
}

/// Task whose support is drawn from `pool` only.
pub fn make_task_on(seed: u64, dim: usize, pool: &[usize], k: usize) -> Result<TaskSpec> {
    if k == 0 || k > pool.len() {
        return Err(Error::invalid(format!("need 1 <= k <= {} (got k = {k})", pool.len())));
    }
    if pool.iter().any(|&p| p >= dim) {
        return Err(Error::invalid("pool index out of range"));
    }
    let mut rng = child_rng(seed, tags::TASK);
    let mut support: Vec<usize> = sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    support.sort_unstable();
    let mut rows = [DVector::zeros(dim), DVector::zeros(dim)];
    for row in rows.iter_mut() {
        for &s in &support {
            row[s] = rng.sample(StandardNormal);
        }
    }
    let weights = &rows[0] - &rows[1];
    Ok(TaskSpec { weights, rows, cell: None, k, seed, support, pool: pool.to_vec() })
}

impl TaskSpec {
    pub fn with_cell(mut self, cell: usize) -> Self {
        self.cell = Some(cell);
        self
    }

    /// Fresh task from an independent stream, same shape and pool.
    pub fn resample(&self, attempt: usize) -> Result<TaskSpec> {
        let seed = derive_seed(derive_seed(self.seed, tags::TASK_RESAMPLE), attempt as u64);
        let mut t = make_task_on(seed, self.weights.len(), &self.pool, self.k)?;
        t.cell = self.cell;
        Ok(t)
    }

    /// Label from the two-row form: 1 iff the first row scores at least the second.
    pub fn two_row_label(&self, p: &DVector<f64>) -> u8 {
        u8::from(self.rows[0].dot(p) >= self.rows[1].dot(p))
    }
}

/// Which posterior a vanilla label classifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VanillaTarget {
    /// `P(H_0 | x_{1:T})`.
    InitialState,
    /// `P(H_1 | x_{-1})`, position 1 masked.
    MaskedFirst,
}

/// Which posterior a memory label classifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryTarget {
    /// `P(M_j | x_{1:T})`.
    Full,
    /// `P(M_j | x_{-1})`, position 1 masked.
    MaskedFirst,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Label {
    pub label: u8,
    /// `w . posterior`.
    pub margin: f64,
}

impl Label {
    fn of(weights: &DVector<f64>, posterior: &DVector<f64>) -> Self {
        let margin = weights.dot(posterior);
        Self { label: u8::from(margin >= 0.0), margin }
    }
}

fn masked_first_obs(tokens: &[usize]) -> Vec<Option<usize>> {
    tokens.iter().enumerate().map(|(i, &z)| (i > 0).then_some(z)).collect()
}

/// Exact hidden posterior classified by a vanilla task.
pub fn vanilla_posterior(params: &HmmParams, tokens: &[usize], target: VanillaTarget) -> Result<DVector<f64>> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    let chain = Chain::from_hmm(params);
    let obs: Vec<Option<usize>> = match target {
        VanillaTarget::InitialState => tokens.iter().map(|&z| Some(z)).collect(),
        VanillaTarget::MaskedFirst => masked_first_obs(tokens),
    };
    let evid = embed_observations(params, &obs)?;
    let msgs = messages(&chain, &evid);
    let post = match target {
        VanillaTarget::InitialState => initial_posterior(&chain, &evid, &msgs),
        VanillaTarget::MaskedFirst => leave_one_out_posterior(&msgs, 0),
    };
    post.ok_or(Error::ZeroProbability)
}

pub fn label_vanilla(params: &HmmParams, task: &TaskSpec, tokens: &[usize], target: VanillaTarget) -> Result<Label> {
    if task.weights.len() != params.n_hidden {
        return Err(Error::DimensionMismatch { what: "task weight", expected: params.n_hidden, got: task.weights.len() });
    }
    Ok(Label::of(&task.weights, &vanilla_posterior(params, tokens, target)?))
}

/// Sums a lifted distribution over everything but the value of `cell`.
pub fn fold_to_cell(params: &MemHmmParams, lifted: &DVector<f64>, cell: usize) -> DVector<f64> {
    let nh = params.n_hidden();
    let mut out = DVector::zeros(params.mem_size);
    for (l, p) in lifted.iter().enumerate() {
        out[params.cell_value(l / nh, cell)] += p;
    }
    out
}

/// Sums a lifted distribution over memory assignments.
pub fn fold_to_hidden(params: &MemHmmParams, lifted: &DVector<f64>) -> DVector<f64> {
    let nh = params.n_hidden();
    let mut out = DVector::zeros(nh);
    for (l, p) in lifted.iter().enumerate() {
        out[l % nh] += p;
    }
    out
}

/// Exact posterior of memory cell `cell`.
pub fn memory_posterior(params: &MemHmmParams, tokens: &[usize], cell: usize, target: MemoryTarget) -> Result<DVector<f64>> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    if cell >= params.n_cells {
        return Err(Error::invalid(format!("cell {cell} out of range")));
    }
    let obs: Vec<Option<usize>> = match target {
        MemoryTarget::Full => tokens.iter().map(|&z| Some(z)).collect(),
        MemoryTarget::MaskedFirst => masked_first_obs(tokens),
    };
    let chain = Chain::lifted(params);
    let evid = lifted_evidence(params, &obs)?;
    let msgs = messages(&chain, &evid);
    let lifted = smoothed_posterior(&msgs, &evid, 0).ok_or(Error::ZeroProbability)?;
    Ok(fold_to_cell(params, &lifted, cell))
}

pub fn label_memory(params: &MemHmmParams, task: &TaskSpec, tokens: &[usize], target: MemoryTarget) -> Result<Label> {
    if task.weights.len() != params.mem_size {
        return Err(Error::DimensionMismatch { what: "task weight", expected: params.mem_size, got: task.weights.len() });
    }
    let cell = task.cell.unwrap_or(0);
    Ok(Label::of(&task.weights, &memory_posterior(params, tokens, cell, target)?))
}

/// `P(H_i | x_{-i})` over hidden states for every position.
pub fn hidden_loo_posteriors(params: &MemHmmParams, tokens: &[usize]) -> Result<Vec<DVector<f64>>> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    let obs: Vec<Option<usize>> = tokens.iter().map(|&z| Some(z)).collect();
    let chain = Chain::lifted(params);
    let evid = lifted_evidence(params, &obs)?;
    let msgs = messages(&chain, &evid);
    if smoothed_posterior(&msgs, &evid, 0).is_none() {
        return Err(Error::ZeroProbability);
    }
    (0..tokens.len())
        .map(|k| leave_one_out_posterior(&msgs, k).map(|p| fold_to_hidden(params, &p)).ok_or(Error::ZeroProbability))
        .collect()
}

/// 1-based positions whose leave-one-out posterior puts no mass (at the
/// support threshold) outside `h_star`.
pub fn concentrated_positions(params: &MemHmmParams, h_star: &[usize], tokens: &[usize]) -> Result<Vec<usize>> {
    let posts = hidden_loo_posteriors(params, tokens)?;
    Ok(posts
        .iter()
        .enumerate()
        .filter(|(_, p)| p.iter().enumerate().all(|(h, &x)| h_star.contains(&h) || x < SUPPORT_THRESHOLD))
        .map(|(k, _)| k + 1)
        .collect())
}

pub fn membership_r(params: &MemHmmParams, h_star: &[usize], tokens: &[usize]) -> Result<bool> {
    Ok(!concentrated_positions(params, h_star, tokens)?.is_empty())
}

/// Model and posterior target that generate a dataset.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    Vanilla { params: &'a HmmParams, target: VanillaTarget },
    Memory { params: &'a MemHmmParams, target: MemoryTarget },
}

impl Source<'_> {
    fn sample(&self, t_len: usize, seed: u64) -> Result<Vec<usize>> {
        Ok(match self {
            Source::Vanilla { params, .. } => sample_sequence(params, t_len, seed)?.tokens,
            Source::Memory { params, .. } => sample_mem_sequence(params, t_len, seed)?.tokens,
        })
    }

    fn posterior(&self, tokens: &[usize], cell: usize) -> Result<DVector<f64>> {
        match self {
            Source::Vanilla { params, target } => vanilla_posterior(params, tokens, *target),
            Source::Memory { params, target } => memory_posterior(params, tokens, cell, *target),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub t_len: usize,
}

impl Splits {
    /// 5000 / 500 / 1000 sequences of length 129.
    pub const PAPER: Splits = Splits { n_train: 5000, n_val: 500, n_test: 1000, t_len: 129 };

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub seed: u64,
    pub task: TaskSpec,
    /// Task draws used, including the accepted one.
    pub attempts: usize,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    /// Fraction of label 1 over all splits.
    pub balance: f64,
}

impl LabeledDataset {
    pub fn all(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn recompute_balance(&self) -> f64 {
        let n = self.train.len() + self.val.len() + self.test.len();
        self.all().filter(|e| e.label == 1).count() as f64 / n.max(1) as f64
    }
}

/// Samples sequences, labels them from exact posteriors, and redraws the
/// task while the minority class is below [`MIN_MINORITY`].
pub fn gen_dataset(source: Source<'_>, task: &TaskSpec, splits: Splits, seed: u64, exec: Exec) -> Result<LabeledDataset> {
    if splits.n_train == 0 || splits.n_val == 0 || splits.n_test == 0 || splits.t_len == 0 {
        return Err(Error::invalid("split sizes and sequence length must be positive"));
    }
    let data_seed = derive_seed(seed, tags::DATA);
    let cell = task.cell.unwrap_or(0);
    let seqs: Vec<Vec<usize>> = map_range(exec, splits.total(), |i| source.sample(splits.t_len, derive_seed(data_seed, i as u64)))
        .into_iter()
        .collect::<Result<_>>()?;
    let posts: Vec<DVector<f64>> = map(exec, &seqs, |s| source.posterior(s, cell)).into_iter().collect::<Result<_>>()?;
    let mut current = task.clone();
    let mut minority = 0.0;
    for attempt in 0..MAX_TASK_ATTEMPTS {
        if attempt > 0 {
            current = task.resample(attempt)?;
        }
        let labels: Vec<u8> = posts.iter().map(|p| Label::of(&current.weights, p).label).collect();
        let ones = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
        minority = ones.min(1.0 - ones);
        if minority >= MIN_MINORITY {
            let mut examples = seqs.iter().cloned().zip(labels).map(|(tokens, label)| Example { tokens, label });
            let train = examples.by_ref().take(splits.n_train).collect();
            let val = examples.by_ref().take(splits.n_val).collect();
            let test = examples.collect();
            return Ok(LabeledDataset { seed, task: current, attempts: attempt + 1, train, val, test, balance: ones });
        }
    }
    Err(Error::DegenerateDataset(format!(
        "{MAX_TASK_ATTEMPTS} task draws all left a minority class below {MIN_MINORITY} (last {minority:.4})"
    )))
}

fn fmt_vec(v: &DVector<f64>) -> String {
    v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ")
}

fn fmt_idx(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes the line-oriented dataset format: `#` header lines, then one
/// `ids<TAB>label` line per example under each split header.
pub fn write_dataset<W: Write>(ds: &LabeledDataset, mut w: W) -> Result<()> {
    let t = &ds.task;
    writeln!(w, "# seed {}", ds.seed)?;
    writeln!(w, "# task_seed {}", t.seed)?;
    writeln!(w, "# cell {}", t.cell.map_or("-".to_string(), |c| c.to_string()))?;
    writeln!(w, "# k {}", t.k)?;
    writeln!(w, "# pool {}", fmt_idx(&t.pool))?;
    writeln!(w, "# support {}", fmt_idx(&t.support))?;
    writeln!(w, "# row1 {}", fmt_vec(&t.rows[0]))?;
    writeln!(w, "# row2 {}", fmt_vec(&t.rows[1]))?;
    writeln!(w, "# weights {}", fmt_vec(&t.weights))?;
    writeln!(w, "# attempts {}", ds.attempts)?;
    writeln!(w, "# balance {:.16e}", ds.balance)?;
    for (name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        writeln!(w, "# split {name} {}", split.len())?;
        for e in split {
            writeln!(w, "{}\t{}", fmt_idx(&e.tokens), e.label)?;
        }
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split_whitespace().map(|x| x.parse::<T>().map_err(|_| bad(format!("bad number {x:?}")))).collect()
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<LabeledDataset> {
    let mut header = std::collections::BTreeMap::new();
    let mut splits: Vec<(String, Vec<Example>)> = Vec::new();
    for line in r.lines() {
        let line = line?;
        if let Some(rest) = line.strip_prefix("# ") {
            let (key, val) = rest.split_once(' ').unwrap_or((rest, ""));
            if key == "split" {
                let name = val.split_whitespace().next().ok_or_else(|| bad("split without name"))?;
                splits.push((name.to_string(), Vec::new()));
            } else {
                header.insert(key.to_string(), val.to_string());
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (ids, label) = line.split_once('\t').ok_or_else(|| bad("example line without tab"))?;
        let label: u8 = label.trim().parse().map_err(|_| bad("bad label"))?;
        if label > 1 {
            return Err(bad("labels must be 0 or 1"));
        }
        let current = splits.last_mut().ok_or_else(|| bad("example before any split header"))?;
        current.1.push(Example { tokens: parse_list(ids)?, label });
    }
    let get = |k: &str| header.get(k).ok_or_else(|| bad(format!("missing header {k}")));
    let vec = |k: &str| -> Result<DVector<f64>> { Ok(DVector::from_vec(parse_list(get(k)?)?)) };
    let cell = match get("cell")?.as_str() {
        "-" => None,
        c => Some(c.parse().map_err(|_| bad("bad cell"))?),
    };
    let task = TaskSpec {
        weights: vec("weights")?,
        rows: [vec("row1")?, vec("row2")?],
        cell,
        k: get("k")?.parse().map_err(|_| bad("bad k"))?,
        seed: get("task_seed")?.parse().map_err(|_| bad("bad task seed"))?,
        support: parse_list(get("support")?)?,
        pool: parse_list(get("pool")?)?,
    };
    let mut take = |name: &str| -> Result<Vec<Example>> {
        let i = splits.iter().position(|(n, _)| n == name).ok_or_else(|| bad(format!("missing split {name}")))?;
        Ok(std::mem::take(&mut splits[i].1))
    };
    Ok(LabeledDataset {
        seed: get("seed")?.parse().map_err(|_| bad("bad seed"))?,
        attempts: get("attempts")?.parse().map_err(|_| bad("bad attempts"))?,
        balance: get("balance")?.parse().map_err(|_| bad("bad balance"))?,
        task,
        train: take("train")?,
        val: take("val")?,
        test: take("test")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_hmm, random_mem_hmm};
    use nalgebra::DMatrix;

    #[test]
    fn task_shape() {
        let t = make_task(3, 10, 6).unwrap();
        assert_eq!(t.weights.iter().filter(|x| **x != 0.0).count(), 6);
        assert_eq!(t, make_task(3, 10, 6).unwrap());
        assert_eq!(make_task(3, 5, 5).unwrap().weights.iter().filter(|x| **x != 0.0).count(), 5);
        assert!(make_task(3, 4, 5).is_err());
    }

    #[test]
    fn two_rows_agree_with_difference() {
        let t = make_task(9, 4, 3).unwrap();
        for s in 0..50u64 {
            let mut r = crate::rng::rng_from_seed(s);
            let mut p = DVector::from_fn(4, |_, _| r.random::<f64>());
            p /= p.sum();
            assert_eq!(t.two_row_label(&p), Label::of(&t.weights, &p).label);
        }
    }

    #[test]
    fn one_state_label_is_constant() {
        let p = HmmParams::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(3, 1, 1.0 / 3.0), DVector::from_element(1, 1.0)).unwrap();
        let t = make_task(1, 1, 1).unwrap();
        let want = u8::from(t.weights[0] >= 0.0);
        for toks in [[0, 1], [2, 2]] {
            assert_eq!(label_vanilla(&p, &t, &toks, VanillaTarget::InitialState).unwrap().label, want);
        }
    }

    #[test]
    fn memory_posterior_is_distribution() {
        let p = random_mem_hmm(4, 2, 2, 2, 6).unwrap();
        let s = sample_mem_sequence(&p, 8, 1).unwrap();
        for cell in 0..2 {
            let post = memory_posterior(&p, &s.tokens, cell, MemoryTarget::Full).unwrap();
            assert!((post.sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn full_state_set_contains_everything() {
        let p = random_mem_hmm(2, 1, 2, 3, 6).unwrap();
        let s = sample_mem_sequence(&p, 6, 4).unwrap();
        let all: Vec<usize> = (0..3).collect();
        assert!(membership_r(&p, &all, &s.tokens).unwrap());
        assert!(!membership_r(&p, &[], &s.tokens).unwrap());
    }

    #[test]
    fn dataset_text_round_trip() {
        let p = random_hmm(6, 3, 5).unwrap();
        let t = make_task(2, 3, 3).unwrap();
        let splits = Splits { n_train: 20, n_val: 5, n_test: 5, t_len: 6 };
        let ds = gen_dataset(Source::Vanilla { params: &p, target: VanillaTarget::MaskedFirst }, &t, splits, 11, Exec::default()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(ds.recompute_balance(), ds.balance);
    }
}
