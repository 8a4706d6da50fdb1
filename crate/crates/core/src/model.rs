//! Generative models: vanilla HMMs, memory-augmented HMMs, random generation,
//! sampling, stationary distributions and lifting to a vanilla chain.
//!
//! Hidden state `H_0` emits nothing; tokens `X_1..X_t` are emitted by
//! `H_1..H_t`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::linalg::{check_column_stochastic, check_probability_vector, softmax, STOCHASTIC_TOL};
use crate::rng::{child_rng, tags, Rng};
use crate::{Error, Result};

/// Temperature of the mixing weights over permutation matrices.
pub const TRANSITION_TEMPERATURE: f64 = 0.01;
/// Temperature of the start distribution and memory prior.
pub const START_TEMPERATURE: f64 = 10.0;
/// Temperature of each emission column.
pub const EMISSION_TEMPERATURE: f64 = 0.01;

/// Default cap on lifted state counts and enumerated path counts.
pub const DEFAULT_CAP: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct HmmParams {
    pub n_hidden: usize,
    pub n_vocab: usize,
    /// `transition[(next, prev)] = P(H_i = next | H_{i-1} = prev)`.
    pub transition: DMatrix<f64>,
    /// `emission[(token, state)] = P(X_i = token | H_i = state)`.
    pub emission: DMatrix<f64>,
    /// Distribution of `H_0`.
    pub start: DVector<f64>,
}

impl HmmParams {
    pub fn new(transition: DMatrix<f64>, emission: DMatrix<f64>, start: DVector<f64>) -> Result<Self> {
        let n_hidden = transition.nrows();
        if n_hidden == 0 || transition.ncols() != n_hidden {
            return Err(Error::invalid(format!(
                "transition must be square and nonempty, got {}x{}",
                transition.nrows(),
                transition.ncols()
            )));
        }
        if emission.ncols() != n_hidden {
            return Err(Error::DimensionMismatch { what: "emission columns", expected: n_hidden, got: emission.ncols() });
        }
        if emission.nrows() == 0 {
            return Err(Error::invalid("empty vocabulary"));
        }
        if start.len() != n_hidden {
            return Err(Error::DimensionMismatch { what: "start length", expected: n_hidden, got: start.len() });
        }
        check_column_stochastic(&transition, STOCHASTIC_TOL).map_err(|e| Error::NotStochastic(format!("transition: {e}")))?;
        check_column_stochastic(&emission, STOCHASTIC_TOL).map_err(|e| Error::NotStochastic(format!("emission: {e}")))?;
        check_probability_vector(&start, STOCHASTIC_TOL).map_err(|e| Error::NotStochastic(format!("start: {e}")))?;
        Ok(Self { n_hidden, n_vocab: emission.nrows(), transition, emission, start })
    }

    /// Marginal of `H_1`.
    pub fn first_marginal(&self) -> DVector<f64> {
        &self.transition * &self.start
    }

    /// Marginal of `H_i` for `i >= 0`.
    pub fn marginal(&self, i: usize) -> DVector<f64> {
        let mut p = self.start.clone();
        for _ in 0..i {
            p = &self.transition * p;
        }
        p
    }

    pub fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.n_vocab {
            return Err(Error::TokenOutOfRange { token, vocab: self.n_vocab });
        }
        Ok(())
    }
}

/// Memory-augmented HMM. The syntax chain runs over `H = (J, S)` flattened as
/// `h = j * |S| + s`; emission column `(m, j, s)` sits at `m * |H| + h`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemHmmParams {
    pub n_cells: usize,
    pub mem_size: usize,
    pub syntax_size: usize,
    pub n_vocab: usize,
    /// `|H| x |H|` column-stochastic transition over `(J, S)`.
    pub transition: DMatrix<f64>,
    /// `|Z| x (|M| |H|)` column-stochastic emission.
    pub emission: DMatrix<f64>,
    /// Distribution of `H_0`.
    pub start: DVector<f64>,
    /// Joint prior over `M^N`, indexed by [`MemHmmParams::mem_config_index`].
    pub mem_prior: DVector<f64>,
}

impl MemHmmParams {
    pub fn new(
        n_cells: usize,
        mem_size: usize,
        syntax_size: usize,
        transition: DMatrix<f64>,
        emission: DMatrix<f64>,
        start: DVector<f64>,
        mem_prior: DVector<f64>,
    ) -> Result<Self> {
        if n_cells == 0 || mem_size == 0 || syntax_size == 0 {
            return Err(Error::invalid("memory model counts must be positive"));
        }
        let n_hidden = n_cells * syntax_size;
        let n_configs = checked_pow(mem_size, n_cells)?;
        if transition.nrows() != n_hidden || transition.ncols() != n_hidden {
            return Err(Error::DimensionMismatch { what: "transition size", expected: n_hidden, got: transition.nrows() });
        }
        if emission.ncols() != mem_size * n_hidden {
            return Err(Error::DimensionMismatch { what: "emission columns", expected: mem_size * n_hidden, got: emission.ncols() });
        }
        if emission.nrows() == 0 {
            return Err(Error::invalid("empty vocabulary"));
        }
        if start.len() != n_hidden {
            return Err(Error::DimensionMismatch { what: "start length", expected: n_hidden, got: start.len() });
        }
        if mem_prior.len() != n_configs {
            return Err(Error::DimensionMismatch { what: "memory prior length", expected: n_configs, got: mem_prior.len() });
        }
        check_column_stochastic(&transition, STOCHASTIC_TOL).map_err(|e| Error::NotStochastic(format!("transition: {e}")))?;
        check_column_stochastic(&emission, STOCHASTIC_TOL).map_err(|e| Error::NotStochastic(format!("emission: {e}")))?;
        check_probability_vector(&start, STOCHASTIC_TOL).map_err(|e| Error::NotStochastic(format!("start: {e}")))?;
        check_probability_vector(&mem_prior, STOCHASTIC_TOL).map_err(|e| Error::NotStochastic(format!("memory prior: {e}")))?;
        Ok(Self { n_cells, mem_size, syntax_size, n_vocab: emission.nrows(), transition, emission, start, mem_prior })
    }

    pub fn n_hidden(&self) -> usize {
        self.n_cells * self.syntax_size
    }

    /// `|M|^N`.
    pub fn n_mem_configs(&self) -> usize {
        self.mem_prior.len()
    }

    /// `|M|^N * |H|`.
    pub fn n_lifted(&self) -> usize {
        self.n_mem_configs() * self.n_hidden()
    }

    pub fn hidden_index(&self, cell: usize, syntax: usize) -> usize {
        cell * self.syntax_size + syntax
    }

    /// Inverse of [`Self::hidden_index`]: `(cell, syntax)`.
    pub fn hidden_parts(&self, h: usize) -> (usize, usize) {
        (h / self.syntax_size, h % self.syntax_size)
    }

    /// Emission column for memory value `m` in hidden state `h`.
    pub fn emission_index(&self, m: usize, h: usize) -> usize {
        m * self.n_hidden() + h
    }

    /// Inverse of [`Self::emission_index`]: `(m, cell, syntax)`.
    pub fn emission_parts(&self, col: usize) -> (usize, usize, usize) {
        let h = col % self.n_hidden();
        let (j, s) = self.hidden_parts(h);
        (col / self.n_hidden(), j, s)
    }

    /// Mixed-radix index of a memory assignment, cell 0 most significant.
    pub fn mem_config_index(&self, values: &[usize]) -> usize {
        values.iter().fold(0, |acc, &m| acc * self.mem_size + m)
    }

    pub fn mem_config_values(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.n_cells];
        for k in (0..self.n_cells).rev() {
            out[k] = index % self.mem_size;
            index /= self.mem_size;
        }
        out
    }

    /// Value of cell `cell` in memory assignment `config`.
    pub fn cell_value(&self, config: usize, cell: usize) -> usize {
        (config / self.mem_size.pow((self.n_cells - 1 - cell) as u32)) % self.mem_size
    }

    pub fn lifted_index(&self, config: usize, h: usize) -> usize {
        config * self.n_hidden() + h
    }

    /// Emission column used by lifted state `lifted`.
    pub fn lifted_emission_column(&self, lifted: usize) -> usize {
        let config = lifted / self.n_hidden();
        let h = lifted % self.n_hidden();
        let (j, _) = self.hidden_parts(h);
        self.emission_index(self.cell_value(config, j), h)
    }

    /// Syntax-chain view as a vanilla HMM when it carries no memory (`|M| = 1`).
    pub fn syntax_hmm(&self) -> Result<HmmParams> {
        if self.mem_size != 1 {
            return Err(Error::invalid("syntax view requires a single memory value"));
        }
        HmmParams::new(self.transition.clone(), self.emission.clone(), self.start.clone())
    }

    pub fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.n_vocab {
            return Err(Error::TokenOutOfRange { token, vocab: self.n_vocab });
        }
        Ok(())
    }
}

fn checked_pow(base: usize, exp: usize) -> Result<usize> {
    let mut acc: usize = 1;
    for _ in 0..exp {
        acc = acc.checked_mul(base).ok_or_else(|| Error::invalid("memory configuration count overflows"))?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceSample {
    /// `H_0..H_t`.
    pub hidden_path: Vec<usize>,
    /// `X_1..X_t`.
    pub tokens: Vec<usize>,
    /// Per-cell memory values for memory-augmented models.
    pub memory: Option<Vec<usize>>,
}

fn uniform_logits(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Random column-stochastic matrix: a mixture of `n` random permutation matrices.
pub fn random_permutation_mixture(rng: &mut Rng, n: usize) -> DMatrix<f64> {
    let weights = softmax(&uniform_logits(rng, n), TRANSITION_TEMPERATURE);
    let mut t = DMatrix::zeros(n, n);
    let mut perm: Vec<usize> = (0..n).collect();
    for w in weights {
        perm.shuffle(rng);
        for (from, &to) in perm.iter().enumerate() {
            t[(to, from)] += w;
        }
    }
    t
}

/// Random matrix whose columns are independent softmax draws.
pub fn random_stochastic_columns(rng: &mut Rng, rows: usize, cols: usize, temperature: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for c in 0..cols {
        let col = softmax(&uniform_logits(rng, rows), temperature);
        for (r, v) in col.into_iter().enumerate() {
            m[(r, c)] = v;
        }
    }
    m
}

/// Random HMM: transition mixes `n_hidden` random permutations, start and
/// emission columns are softmaxes of uniform logits.
pub fn random_hmm(seed: u64, n_hidden: usize, n_vocab: usize) -> Result<HmmParams> {
    if n_hidden == 0 || n_vocab == 0 {
        return Err(Error::invalid("random_hmm needs n_hidden >= 1 and n_vocab >= 1"));
    }
    let transition = random_permutation_mixture(&mut child_rng(seed, tags::TRANSITION), n_hidden);
    let start = DVector::from_vec(softmax(&uniform_logits(&mut child_rng(seed, tags::START), n_hidden), START_TEMPERATURE));
    let emission = random_stochastic_columns(&mut child_rng(seed, tags::EMISSION), n_vocab, n_hidden, EMISSION_TEMPERATURE);
    HmmParams::new(transition, emission, start)
}

/// Random memory-augmented HMM using the same per-column recipe; the memory
/// prior is a product of independent per-cell softmaxes.
pub fn random_mem_hmm(seed: u64, n_cells: usize, mem_size: usize, syntax_size: usize, n_vocab: usize) -> Result<MemHmmParams> {
    if n_cells == 0 || mem_size == 0 || syntax_size == 0 || n_vocab == 0 {
        return Err(Error::invalid("random_mem_hmm needs all counts >= 1"));
    }
    let n_hidden = n_cells * syntax_size;
    let transition = random_permutation_mixture(&mut child_rng(seed, tags::TRANSITION), n_hidden);
    let start = DVector::from_vec(softmax(&uniform_logits(&mut child_rng(seed, tags::START), n_hidden), START_TEMPERATURE));
    let emission = random_stochastic_columns(&mut child_rng(seed, tags::EMISSION), n_vocab, mem_size * n_hidden, EMISSION_TEMPERATURE);
    let mut mem_rng = child_rng(seed, tags::MEMORY);
    let cells: Vec<Vec<f64>> = (0..n_cells)
        .map(|_| softmax(&uniform_logits(&mut mem_rng, mem_size), START_TEMPERATURE))
        .collect();
    let mem_prior = product_prior(&cells);
    MemHmmParams::new(n_cells, mem_size, syntax_size, transition, emission, start, mem_prior)
}

/// Joint distribution over `M^N` of independent cells, cell 0 most significant.
pub fn product_prior(cells: &[Vec<f64>]) -> DVector<f64> {
    let mut joint = vec![1.0];
    for cell in cells {
        joint = joint.iter().flat_map(|&p| cell.iter().map(move |&q| p * q)).collect();
    }
    DVector::from_vec(joint)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for StationaryConfig {
    fn default() -> Self {
        Self { max_iter: 200_000, tol: 1e-12 }
    }
}

/// Fixed point of a column-stochastic matrix by power iteration from uniform.
pub fn stationary_distribution(transition: &DMatrix<f64>, config: StationaryConfig) -> Result<DVector<f64>> {
    let n = transition.nrows();
    if n == 0 || transition.ncols() != n {
        return Err(Error::invalid("transition must be square and nonempty"));
    }
    check_column_stochastic(transition, STOCHASTIC_TOL).map_err(Error::NotStochastic)?;
    let mut rho = DVector::from_element(n, 1.0 / n as f64);
    let mut residual = f64::INFINITY;
    for _ in 0..=config.max_iter {
        let next = transition * &rho;
        residual = (&next - &rho).amax();
        if residual <= config.tol {
            return Ok(rho);
        }
        let s = next.sum();
        rho = next / s;
    }
    Err(Error::NoConvergence { iterations: config.max_iter, residual })
}

fn categorical(rng: &mut Rng, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        if p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn sample_path(rng: &mut Rng, transition: &DMatrix<f64>, start: &DVector<f64>, t_len: usize) -> Vec<usize> {
    let mut path = Vec::with_capacity(t_len + 1);
    let mut h = categorical(rng, start.iter().copied());
    path.push(h);
    for _ in 0..t_len {
        h = categorical(rng, transition.column(h).iter().copied());
        path.push(h);
    }
    path
}

/// Samples `H_0..H_t` and `X_1..X_t` from a vanilla HMM.
pub fn sample_sequence(params: &HmmParams, t_len: usize, seed: u64) -> Result<SequenceSample> {
    if t_len == 0 {
        return Err(Error::invalid("t_len must be at least 1"));
    }
    let mut rng = crate::rng::rng_from_seed(seed);
    let hidden_path = sample_path(&mut rng, &params.transition, &params.start, t_len);
    let tokens = hidden_path[1..]
        .iter()
        .map(|&h| categorical(&mut rng, params.emission.column(h).iter().copied()))
        .collect();
    Ok(SequenceSample { hidden_path, tokens, memory: None })
}

/// Samples a memory assignment once, then the syntax chain and tokens.
pub fn sample_mem_sequence(params: &MemHmmParams, t_len: usize, seed: u64) -> Result<SequenceSample> {
    if t_len == 0 {
        return Err(Error::invalid("t_len must be at least 1"));
    }
    let mut rng = crate::rng::rng_from_seed(seed);
    let config = categorical(&mut rng, params.mem_prior.iter().copied());
    let hidden_path = sample_path(&mut rng, &params.transition, &params.start, t_len);
    let tokens = hidden_path[1..]
        .iter()
        .map(|&h| {
            let col = params.emission_index(params.cell_value(config, params.hidden_parts(h).0), h);
            categorical(&mut rng, params.emission.column(col).iter().copied())
        })
        .collect();
    Ok(SequenceSample { hidden_path, tokens, memory: Some(params.mem_config_values(config)) })
}

/// Vanilla HMM over `(M_1..M_N, H)` where memory never changes.
pub fn lift_mem_hmm(params: &MemHmmParams, cap: u128) -> Result<HmmParams> {
    let n_lifted = params.n_lifted();
    if n_lifted as u128 > cap {
        return Err(Error::TooLarge { paths: n_lifted as u128, cap });
    }
    let nh = params.n_hidden();
    let nc = params.n_mem_configs();
    let mut transition = DMatrix::zeros(n_lifted, n_lifted);
    for c in 0..nc {
        transition.view_mut((c * nh, c * nh), (nh, nh)).copy_from(&params.transition);
    }
    let emission = DMatrix::from_fn(params.n_vocab, n_lifted, |z, l| params.emission[(z, params.lifted_emission_column(l))]);
    let start = DVector::from_fn(n_lifted, |l, _| params.mem_prior[l / nh] * params.start[l % nh]);
    HmmParams::new(transition, emission, start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn random_hmm_is_stochastic_and_doubly_stochastic() {
        let p = random_hmm(0, 4, 10).unwrap();
        for r in 0..4 {
            assert_abs_diff_eq!(p.transition.row(r).sum(), 1.0, epsilon = 1e-12);
        }
        assert_eq!(p.emission.shape(), (10, 4));
    }

    #[test]
    fn one_state_chain_is_trivial() {
        let p = random_hmm(5, 1, 3).unwrap();
        assert_eq!(p.transition[(0, 0)], 1.0);
        assert_eq!(p.start[0], 1.0);
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(random_hmm(0, 0, 3).is_err());
        assert!(random_mem_hmm(0, 1, 0, 2, 3).is_err());
    }

    #[test]
    fn stationary_examples() {
        let t = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]);
        let rho = stationary_distribution(&t, StationaryConfig::default()).unwrap();
        assert_abs_diff_eq!(rho, DVector::from_vec(vec![0.5, 0.5]), epsilon = 1e-12);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(stationary_distribution(&one, StationaryConfig::default()).unwrap()[0], 1.0);
        let asym = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.5, 0.8]);
        let rho = stationary_distribution(&asym, StationaryConfig::default()).unwrap();
        assert!((&asym * &rho - &rho).amax() <= 1e-10);
        assert_abs_diff_eq!(rho[0], 2.0 / 7.0, epsilon = 1e-10);
    }

    #[test]
    fn periodic_chain_reports_nonconvergence() {
        let swap = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let err = stationary_distribution(&swap, StationaryConfig::default());
        // uniform is the fixed point of a swap, so power iteration from uniform converges
        assert!(err.is_ok());
        let cyc = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let rho = stationary_distribution(&cyc, StationaryConfig::default()).unwrap();
        assert_abs_diff_eq!(rho[0], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn memory_indexing_round_trips() {
        let p = random_mem_hmm(1, 2, 3, 2, 5).unwrap();
        for col in 0..p.emission.ncols() {
            let (m, j, s) = p.emission_parts(col);
            assert_eq!(p.emission_index(m, p.hidden_index(j, s)), col);
        }
        for c in 0..p.n_mem_configs() {
            let vals = p.mem_config_values(c);
            assert_eq!(p.mem_config_index(&vals), c);
            for (k, &v) in vals.iter().enumerate() {
                assert_eq!(p.cell_value(c, k), v);
            }
        }
    }

    #[test]
    fn lifted_sizes_and_single_memory_reduction() {
        let p = random_mem_hmm(2, 2, 3, 2, 5).unwrap();
        let l = lift_mem_hmm(&p, DEFAULT_CAP).unwrap();
        assert_eq!(l.n_hidden, 9 * 4);
        let single = random_mem_hmm(3, 1, 1, 3, 4).unwrap();
        let ls = lift_mem_hmm(&single, DEFAULT_CAP).unwrap();
        assert_eq!(ls, single.syntax_hmm().unwrap());
        assert!(matches!(lift_mem_hmm(&p, 10), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn deterministic_point_mass_sampling() {
        let p = HmmParams::new(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
            DVector::from_vec(vec![1.0, 0.0]),
        )
        .unwrap();
        let s = sample_sequence(&p, 129, 11).unwrap();
        assert!(s.hidden_path.iter().all(|&h| h == 0));
        assert!(s.tokens.iter().all(|&x| x == 0));
        assert_eq!(s.tokens.len(), 129);
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = random_mem_hmm(4, 2, 2, 2, 6).unwrap();
        assert_eq!(sample_mem_sequence(&p, 30, 9).unwrap(), sample_mem_sequence(&p, 30, 9).unwrap());
    }
}
