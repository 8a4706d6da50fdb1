//! Brute-force oracles: sum the joint probability over every hidden path.
//!
//! These are deliberately naive and exist to cross-check message passing.
//! Observations are `Option<usize>` per position `1..=t`; `None` marks a masked
//! position, which is marginalised analytically (its emission factor is 1).

use nalgebra::{DMatrix, DVector};

use crate::model::{HmmParams, MemHmmParams};
use crate::{Error, Result};

/// A chain whose emission distribution may depend on the position.
pub trait PathModel {
    fn n_hidden(&self) -> usize;
    fn transition(&self) -> &DMatrix<f64>;
    /// Distribution of `H_0`.
    fn start(&self) -> &DVector<f64>;
    /// Vocabulary size at 1-based position `pos`.
    fn vocab_at(&self, pos: usize) -> usize;
    /// `P(X_pos = token | H_pos = h)`.
    fn emission_prob(&self, pos: usize, token: usize, h: usize) -> f64;
}

impl PathModel for HmmParams {
    fn n_hidden(&self) -> usize {
        self.n_hidden
    }
    fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }
    fn start(&self) -> &DVector<f64> {
        &self.start
    }
    fn vocab_at(&self, _pos: usize) -> usize {
        self.n_vocab
    }
    fn emission_prob(&self, _pos: usize, token: usize, h: usize) -> f64 {
        self.emission[(token, h)]
    }
}

/// Per-position joint masses `P(H_i = h, observed)` for `i = 0..=t`.
#[derive(Debug, Clone)]
pub struct PathSums {
    pub total: f64,
    pub joint: Vec<DVector<f64>>,
}

/// Exact conditional at one masked position.
#[derive(Debug, Clone)]
pub struct Conditional {
    /// 1-based position.
    pub position: usize,
    /// `P(X_i | observed)`, or zeros when `zero` is set.
    pub dist: DVector<f64>,
    /// The observed tokens have probability zero.
    pub zero: bool,
}

fn path_count(n: usize, len: usize, cap: u128) -> Result<()> {
    let mut paths: u128 = 1;
    for _ in 0..len {
        paths = paths.saturating_mul(n as u128);
        if paths > cap {
            return Err(Error::TooLarge { paths, cap });
        }
    }
    Ok(())
}

fn evidence<M: PathModel + ?Sized>(model: &M, obs: &[Option<usize>]) -> Result<Vec<Vec<f64>>> {
    obs.iter()
        .enumerate()
        .map(|(k, o)| {
            let pos = k + 1;
            match o {
                None => Ok(vec![1.0; model.n_hidden()]),
                Some(z) if *z >= model.vocab_at(pos) => Err(Error::TokenOutOfRange { token: *z, vocab: model.vocab_at(pos) }),
                Some(z) => Ok((0..model.n_hidden()).map(|h| model.emission_prob(pos, *z, h)).collect()),
            }
        })
        .collect()
}

/// Sums the joint over all `|H|^(t+1)` paths.
pub fn path_sums<M: PathModel + ?Sized>(model: &M, obs: &[Option<usize>], cap: u128) -> Result<PathSums> {
    let n = model.n_hidden();
    let t = obs.len();
    path_count(n, t + 1, cap)?;
    let ev = evidence(model, obs)?;
    let mut joint = vec![DVector::zeros(n); t + 1];
    let mut path = vec![0usize; t + 1];
    let mut total = 0.0;
    let trans = model.transition();

    // Depth-first walk: weights[k] is the joint up to and including position k.
    fn walk(
        k: usize,
        weight: f64,
        path: &mut [usize],
        trans: &DMatrix<f64>,
        ev: &[Vec<f64>],
        joint: &mut [DVector<f64>],
        total: &mut f64,
    ) {
        let t = ev.len();
        if k == t {
            *total += weight;
            for (i, &h) in path.iter().enumerate() {
                joint[i][h] += weight;
            }
            return;
        }
        let prev = path[k];
        for h in 0..trans.nrows() {
            let w = weight * trans[(h, prev)] * ev[k][h];
            if w == 0.0 {
                continue;
            }
            path[k + 1] = h;
            walk(k + 1, w, path, trans, ev, joint, total);
        }
    }

    for h0 in 0..n {
        let w = model.start()[h0];
        if w == 0.0 {
            continue;
        }
        path[0] = h0;
        walk(0, w, &mut path, trans, &ev, &mut joint, &mut total);
    }
    Ok(PathSums { total, joint })
}

/// `P(X_i | observed)` for every masked position `i`.
pub fn enumerate_conditionals<M: PathModel + ?Sized>(model: &M, obs: &[Option<usize>], cap: u128) -> Result<Vec<Conditional>> {
    let sums = path_sums(model, obs, cap)?;
    Ok(obs
        .iter()
        .enumerate()
        .filter(|(_, o)| o.is_none())
        .map(|(k, _)| {
            let pos = k + 1;
            let vocab = model.vocab_at(pos);
            if sums.total <= 0.0 {
                return Conditional { position: pos, dist: DVector::zeros(vocab), zero: true };
            }
            let joint = &sums.joint[pos];
            let dist = DVector::from_fn(vocab, |z, _| {
                (0..model.n_hidden()).map(|h| joint[h] * model.emission_prob(pos, z, h)).sum::<f64>() / sums.total
            });
            Conditional { position: pos, dist, zero: false }
        })
        .collect())
}

/// `P(H_i | observed)` for `i = 0..=t`; `None` if the observation has zero probability.
pub fn enumerate_hidden_posteriors<M: PathModel + ?Sized>(model: &M, obs: &[Option<usize>], cap: u128) -> Result<Option<Vec<DVector<f64>>>> {
    let sums = path_sums(model, obs, cap)?;
    if sums.total <= 0.0 {
        return Ok(None);
    }
    Ok(Some(sums.joint.into_iter().map(|j| j / sums.total).collect()))
}

/// Per-position joint masses `P(M = c, H_i = h, observed)` of a memory model,
/// enumerated over memory assignments and syntax paths directly.
#[derive(Debug, Clone)]
pub struct MemPathSums {
    pub total: f64,
    /// One `configs x |H|` matrix per position `0..=t`.
    pub joint: Vec<DMatrix<f64>>,
}

pub fn mem_path_sums(params: &MemHmmParams, obs: &[Option<usize>], cap: u128) -> Result<MemPathSums> {
    let nh = params.n_hidden();
    let nc = params.n_mem_configs();
    let t = obs.len();
    path_count(nh, t + 1, cap / nc as u128)?;
    for z in obs.iter().flatten() {
        params.check_token(*z)?;
    }
    let mut joint = vec![DMatrix::zeros(nc, nh); t + 1];
    let mut total = 0.0;
    let mut path = vec![0usize; t + 1];

    struct Ctx<'a> {
        params: &'a MemHmmParams,
        obs: &'a [Option<usize>],
        config: usize,
    }

    fn walk(k: usize, weight: f64, path: &mut [usize], ctx: &Ctx<'_>, joint: &mut [DMatrix<f64>], total: &mut f64) {
        let t = ctx.obs.len();
        if k == t {
            *total += weight;
            for (i, &h) in path.iter().enumerate() {
                joint[i][(ctx.config, h)] += weight;
            }
            return;
        }
        let p = ctx.params;
        let prev = path[k];
        for h in 0..p.n_hidden() {
            let mut w = weight * p.transition[(h, prev)];
            if let Some(z) = ctx.obs[k] {
                let (j, _) = p.hidden_parts(h);
                w *= p.emission[(z, p.emission_index(p.cell_value(ctx.config, j), h))];
            }
            if w == 0.0 {
                continue;
            }
            path[k + 1] = h;
            walk(k + 1, w, path, ctx, joint, total);
        }
    }

    for config in 0..nc {
        let ctx = Ctx { params, obs, config };
        for h0 in 0..nh {
            let w = params.mem_prior[config] * params.start[h0];
            if w == 0.0 {
                continue;
            }
            path[0] = h0;
            walk(0, w, &mut path, &ctx, &mut joint, &mut total);
        }
    }
    Ok(MemPathSums { total, joint })
}

impl MemPathSums {
    /// `P(M_cell = m | observed)`; `None` on zero probability.
    pub fn memory_posterior(&self, params: &MemHmmParams, cell: usize) -> Option<DVector<f64>> {
        if self.total <= 0.0 {
            return None;
        }
        let mut out = DVector::zeros(params.mem_size);
        let j0 = &self.joint[0];
        for c in 0..params.n_mem_configs() {
            out[params.cell_value(c, cell)] += j0.row(c).sum();
        }
        Some(out / self.total)
    }

    /// `P(M_j = m, H_i = h | observed)` indexed like emission columns `(m, h)`.
    pub fn cell_state_posterior(&self, params: &MemHmmParams, pos: usize) -> Option<DVector<f64>> {
        if self.total <= 0.0 {
            return None;
        }
        let nh = params.n_hidden();
        let mut out = DVector::zeros(params.mem_size * nh);
        for c in 0..params.n_mem_configs() {
            for h in 0..nh {
                let (j, _) = params.hidden_parts(h);
                out[params.emission_index(params.cell_value(c, j), h)] += self.joint[pos][(c, h)];
            }
        }
        Some(out / self.total)
    }
}

/// `P(X_i | observed)` for every masked position of a memory model, by direct enumeration.
pub fn mem_enumerate_conditionals(params: &MemHmmParams, obs: &[Option<usize>], cap: u128) -> Result<Vec<Conditional>> {
    let sums = mem_path_sums(params, obs, cap)?;
    Ok(obs
        .iter()
        .enumerate()
        .filter(|(_, o)| o.is_none())
        .map(|(k, _)| {
            let pos = k + 1;
            match sums.cell_state_posterior(params, pos) {
                None => Conditional { position: pos, dist: DVector::zeros(params.n_vocab), zero: true },
                Some(p) => Conditional { position: pos, dist: &params.emission * p, zero: false },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DEFAULT_CAP;
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
    fn four_path_example() {
        // P(X1=0, X2=0) = 0.322 and P(X2=0) = 0.5 under the symmetric chain.
        let c = enumerate_conditionals(&symmetric(), &[None, Some(0)], DEFAULT_CAP).unwrap();
        assert_abs_diff_eq!(c[0].dist[0], 0.644, epsilon = 1e-12);
        let d = enumerate_conditionals(&symmetric(), &[None, Some(1)], DEFAULT_CAP).unwrap();
        assert_abs_diff_eq!(c[0].dist[0], d[0].dist[1], epsilon = 1e-15);
    }

    #[test]
    fn single_state_returns_emission_column() {
        let p = HmmParams::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_column_slice(3, 1, &[0.2, 0.3, 0.5]),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let c = enumerate_conditionals(&p, &[Some(1), None, Some(2)], DEFAULT_CAP).unwrap();
        assert_abs_diff_eq!(c[0].dist, p.emission.column(0).into_owned(), epsilon = 1e-15);
    }

    #[test]
    fn cap_exceeded_is_an_error() {
        let r = enumerate_conditionals(&symmetric(), &[None; 10], 100);
        assert!(matches!(r, Err(Error::TooLarge { .. })));
    }

    #[test]
    fn zero_probability_is_flagged() {
        let p = HmmParams::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 0.0]),
        )
        .unwrap();
        let c = enumerate_conditionals(&p, &[None, Some(1)], DEFAULT_CAP).unwrap();
        assert!(c[0].zero);
        assert_eq!(c[0].dist.sum(), 0.0);
    }
}
