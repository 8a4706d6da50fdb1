//! Model families built to satisfy particular recovery conditions.
//!
//! The degenerate vanilla family has more hidden states than tokens, so its
//! emission matrix cannot be inverted, yet a small source set of states
//! reaches exactly a set of essential states whose emissions are
//! independent. The marker family is a memory-augmented model where one
//! state emits from tokens nobody else uses and is entered deterministically
//! from a second state with its own private token, so the position after
//! that private token has a posterior sitting entirely on the target state.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng as _;

use crate::assumptions::{check_regularity, check_relaxed_vanilla, search_b_set};
use crate::downstream::{make_task_on, TaskSpec};
use crate::linalg::{rank_info, softmax, RANK_TOL};
use crate::model::{product_prior, random_permutation_mixture, random_stochastic_columns, stationary_distribution, HmmParams, MemHmmParams, StationaryConfig, EMISSION_TEMPERATURE, START_TEMPERATURE};
use crate::rng::{child_rng, derive_seed, tags, Rng};
use crate::{Error, Result};

/// Draws tried before a family constructor gives up.
pub const FAMILY_ATTEMPTS: usize = 200;

/// Nonzero count of family task weights, capped by the support pool.
pub const TASK_NONZEROS: usize = 6;

#[derive(Debug, Clone)]
pub struct DegenerateFamily {
    pub params: HmmParams,
    pub h_star: Vec<usize>,
    pub b_set: Vec<usize>,
    pub task: TaskSpec,
}

fn uniform_logits(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Essential states get independent low-temperature emission columns; every
/// other state copies one of them. One source state moves only into the
/// essential set, with full support there. The start distribution is the
/// stationary law of the chain.
pub fn build_degenerate_family(seed: u64, n_hidden: usize, n_vocab: usize, h_star_size: usize) -> Result<DegenerateFamily> {
    if h_star_size == 0 || h_star_size > n_vocab || n_vocab > n_hidden {
        return Err(Error::invalid(format!(
            "need 1 <= |H*| <= |Z| <= |H| (got |H*| = {h_star_size}, |Z| = {n_vocab}, |H| = {n_hidden})"
        )));
    }
    for attempt in 0..FAMILY_ATTEMPTS {
        let s = derive_seed(derive_seed(seed, tags::FAMILY), attempt as u64);
        let mut rng = child_rng(s, tags::FAMILY);
        let mut h_star: Vec<usize> = sample(&mut rng, n_hidden, h_star_size).into_vec();
        h_star.sort_unstable();
        let source = rng.random_range(0..n_hidden);

        let essential = random_stochastic_columns(&mut child_rng(s, tags::EMISSION), n_vocab, h_star_size, EMISSION_TEMPERATURE);
        if !rank_info(&essential, RANK_TOL).full_column_rank(RANK_TOL) {
            continue;
        }
        let mut emission = DMatrix::zeros(n_vocab, n_hidden);
        let mut copy = 0;
        for h in 0..n_hidden {
            let col = match h_star.binary_search(&h) {
                Ok(i) => i,
                Err(_) => {
                    copy += 1;
                    (copy - 1) % h_star_size
                }
            };
            emission.set_column(h, &essential.column(col));
        }

        let mut transition = random_permutation_mixture(&mut child_rng(s, tags::TRANSITION), n_hidden);
        let into = softmax(&uniform_logits(&mut rng, h_star_size), 1.0);
        let mut col = DVector::zeros(n_hidden);
        for (&h, p) in h_star.iter().zip(into) {
            col[h] = p;
        }
        transition.set_column(source, &col);
        if search_b_set(&transition, &h_star, 3).as_deref() != Some(&[source][..]) {
            continue;
        }
        let Ok(start) = stationary_distribution(&transition, StationaryConfig::default()) else {
            continue;
        };
        if !check_regularity(&transition, &start).pass {
            continue;
        }
        let params = HmmParams::new(transition, emission, start)?;
        let task = make_task_on(derive_seed(s, tags::TASK), n_hidden, &h_star, TASK_NONZEROS.min(h_star_size))?;
        let check = check_relaxed_vanilla(&params, &task.weights, &h_star, &[source], RANK_TOL);
        if !check.verdict.pass {
            continue;
        }
        return Ok(DegenerateFamily { params, h_star, b_set: vec![source], task });
    }
    Err(Error::AssumptionFailed(format!("no degenerate family member after {FAMILY_ATTEMPTS} draws")))
}

#[derive(Debug, Clone)]
pub struct MarkerFamily {
    pub params: MemHmmParams,
    pub j_star: usize,
    pub s_star: Vec<usize>,
    /// Hidden state `(j*, s*)` whose emissions depend on memory.
    pub target_state: usize,
    /// State that always moves to `target_state`.
    pub marker_state: usize,
    /// The marker's private token.
    pub marker_token: usize,
}

/// Marker family with `j* = 0`, `s* = {0}`. Tokens `0..|M|` are emitted only
/// by the target state, token `|M|` only by the marker (the last hidden
/// state), and the remaining tokens by every other state. Transitions out of
/// non-marker states are dense softmax draws; the start distribution is
/// stationary.
pub fn build_marker_mem_family(seed: u64, n_cells: usize, mem_size: usize, syntax_size: usize, n_vocab: usize) -> Result<MarkerFamily> {
    let n_hidden = n_cells * syntax_size;
    if n_hidden < 2 || mem_size == 0 {
        return Err(Error::invalid("marker family needs at least two hidden states and one memory value"));
    }
    if n_vocab < mem_size + 2 {
        return Err(Error::invalid(format!("marker family needs |Z| >= |M| + 2 (got {n_vocab})")));
    }
    let target = 0;
    let marker = n_hidden - 1;
    let shared = n_vocab - mem_size - 1;
    for attempt in 0..FAMILY_ATTEMPTS {
        let s = derive_seed(derive_seed(seed, tags::FAMILY), attempt as u64);
        let mut em_rng = child_rng(s, tags::EMISSION);
        let mut emission = DMatrix::zeros(n_vocab, mem_size * n_hidden);
        for m in 0..mem_size {
            for h in 0..n_hidden {
                let c = m * n_hidden + h;
                if h == target {
                    for (z, p) in softmax(&uniform_logits(&mut em_rng, mem_size), 1.0).into_iter().enumerate() {
                        emission[(z, c)] = p;
                    }
                } else if h == marker {
                    emission[(mem_size, c)] = 1.0;
                } else {
                    for (z, p) in softmax(&uniform_logits(&mut em_rng, shared), 1.0).into_iter().enumerate() {
                        emission[(mem_size + 1 + z, c)] = p;
                    }
                }
            }
        }
        let target_cols = DMatrix::from_fn(mem_size, mem_size, |z, m| emission[(z, m * n_hidden + target)]);
        if !rank_info(&target_cols, RANK_TOL).full_column_rank(RANK_TOL) {
            continue;
        }
        let mut tr_rng = child_rng(s, tags::TRANSITION);
        let mut transition = DMatrix::zeros(n_hidden, n_hidden);
        for from in 0..n_hidden {
            if from == marker {
                transition[(target, from)] = 1.0;
            } else {
                for (to, p) in softmax(&uniform_logits(&mut tr_rng, n_hidden), 1.0).into_iter().enumerate() {
                    transition[(to, from)] = p;
                }
            }
        }
        let Ok(start) = stationary_distribution(&transition, StationaryConfig::default()) else {
            continue;
        };
        let mut mem_rng = child_rng(s, tags::MEMORY);
        let cells: Vec<Vec<f64>> = (0..n_cells).map(|_| softmax(&uniform_logits(&mut mem_rng, mem_size), START_TEMPERATURE)).collect();
        let params = MemHmmParams::new(n_cells, mem_size, syntax_size, transition, emission, start, product_prior(&cells))?;
        if !check_regularity(&params.transition, &params.start).pass {
            continue;
        }
        return Ok(MarkerFamily { params, j_star: 0, s_star: vec![0], target_state: target, marker_state: marker, marker_token: mem_size });
    }
    Err(Error::AssumptionFailed(format!("no marker family member after {FAMILY_ATTEMPTS} draws")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assumptions::{check_nondegenerate_emissions, check_recoverable, check_stationary, STATIONARY_TOL};

    #[test]
    fn degenerate_family_fails_full_rank_but_passes_relaxed() {
        let f = build_degenerate_family(0, 15, 10, 6).unwrap();
        assert!(!check_nondegenerate_emissions(&f.params.emission, RANK_TOL).verdict.pass);
        assert!(check_relaxed_vanilla(&f.params, &f.task.weights, &f.h_star, &f.b_set, RANK_TOL).verdict.pass);
        assert_eq!(search_b_set(&f.params.transition, &f.h_star, 3), Some(f.b_set.clone()));
        assert!(f.task.support.iter().all(|h| f.h_star.contains(h)));
    }

    #[test]
    fn square_family_is_nondegenerate() {
        let f = build_degenerate_family(1, 10, 10, 10).unwrap();
        assert!(check_nondegenerate_emissions(&f.params.emission, RANK_TOL).verdict.pass);
    }

    #[test]
    fn marker_family_is_recoverable_and_stationary() {
        let f = build_marker_mem_family(3, 1, 3, 4, 10).unwrap();
        let c = check_recoverable(&f.params, f.j_star, &f.s_star, RANK_TOL);
        assert!(c.verdict.pass, "{:?}", c.verdict);
        assert!(check_stationary(&f.params.transition, &f.params.start, STATIONARY_TOL).pass);
    }
}
