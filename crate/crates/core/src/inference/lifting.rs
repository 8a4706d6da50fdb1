//! Lifting between `(M, J, S)` emission space and the lifted state space
//! `(M_1..M_N, J, S)`, and the oracle of a memory-augmented model.

use nalgebra::DVector;

use super::{check_evidence, messages, Chain, OracleOutput};
use crate::linalg::l1_norm;
use crate::model::MemHmmParams;
use crate::{Error, Result};

/// Shape of a memory-augmented model, enough to index lifted vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemShape {
    pub n_cells: usize,
    pub mem_size: usize,
    pub syntax_size: usize,
}

impl MemShape {
    pub fn of(params: &MemHmmParams) -> Self {
        Self { n_cells: params.n_cells, mem_size: params.mem_size, syntax_size: params.syntax_size }
    }

    pub fn n_hidden(&self) -> usize {
        self.n_cells * self.syntax_size
    }

    pub fn n_configs(&self) -> usize {
        self.mem_size.pow(self.n_cells as u32)
    }

    /// `|M| |H|`.
    pub fn emission_dim(&self) -> usize {
        self.mem_size * self.n_hidden()
    }

    /// `|M|^N |H|`.
    pub fn lifted_dim(&self) -> usize {
        self.n_configs() * self.n_hidden()
    }

    fn cell_value(&self, config: usize, cell: usize) -> usize {
        (config / self.mem_size.pow((self.n_cells - 1 - cell) as u32)) % self.mem_size
    }

    /// Emission-space index read by lifted index `l`.
    pub fn source_index(&self, l: usize) -> usize {
        let nh = self.n_hidden();
        let config = l / nh;
        let h = l % nh;
        let cell = h / self.syntax_size;
        self.cell_value(config, cell) * nh + h
    }
}

/// `eta(v)[(m_1..m_N, j, s)] = v[(m_j, j, s)]`.
pub fn lift_embedding(shape: MemShape, v: &DVector<f64>) -> Result<DVector<f64>> {
    if v.len() != shape.emission_dim() {
        return Err(Error::DimensionMismatch { what: "emission-space vector", expected: shape.emission_dim(), got: v.len() });
    }
    Ok(DVector::from_fn(shape.lifted_dim(), |l, _| v[shape.source_index(l)]))
}

/// `phi(v)[(m, j, s)] = |M|^{-(N-1)} * sum over assignments with m_j = m`.
pub fn reverse_lift(shape: MemShape, v: &DVector<f64>) -> Result<DVector<f64>> {
    if v.len() != shape.lifted_dim() {
        return Err(Error::DimensionMismatch { what: "lifted vector", expected: shape.lifted_dim(), got: v.len() });
    }
    let mut out = DVector::zeros(shape.emission_dim());
    for (l, x) in v.iter().enumerate() {
        out[shape.source_index(l)] += x;
    }
    let scale = (shape.mem_size as f64).powi(shape.n_cells as i32 - 1);
    Ok(out / scale)
}

/// Row `token` of the emission matrix, over `(M, J, S)`.
pub fn mem_proper_embedding(params: &MemHmmParams, token: usize) -> Result<DVector<f64>> {
    params.check_token(token)?;
    Ok(params.emission.row(token).transpose())
}

/// Lifted proper embeddings, all ones at masked positions.
pub fn lifted_evidence(params: &MemHmmParams, obs: &[Option<usize>]) -> Result<Vec<DVector<f64>>> {
    let shape = MemShape::of(params);
    obs.iter()
        .map(|o| match o {
            Some(z) => lift_embedding(shape, &mem_proper_embedding(params, *z)?),
            None => Ok(DVector::from_element(shape.lifted_dim(), 1.0)),
        })
        .collect()
}

/// `W phi(tau_i) / |phi(tau_i)|_1` at every position, over lifted embeddings.
pub fn gbar_mem(params: &MemHmmParams, embeds: &[DVector<f64>]) -> Result<OracleOutput> {
    let chain = Chain::lifted(params);
    check_evidence(chain.dim(), embeds)?;
    Ok(gbar_mem_chain(params, &chain, embeds))
}

pub(crate) fn gbar_mem_chain(params: &MemHmmParams, chain: &Chain, embeds: &[DVector<f64>]) -> OracleOutput {
    let shape = MemShape::of(params);
    let msgs = messages(chain, embeds);
    let mut dists = Vec::with_capacity(embeds.len());
    let mut zero = Vec::with_capacity(embeds.len());
    for k in 0..embeds.len() {
        let folded = reverse_lift(shape, &msgs.tau(k)).expect("lifted dimension");
        let s = l1_norm(&folded);
        if s > 0.0 {
            dists.push(&params.emission * folded / s);
            zero.push(false);
        } else {
            dists.push(DVector::zeros(params.n_vocab));
            zero.push(true);
        }
    }
    OracleOutput { positions: (1..=embeds.len()).collect(), dists, zero }
}

/// Masked-LM oracle of a memory-augmented model at the given 1-based positions.
pub fn mem_oracle(params: &MemHmmParams, tokens: &[usize], masked: &[usize]) -> Result<OracleOutput> {
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
    let full = gbar_mem(params, &lifted_evidence(params, &obs)?)?;
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
    use crate::model::random_mem_hmm;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_cell_lifting_is_identity() {
        let shape = MemShape { n_cells: 1, mem_size: 3, syntax_size: 2 };
        let v = DVector::from_fn(6, |i, _| i as f64 * 0.5);
        assert_eq!(lift_embedding(shape, &v).unwrap(), v);
        assert_eq!(reverse_lift(shape, &v).unwrap(), v);
    }

    #[test]
    fn reverse_lift_inverts_lift() {
        let shape = MemShape { n_cells: 3, mem_size: 2, syntax_size: 2 };
        let v = DVector::from_fn(shape.emission_dim(), |i, _| (i as f64).sin().abs());
        let back = reverse_lift(shape, &lift_embedding(shape, &v).unwrap()).unwrap();
        assert_abs_diff_eq!(back, v, epsilon = 1e-14);
    }

    #[test]
    fn lifted_emission_row_matches_lifted_model() {
        let p = random_mem_hmm(5, 2, 2, 2, 4).unwrap();
        let lifted = crate::model::lift_mem_hmm(&p, crate::model::DEFAULT_CAP).unwrap();
        for z in 0..4 {
            let eta = lift_embedding(MemShape::of(&p), &mem_proper_embedding(&p, z).unwrap()).unwrap();
            assert_eq!(eta, lifted.emission.row(z).transpose());
        }
    }
}
