//! A prompt vector read as the emission probabilities of an extra token.

use nalgebra::{DMatrix, DVector};

use crate::enumerate::PathModel;
use crate::model::HmmParams;
use crate::{Error, Result};

/// Model whose position 1 can emit an extra token (index `n_vocab`) with
/// probability `prompt[h]`; regular tokens there are scaled by `1 - prompt[h]`.
#[derive(Debug, Clone)]
pub struct FakeTokenModel {
    pub base: HmmParams,
    pub prompt: DVector<f64>,
}

impl FakeTokenModel {
    /// Id of the extra token at position 1.
    pub fn fake_token(&self) -> usize {
        self.base.n_vocab
    }
}

pub fn fake_token_extend(params: &HmmParams, prompt: &DVector<f64>) -> Result<FakeTokenModel> {
    if prompt.len() != params.n_hidden {
        return Err(Error::DimensionMismatch { what: "prompt length", expected: params.n_hidden, got: prompt.len() });
    }
    if prompt.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("prompt entries must lie in [0, 1]"));
    }
    Ok(FakeTokenModel { base: params.clone(), prompt: prompt.clone() })
}

impl PathModel for FakeTokenModel {
    fn n_hidden(&self) -> usize {
        self.base.n_hidden
    }
    fn transition(&self) -> &DMatrix<f64> {
        &self.base.transition
    }
    fn start(&self) -> &DVector<f64> {
        &self.base.start
    }
    fn vocab_at(&self, pos: usize) -> usize {
        if pos == 1 {
            self.base.n_vocab + 1
        } else {
            self.base.n_vocab
        }
    }
    fn emission_prob(&self, pos: usize, token: usize, h: usize) -> f64 {
        if pos != 1 {
            return self.base.emission[(token, h)];
        }
        if token == self.base.n_vocab {
            self.prompt[h]
        } else {
            (1.0 - self.prompt[h]) * self.base.emission[(token, h)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_hmm;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_prompt_keeps_original_emissions() {
        let p = random_hmm(2, 3, 4).unwrap();
        let m = fake_token_extend(&p, &DVector::zeros(3)).unwrap();
        for h in 0..3 {
            assert_eq!(m.emission_prob(1, 4, h), 0.0);
            for z in 0..4 {
                assert_eq!(m.emission_prob(1, z, h), p.emission[(z, h)]);
            }
        }
    }

    #[test]
    fn ones_prompt_forces_the_fake_token() {
        let p = random_hmm(2, 3, 4).unwrap();
        let m = fake_token_extend(&p, &DVector::from_element(3, 1.0)).unwrap();
        for h in 0..3 {
            assert_eq!(m.emission_prob(1, 4, h), 1.0);
            let total: f64 = (0..5).map(|z| m.emission_prob(1, z, h)).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn out_of_range_prompt_rejected() {
        let p = random_hmm(2, 2, 2).unwrap();
        assert!(fake_token_extend(&p, &DVector::from_vec(vec![0.5, 1.5])).is_err());
    }
}
