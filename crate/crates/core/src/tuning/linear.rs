use nalgebra::{DMatrix, DVector};

use super::{logistic, sigmoid, TrainConfig};
use crate::par::{sum_vectors, Exec};
use crate::recovery::LinearHead;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct LinearFit {
    pub head: LinearHead,
    /// Training loss before each iteration, then after the last one.
    pub losses: Vec<f64>,
}

/// Curvature bound `X^T X / (4 n)` plus a small ridge, Cholesky-factored.
struct Preconditioner(nalgebra::Cholesky<f64, nalgebra::Dyn>);

impl Preconditioner {
    fn new(exec: Exec, features: &[DVector<f64>]) -> Result<Self> {
        let d = features[0].len();
        let flat = sum_vectors(exec, features, d * d, |_, x, acc| {
            for j in 0..d {
                for i in 0..d {
                    acc[j * d + i] += x[i] * x[j];
                }
            }
        });
        let n = features.len() as f64;
        let mut p = DMatrix::from_column_slice(d, d, &flat) / (4.0 * n);
        let ridge = 1e-8 * (p.trace() / d as f64).max(1e-300);
        for i in 0..d {
            p[(i, i)] += ridge;
        }
        p.cholesky().map(Self).ok_or_else(|| Error::NonFinite("feature covariance is not positive definite".into()))
    }
}

fn loss_and_grad(exec: Exec, features: &[DVector<f64>], labels: &[u8], w: &DVector<f64>) -> (f64, DVector<f64>) {
    let d = w.len();
    let acc = sum_vectors(exec, features, d + 1, |i, x, acc| {
        let s = w.dot(x);
        acc[d] += logistic(s, labels[i]);
        let r = sigmoid(s) - f64::from(labels[i]);
        for (a, xi) in acc[..d].iter_mut().zip(x.iter()) {
            *a += r * xi;
        }
    });
    let n = features.len() as f64;
    (acc[d] / n, DVector::from_iterator(d, acc[..d].iter().map(|g| g / n)))
}

/// Logistic regression weights from `init` (zeros when `None`).
pub fn train_linear_weights(exec: Exec, features: &[DVector<f64>], labels: &[u8], config: &TrainConfig, init: Option<&DVector<f64>>) -> Result<(DVector<f64>, Vec<f64>)> {
    config.validate()?;
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::invalid("need a nonempty feature set with one label per feature"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("features have differing lengths"));
    }
    let pre = Preconditioner::new(exec, features)?;
    let mut w = init.cloned().unwrap_or_else(|| DVector::zeros(d));
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..=config.epochs {
        let (loss, grad) = loss_and_grad(exec, features, labels, &w);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("logistic loss at iteration {epoch}")));
        }
        losses.push(loss);
        if epoch == config.epochs {
            break;
        }
        w -= pre.0.solve(&grad) * config.learning_rate;
    }
    Ok((w, losses))
}

/// Linear head on fixed oracle features.
pub fn train_linear_head(exec: Exec, features: &[DVector<f64>], labels: &[u8], config: &TrainConfig) -> Result<LinearFit> {
    let (w, losses) = train_linear_weights(exec, features, labels, config, None)?;
    Ok(LinearFit { head: LinearHead::new(w)?, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recovery::eval_linear;

    #[test]
    fn separable_set_is_fit() {
        let feats: Vec<DVector<f64>> = (0..40)
            .map(|i| {
                let a = (i as f64 + 0.5) / 40.0;
                DVector::from_vec(vec![a, 1.0 - a])
            })
            .collect();
        let labels: Vec<u8> = feats.iter().map(|f| u8::from(f[0] > 0.5)).collect();
        let fit = train_linear_head(Exec::Sequential, &feats, &labels, &TrainConfig::default()).unwrap();
        let acc = feats.iter().zip(&labels).filter(|(f, &y)| eval_linear(&fit.head, f) == y).count();
        assert_eq!(acc, 40);
        assert!(fit.losses.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn constant_labels_push_toward_that_label() {
        let feats: Vec<DVector<f64>> = (0..10).map(|i| DVector::from_vec(vec![0.1 * i as f64, 1.0 - 0.1 * i as f64])).collect();
        let fit = train_linear_head(Exec::Sequential, &feats, &[0; 10], &TrainConfig::default()).unwrap();
        assert!(feats.iter().all(|f| eval_linear(&fit.head, f) == 0));
        assert!(fit.losses.last().unwrap() < &0.05);
    }
}
