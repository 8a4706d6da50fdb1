//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Default relative rank tolerance: singular values above `RANK_TOL * sigma_max` count.
pub const RANK_TOL: f64 = 1e-8;

/// Tolerance for stochasticity checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn l1_norm(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Scales `v` to unit l1 norm in place and returns the previous norm. A zero
/// vector is left untouched.
pub fn normalize_l1(v: &mut DVector<f64>) -> f64 {
    let n = l1_norm(v);
    if n > 0.0 {
        *v /= n;
    }
    n
}

pub fn hadamard(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    a.component_mul(b)
}

pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Cosine similarity; zero if either vector is zero.
pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Checks that every column of `m` is a probability vector.
pub fn check_column_stochastic(m: &DMatrix<f64>, tol: f64) -> Result<(), String> {
    for (j, col) in m.column_iter().enumerate() {
        if let Some(bad) = col.iter().find(|&&x| !(-tol..=1.0 + tol).contains(&x) || !x.is_finite()) {
            return Err(format!("column {j} has entry {bad} outside [0,1]"));
        }
        let s: f64 = col.iter().sum();
        if (s - 1.0).abs() > tol {
            return Err(format!("column {j} sums to {s}"));
        }
    }
    Ok(())
}

pub fn check_probability_vector(v: &DVector<f64>, tol: f64) -> Result<(), String> {
    if let Some(bad) = v.iter().find(|&&x| !(-tol..=1.0 + tol).contains(&x) || !x.is_finite()) {
        return Err(format!("entry {bad} outside [0,1]"));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(format!("sums to {s}"));
    }
    Ok(())
}

/// Singular values in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.ncols() == 0 || m.nrows() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Rank decision with the recorded gap.
#[derive(Debug, Clone, PartialEq)]
pub struct RankInfo {
    pub rank: usize,
    pub columns: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// `sigma_min / sigma_max` over all `min(rows, cols)` singular values; zero
    /// when there are more columns than rows.
    pub gap: f64,
}

impl RankInfo {
    pub fn full_column_rank(&self, tol: f64) -> bool {
        self.columns > 0 && self.gap > tol
    }
}

pub fn rank_info(m: &DMatrix<f64>, tol: f64) -> RankInfo {
    let s = singular_values(m);
    let sigma_max = s.first().copied().unwrap_or(0.0);
    let sigma_min = if m.ncols() > m.nrows() { 0.0 } else { s.last().copied().unwrap_or(0.0) };
    let rank = s.iter().filter(|&&x| sigma_max > 0.0 && x > tol * sigma_max).count();
    let gap = if sigma_max > 0.0 { sigma_min / sigma_max } else { 0.0 };
    RankInfo { rank, columns: m.ncols(), sigma_max, sigma_min, gap }
}

/// Least-squares left inverse `(M^T M)^{-1} M^T`, computed by SVD. Only
/// meaningful for full column rank inputs.
pub fn left_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return DMatrix::zeros(0, m.nrows());
    }
    let svd = m.clone().svd(true, true);
    svd.pseudo_inverse(0.0).expect("svd with u and v computed")
}

/// Orthonormal basis for the column span of `m` (singular values above `tol * sigma_max`).
pub fn span_basis(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    if m.ncols() == 0 || m.nrows() == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("u requested");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| smax > 0.0 && svd.singular_values[i] > tol * smax)
        .collect();
    DMatrix::from_fn(m.nrows(), keep.len(), |r, c| u[(r, keep[c])])
}

/// Matrix whose columns are the selected columns of `m`, in order.
pub fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |r, c| m[(r, cols[c])])
}

/// Horizontal concatenation.
pub fn hstack(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = parts.first().map_or(0, |p| p.nrows());
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.view_mut((0, at), (rows, p.ncols())).copy_from(*p);
        at += p.ncols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_sums_to_one_and_orders() {
        let p = softmax(&[0.1, 0.5, 0.3], 0.01);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert!(p[1] > p[2] && p[2] > p[0]);
    }

    #[test]
    fn left_inverse_of_tall_matrix() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let li = left_inverse(&m);
        assert_abs_diff_eq!(li * &m, DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn rank_of_wide_matrix_has_zero_gap() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let r = rank_info(&m, RANK_TOL);
        assert_eq!(r.rank, 2);
        assert!(!r.full_column_rank(RANK_TOL));
    }

    #[test]
    fn span_basis_drops_dependent_columns() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(span_basis(&m, RANK_TOL).ncols(), 2);
    }
}
