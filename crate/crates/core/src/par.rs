//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] dispatches to rayon;
//! without it every call runs sequentially. Reductions use fixed-size chunks
//! combined in index order, so parallel and sequential runs produce
//! bit-identical floating-point results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length for ordered reductions. Independent of the thread count.
pub const REDUCE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Sum of per-item vectors of length `dim`, reduced deterministically.
pub fn sum_vectors<T, F>(exec: Exec, items: &[T], dim: usize, f: F) -> Vec<f64>
where
    T: Sync,
    F: Fn(usize, &T, &mut [f64]) + Sync + Send,
{
    let n_chunks = items.len().div_ceil(REDUCE_CHUNK);
    let partials = map_range(exec, n_chunks, |c| {
        let mut acc = vec![0.0; dim];
        let lo = c * REDUCE_CHUNK;
        let hi = (lo + REDUCE_CHUNK).min(items.len());
        for (i, item) in items[lo..hi].iter().enumerate() {
            f(lo + i, item, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; dim];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_parallel_sums_are_bit_identical() {
        let items: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin() * 1e-3 + 1.0 / (i as f64 + 1.0)).collect();
        let f = |_: usize, x: &f64, acc: &mut [f64]| {
            acc[0] += *x;
            acc[1] += x * x;
        };
        let a = sum_vectors(Exec::Sequential, &items, 2, f);
        let b = sum_vectors(Exec::Parallel, &items, 2, f);
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn map_preserves_order() {
        let v: Vec<usize> = (0..500).collect();
        assert_eq!(map(Exec::Parallel, &v, |x| x * 2), map(Exec::Sequential, &v, |x| x * 2));
    }
}
