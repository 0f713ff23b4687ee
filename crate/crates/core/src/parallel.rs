//! Data-parallel map helpers with a sequential fallback.
//!
//! With the default `parallel` feature, [`maybe_par_map`] fans work out over
//! the rayon pool; without it, the same call runs sequentially. Results come
//! back in input order either way, and every caller reduces them in that
//! fixed order, so outputs are bit-identical regardless of feature flags or
//! worker count. [`seq_map`] is always available so benchmarks can compare
//! the two paths in one build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Sequential indexed map; the baseline both paths must agree with.
pub fn seq_map<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    (0..n).map(f).collect()
}

/// Indexed map over `0..n`, parallel when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn maybe_par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Indexed map over `0..n`, parallel when the `parallel` feature is enabled.
#[cfg(not(feature = "parallel"))]
pub fn maybe_par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    seq_map(n, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let f = |i: usize| (i as f64 + 0.5).sin();
        let a = seq_map(1000, f);
        let b = maybe_par_map(1000, f);
        assert_eq!(a, b);
    }
}
