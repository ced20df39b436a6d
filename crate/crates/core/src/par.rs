//! Indexed map helpers that run on the rayon pool when the `parallel`
//! feature is enabled and fall back to a plain loop otherwise.
//!
//! Callers pass a pure function of the index, so the output is identical
//! (element for element) regardless of scheduling.

/// Applies `f` to `0..n` and collects the results in index order.
#[cfg(feature = "parallel")]
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Applies `f` to `0..n` and collects the results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    (0..n).map(f).collect()
}

/// Sequential version of [`map_indices`], always available. Benchmarks use
/// this as the baseline when comparing against the rayon path.
pub fn map_indices_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let a = map_indices(100, |i| i * i);
        let b = map_indices_seq(100, |i| i * i);
        assert_eq!(a, b);
    }
}
