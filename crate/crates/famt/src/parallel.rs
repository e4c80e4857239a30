//! Order-preserving data-parallel map with a sequential fallback.
//!
//! `workers <= 1`, or building without the `parallel` feature, always takes
//! the sequential path. Results are collected in input order either way, so
//! callers that combine them in a fixed order get bit-identical output for
//! any worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Sizes the global worker pool. A no-op for `workers <= 1` or when the
/// `parallel` feature is off; calling it more than once keeps the first
/// size.
pub fn configure_pool(workers: usize) {
    #[cfg(feature = "parallel")]
    if workers > 1 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
}

pub fn ordered_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let _ = workers;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

pub fn ordered_map_range<R, F>(n: usize, workers: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = workers;
    (0..n).map(f).collect()
}
