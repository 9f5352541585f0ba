//! Data-parallel helpers with a sequential fallback.
//!
//! Work is always split into the same index-ordered pieces and results come
//! back in index order, so reductions built on top are bit-identical with or
//! without the `parallel` feature and for any thread count.

/// Evaluates `f` on `0..n` and returns the results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Caps the global worker pool. `0` leaves the default (one per core).
#[cfg(feature = "parallel")]
pub fn configure_threads(threads: usize) {
    if threads > 0 {
        // Fails only if a pool is already installed; keep that pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_threads: usize) {}

/// Fixed-order elementwise sum of partial accumulators.
pub fn sum_arrays<const K: usize>(parts: &[[f64; K]]) -> [f64; K] {
    let mut acc = [0.0; K];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

/// Runs `f` on a private pool of `threads` workers (`0` = one per core).
/// Without the `parallel` feature this just calls `f`.
#[cfg(feature = "parallel")]
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<R: Send>(_threads: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}
