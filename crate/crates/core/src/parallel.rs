//! Deterministic data-parallel helpers.
//!
//! Every helper maps independent work items to an output vector in input
//! order, so the result is identical whether it runs on the rayon pool or on
//! the sequential fallback. Floating-point reductions must go through
//! per-item partial results and a sequential final combine; nothing here
//! exposes an unordered reduce.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub(crate) fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync,
{
    (0..n).map(f).collect()
}

/// Maps `f` over fixed-size chunks of `data` (last chunk may be short),
/// collecting per-chunk results in chunk order.
#[cfg(feature = "parallel")]
pub(crate) fn map_chunks<T, U, F>(data: &[T], chunk: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&[T]) -> U + Sync + Send,
{
    data.par_chunks(chunk).map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_chunks<T, U, F>(data: &[T], chunk: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&[T]) -> U + Sync,
{
    data.chunks(chunk).map(f).collect()
}
