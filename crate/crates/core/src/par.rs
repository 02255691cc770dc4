//! Data-parallel fan-out with a deterministic, ordered merge.
//!
//! Per-sample work (forward/backward on independent tapes, decoding) is
//! embarrassingly parallel; results are collected in input order so any
//! later reduction happens in a fixed sequence and stays bit-reproducible
//! regardless of thread count. With the `parallel` feature disabled the
//! same API runs sequentially.

/// Map `f` over `items`, returning results in input order.
#[cfg(feature = "parallel")]
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    map_ordered_seq(items, f)
}

/// Sequential reference path; the benches compare this against `map_ordered`.
pub fn map_ordered_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(usize, &T) -> R,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}
