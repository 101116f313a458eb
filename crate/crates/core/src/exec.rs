//! Execution facade for the per-problem data-parallel loops.
//!
//! With the default `parallel` feature, [`par_map`] fans work out over rayon;
//! without it, it degrades to [`seq_map`]. Both preserve input order, so a
//! pipeline produces identical results either way. The criterion bench suite
//! compares the two paths on the same workloads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, in parallel when the `parallel` feature is on.
/// Output order matches input order.
pub fn par_map<I, R, F>(items: Vec<I>, f: F) -> Vec<R>
where
    I: Send,
    R: Send,
    F: Fn(I) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq_map(items, f)
    }
}

/// Sequential reference path; always available for benchmarking against.
pub fn seq_map<I, R, F>(items: Vec<I>, f: F) -> Vec<R>
where
    F: Fn(I) -> R,
{
    items.into_iter().map(f).collect()
}
