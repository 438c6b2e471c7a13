//! Execution helper: an indexed map that runs data-parallel when the
//! `parallel` feature is enabled and sequentially otherwise.
//!
//! Results are always collected in index order and reduced sequentially by
//! the caller, so the two builds produce bit-identical floating-point
//! results.

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
