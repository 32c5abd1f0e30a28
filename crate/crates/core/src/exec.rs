//! Chunked map with a fixed reduction order.
//!
//! Work is split into chunks whose boundaries depend only on the input
//! length and chunk size, never on the thread count. Callers fold the
//! returned per-chunk results in index order, which keeps floating point
//! sums identical between the sequential and parallel paths.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Parallelism {
    #[default]
    Sequential,
    /// Fan out over the rayon pool. Falls back to sequential execution when
    /// the crate is built without the `parallel` feature.
    Parallel,
}

impl Parallelism {
    /// `Parallel` when the crate was built with rayon, `Sequential` otherwise.
    pub fn available() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Parallel
        } else {
            Parallelism::Sequential
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Applies `f` to consecutive chunks of `items`, returning results in chunk order.
pub fn map_chunks<T, R, F>(items: &[T], chunk_size: usize, mode: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync + Send,
{
    let chunk_size = chunk_size.max(1);
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return items
            .par_chunks(chunk_size)
            .enumerate()
            .map(|(i, c)| f(i * chunk_size, c))
            .collect();
    }
    let _ = mode;
    items
        .chunks(chunk_size)
        .enumerate()
        .map(|(i, c)| f(i * chunk_size, c))
        .collect()
}

/// Maps `f` over `0..n`, results in index order.
pub fn map_indices<R, F>(n: usize, mode: Parallelism, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Runs `f` on consecutive mutable chunks of `data`, passing each chunk's index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_size: usize, mode: Parallelism, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_size = chunk_size.max(1);
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        data.par_chunks_mut(chunk_size).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = mode;
    data.chunks_mut(chunk_size).enumerate().for_each(|(i, c)| f(i, c));
}
