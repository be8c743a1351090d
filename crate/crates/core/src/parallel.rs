//! Data-parallel helpers.
//!
//! With the `parallel` feature the closures run on the rayon pool; without it
//! they run sequentially in index order. Results are always collected in index
//! order so reductions done by callers stay deterministic regardless of the
//! number of worker threads.

use std::sync::Once;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "VIEWFORGE_THREADS";

static INIT: Once = Once::new();

/// Configures the global pool from `VIEWFORGE_THREADS`. Safe to call many times.
pub fn init_from_env() {
    INIT.call_once(|| {
        #[cfg(feature = "parallel")]
        if let Some(n) = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            // A pool may already exist if the host program built one.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    });
}

/// Number of worker threads that `map_indexed` may use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Applies `f` to each `chunk`-sized slice of `data` with the chunk index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

/// Sequential counterpart of [`map_indexed`], used by benches and by callers
/// that want a strictly single-threaded path.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn chunks_cover_everything() {
        let mut v = vec![0usize; 37];
        for_each_chunk_mut(&mut v, 5, |ci, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = ci * 5 + j;
            }
        });
        assert_eq!(v, (0..37).collect::<Vec<_>>());
    }
}
