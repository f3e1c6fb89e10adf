//! Worker-pool setup.
//!
//! Parallelism is only ever applied to independent output slices (one task
//! per batch sample or per output channel), so results are bitwise
//! deterministic for any thread count. `SDFN_THREADS` caps the pool size.

use std::sync::OnceLock;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Number of worker threads requested via `SDFN_THREADS`, if set and valid.
fn requested_threads() -> Option<usize> {
    std::env::var("SDFN_THREADS").ok()?.parse::<usize>().ok().filter(|&n| n > 0)
}

/// The shared worker pool, built on first use.
pub fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = requested_threads() {
            builder = builder.num_threads(n);
        }
        builder.build().expect("failed to build worker pool")
    })
}

/// Run `f(i, chunk)` over disjoint equal-size chunks of `data` in parallel.
/// Each chunk is written by exactly one task.
pub fn for_each_chunk_mut<T: Send, F: Fn(usize, &mut [T]) + Sync>(
    data: &mut [T],
    chunk: usize,
    f: F,
) {
    use rayon::prelude::*;
    debug_assert!(chunk > 0 && data.len() % chunk == 0);
    pool().install(|| {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_all_indices() {
        let mut v = vec![0usize; 12];
        for_each_chunk_mut(&mut v, 3, |i, c| {
            for (k, x) in c.iter_mut().enumerate() {
                *x = i * 3 + k;
            }
        });
        assert_eq!(v, (0..12).collect::<Vec<_>>());
    }
}
