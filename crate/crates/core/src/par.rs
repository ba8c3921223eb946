//! Order-preserving data parallelism with a sequential fallback.
//!
//! With the `parallel` feature (on by default) the mappers fan out over
//! rayon; without it they run sequentially. Either way results come back in
//! input order, and all per-item randomness in this crate is seeded from
//! (master seed, stable label) rather than from scheduling, so outputs are
//! bit-identical across thread counts and across the two build modes.

use crate::error::Result;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential twin of [`map_indexed`], kept available in every build so
/// benches can compare the two paths directly.
pub fn map_indexed_serial<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

/// Map over a slice in index order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Fallible map over a slice; the first error (by input order) wins.
pub fn try_map_slice<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    let results: Vec<Result<R>> = map_slice(items, f);
    results.into_iter().collect()
}

/// Number of fixed gradient-accumulation chunks. Batch gradients are summed
/// chunk by chunk in a fixed order so the floating-point reduction tree does
/// not depend on thread count.
pub const GRAD_CHUNKS: usize = 8;

/// Split `0..n` into at most [`GRAD_CHUNKS`] contiguous ranges of equal
/// ceiling size. The decomposition depends only on `n`.
pub fn fixed_chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let chunk = n.div_ceil(GRAD_CHUNKS);
    (0..n.div_ceil(chunk))
        .map(|i| i * chunk..((i + 1) * chunk).min(n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let out = map_indexed(100, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
        assert_eq!(out, map_indexed_serial(100, |i| i * i));
    }

    #[test]
    fn chunks_cover_range_in_order() {
        for n in [0usize, 1, 7, 8, 9, 63, 64, 65, 1000] {
            let chunks = fixed_chunks(n);
            let mut covered = Vec::new();
            for c in &chunks {
                covered.extend(c.clone());
            }
            assert_eq!(covered, (0..n).collect::<Vec<_>>(), "n={n}");
            assert!(chunks.len() <= GRAD_CHUNKS);
        }
    }
}
