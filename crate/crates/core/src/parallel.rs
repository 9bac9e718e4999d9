//! Feature-gated data parallelism.
//!
//! Hot loops parallelize over rows (or other disjoint index ranges) through
//! these helpers. With the `parallel` feature the work runs on the rayon
//! pool; without it the same closures run sequentially. Both paths produce
//! bitwise-identical output because every closure writes only its own slot.

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Run `f` on disjoint mutable chunks of `out`, one chunk per index.
/// `chunk` is the chunk length of all but possibly the last chunk.
#[cfg(feature = "parallel")]
pub fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    use rayon::prelude::*;
    out.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Run `f` on disjoint mutable chunks of `out`, one chunk per index.
#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}
