//! Data-parallel execution helpers with a sequential fallback.
//!
//! Heavy inner loops (convolution rows, per-voxel field ops, loss
//! reductions, sweep evaluation) are expressed through these helpers. With
//! the `parallel` feature enabled they dispatch to rayon; without it, or
//! after [`set_parallel`]`(false)`, they run sequentially. Work is always
//! partitioned into fixed chunks and partial results are combined in chunk
//! order, so both paths produce bit-identical results — the benches compare
//! their throughput and the tests assert their equality.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enable or disable parallel dispatch at runtime (used by the benches).
pub fn set_parallel(on: bool) {
    PARALLEL.store(on, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Run `f(chunk_index, chunk)` over disjoint mutable chunks of `data`.
pub fn for_each_chunk_mut<T, Func>(data: &mut [T], chunk_len: usize, f: Func)
where
    T: Send,
    Func: Fn(usize, &mut [T]) + Sync,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Map fixed index chunks `[start, end)` of `0..n` and collect the partial
/// results in chunk order.
pub fn map_index_chunks<R, Func>(n: usize, chunk_len: usize, f: Func) -> Vec<R>
where
    R: Send,
    Func: Fn(usize, usize) -> R + Sync,
{
    let chunk_len = chunk_len.max(1);
    let n_chunks = n.div_ceil(chunk_len);
    let bounds = |i: usize| (i * chunk_len, ((i + 1) * chunk_len).min(n));
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return (0..n_chunks)
            .into_par_iter()
            .map(|i| {
                let (s, e) = bounds(i);
                f(s, e)
            })
            .collect();
    }
    (0..n_chunks)
        .map(|i| {
            let (s, e) = bounds(i);
            f(s, e)
        })
        .collect()
}

/// Deterministic sum reduction: per-chunk partial sums in `f64`, combined
/// sequentially in chunk order.
pub fn sum_index_chunks<Func>(n: usize, chunk_len: usize, f: Func) -> f64
where
    Func: Fn(usize, usize) -> f64 + Sync,
{
    map_index_chunks(n, chunk_len, f).into_iter().sum()
}

/// Default chunk length for per-voxel loops.
pub const VOXEL_CHUNK: usize = 4096;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_chunked_sums_agree_bitwise() {
        let data: Vec<f64> = (0..10_000).map(|i| (i as f64).sin()).collect();
        let par = sum_index_chunks(data.len(), 128, |s, e| data[s..e].iter().sum());
        set_parallel(false);
        let seq_chunked = sum_index_chunks(data.len(), 128, |s, e| data[s..e].iter().sum());
        set_parallel(true);
        assert_eq!(par.to_bits(), seq_chunked.to_bits());
    }

    #[test]
    fn chunk_mut_covers_all() {
        let mut v = vec![0u32; 1000];
        for_each_chunk_mut(&mut v, 130, |i, c| {
            for x in c.iter_mut() {
                *x = i as u32 + 1;
            }
        });
        assert!(v.iter().all(|&x| x > 0));
    }
}
