//! Data-parallel driver. Work is always split into disjoint output chunks and
//! each chunk is filled in a fixed sequential order, so the parallel and
//! fallback paths produce bit-identical results.

#[cfg(feature = "parallel")]
pub(crate) fn for_each_chunk<F>(buf: &mut [f32], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Send + Sync,
{
    use rayon::prelude::*;
    buf.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_chunk<F>(buf: &mut [f32], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Send + Sync,
{
    for (i, c) in buf.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}
