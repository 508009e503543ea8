//! Deterministic data-parallel helpers.
//!
//! All batch reductions in the crate go through fixed-size chunking: chunk
//! boundaries never depend on the number of worker threads, per-chunk work
//! is sequential, and partial results are combined in chunk order. The
//! `parallel` feature only changes who executes the chunks, never the
//! floating-point summation order, so parallel and sequential builds produce
//! bit-identical results.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, ArrayView2, ArrayViewMut2, Axis};

/// Row-block size for blocked matrix products.
pub(crate) const GEMM_ROW_BLOCK: usize = 128;

/// Chunk size (in batch rows) for batch sums and means.
pub(crate) const SUM_CHUNK: usize = 64;

#[cfg(feature = "parallel")]
pub(crate) fn run_tasks<T, F>(tasks: Vec<T>, f: F)
where
    T: Send,
    F: Fn(usize, T) + Sync + Send,
{
    use rayon::prelude::*;
    tasks.into_par_iter().enumerate().for_each(|(i, t)| f(i, t));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn run_tasks<T, F>(tasks: Vec<T>, f: F)
where
    F: Fn(usize, T),
{
    tasks.into_iter().enumerate().for_each(|(i, t)| f(i, t));
}

#[cfg(feature = "parallel")]
pub(crate) fn map_tasks<T, U, F>(tasks: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    tasks.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_tasks<T, U, F>(tasks: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    tasks.into_iter().map(f).collect()
}

/// `c <- alpha * a.dot(b) + beta * c`, parallelized over fixed row blocks of
/// `c` (and the matching row blocks of `a`). Each output element is computed
/// by exactly one task, so the result does not depend on scheduling.
pub(crate) fn par_gemm(
    alpha: f64,
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    beta: f64,
    c: &mut ArrayViewMut2<f64>,
) {
    debug_assert_eq!(a.nrows(), c.nrows());
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(b.ncols(), c.ncols());
    let tasks: Vec<(ArrayViewMut2<f64>, ArrayView2<f64>)> = c
        .axis_chunks_iter_mut(Axis(0), GEMM_ROW_BLOCK)
        .zip(a.axis_chunks_iter(Axis(0), GEMM_ROW_BLOCK))
        .collect();
    run_tasks(tasks, |_, (mut cb, ab)| {
        general_mat_mul(alpha, &ab, b, beta, &mut cb);
    });
}

/// Column-wise mean of a batch matrix (rows are samples), accumulated in
/// fixed chunk order.
pub(crate) fn column_mean(x: &ArrayView2<f64>) -> Array1<f64> {
    let n = x.nrows();
    assert!(n > 0, "column_mean of empty batch");
    let chunks: Vec<ArrayView2<f64>> = x.axis_chunks_iter(Axis(0), SUM_CHUNK).collect();
    let partials = map_tasks(chunks, |c| c.sum_axis(Axis(0)));
    let mut acc = Array1::<f64>::zeros(x.ncols());
    for p in partials {
        acc += &p;
    }
    acc / n as f64
}
