//! Parametric kernelized gradient flows for MMD GANs.
//!
//! The crate implements a finite-dimensional RKHS built from a fixed random
//! feature map, the parametric operators coupling an MLP generator to that
//! RKHS, the gradient-regularized discrepancy `MMD_{alpha,beta}` with its
//! witness solves, exact-solve discrete gradient flows with convergence
//! diagnostics, gradient flows of general functionals under the induced
//! Riemannian structure, and the stochastic min-max training loop with a
//! generator-parameter gradient penalty.
//!
//! Batch evaluations are data-parallel (rayon) behind the default `parallel`
//! feature; disabling it yields a sequential build with bit-identical
//! results. All randomness is driven by explicit seeds.

pub mod discrepancy;
pub mod error;
pub mod flow;
pub mod generator;
pub mod io;
pub mod linalg;
pub mod operators;
pub(crate) mod par;
pub mod rkhs;
pub mod targets;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

/// Cap the size of the internal worker pool. A no-op without the
/// `parallel` feature or after the pool has started.
pub fn configure_threads(n: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}
