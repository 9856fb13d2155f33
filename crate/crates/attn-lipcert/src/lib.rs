//! Local Lipschitz certification for dot-product self-attention.
//!
//! The crate computes three things about an attention head at a concrete
//! input: the exact Jacobian spectral norm (desk-scale brute force), several
//! closed-form upper bounds on it, and the spectral analysis of the softmax
//! Jacobian that makes the tight bound cheap. On top of that sit a
//! spectral-norm regularizer with analytic gradients ([`jasmin`]), a toy
//! training loop demonstrating its effect ([`trainer`]), and seeded sweep
//! drivers ([`sweep`]) used by the CLI and the test suite.
//!
//! With the default `parallel` feature, sweeps fan out over rayon; disabling
//! it yields a sequential build with bit-identical outputs.

pub mod attention;
pub mod bounds;
pub mod error;
pub mod jasmin;
pub mod linalg;
pub mod rng;
pub mod softmax;
pub mod sweep;
pub mod trainer;

pub use error::{Error, Result};

/// Maps an index range through `f`, in parallel when the `parallel` feature
/// is enabled. Results are always in index order, so both paths produce
/// identical output.
pub fn map_indexed<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(f).collect()
    }
}

/// Sequential twin of [`map_indexed`], kept unconditionally so benchmarks can
/// compare the two code paths within one build.
pub fn map_indexed_seq<T, F>(count: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..count).map(f).collect()
}

/// Caps the global rayon pool at `threads`. Must be called before the first
/// parallel operation; later calls fail. A no-op in sequential builds.
#[cfg(feature = "parallel")]
pub fn configure_threads(threads: usize) -> std::result::Result<(), String> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_threads: usize) -> std::result::Result<(), String> {
    Ok(())
}
