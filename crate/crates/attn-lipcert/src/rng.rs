//! Seeded randomness.
//!
//! Every random quantity in the crate flows from a single `u64` seed through
//! ChaCha8, a counter-based stream cipher RNG with a stable specification.
//! Sweeps derive one independent substream per instance (`set_stream`), which
//! keeps results bit-identical no matter how work is split across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::linalg::Matrix;

/// Root RNG for a given seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream `stream` of the root RNG for `seed`.
///
/// Used by sweeps so instance `i` sees the same draws whether instances are
/// processed sequentially or in parallel.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Matrix with i.i.d. standard normal entries.
pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("gaussian entries are finite")
}

/// Point drawn uniformly from the unit sphere in `R^n` (normalized Gaussian).
pub fn unit_sphere_vector<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // Zero norm has probability zero but would poison everything downstream.
        if norm > 1e-100 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Point drawn uniformly from the probability simplex in `R^n`
/// (normalized i.i.d. Exp(1) draws, a.k.a. Dirichlet(1,...,1)).
pub fn uniform_simplex_point<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| rng.sample(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}
