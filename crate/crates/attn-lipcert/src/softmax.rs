//! Softmax outputs and the spectrum of their Jacobian.
//!
//! The softmax Jacobian at a probability vector `p` is `diag(p) - ppᵀ`:
//! symmetric, positive semidefinite, zero row sums. Its singular values are
//! sandwiched between the sorted entries of `p` and the sequence
//! `g_k = x_(k) (1 - x_(k) + x_(k+1))`, which is what makes cheap spectral
//! certificates possible. Everything here works on explicit probability
//! vectors; no logits are kept around.

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigenvalues, Matrix};

/// Tolerance on `|sum - 1|` when accepting a probability vector.
pub const SIMPLEX_SUM_TOL: f64 = 1e-12;

/// A validated point on the probability simplex: non-negative entries that
/// sum to 1 within [`SIMPLEX_SUM_TOL`]. Vectors failing that are rejected,
/// never silently renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector {
    probs: Vec<f64>,
}

impl SimplexVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::dim("SimplexVector::new", "empty vector".to_string()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::domain(
                    "SimplexVector::new",
                    format!("entry {i} = {p} is not a probability"),
                ));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::domain(
                "SimplexVector::new",
                format!("entries sum to {sum}, off by {:e}", (sum - 1.0).abs()),
            ));
        }
        Ok(SimplexVector { probs })
    }

    /// For rows that were just produced by [`softmax`] and are in-tolerance
    /// by construction.
    pub(crate) fn new_unchecked(probs: Vec<f64>) -> Self {
        SimplexVector { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Entries sorted descending (the order statistics `x_(1) >= ... >= x_(n)`).
    /// Ties keep their original relative order, which makes downstream
    /// subgradient choices reproducible.
    pub fn sorted_desc(&self) -> Vec<f64> {
        let mut s = self.probs.clone();
        s.sort_by(|a, b| b.partial_cmp(a).expect("validated entries are finite"));
        s
    }

    /// Indices that sort the entries descending (stable in the original
    /// index order on ties).
    pub fn sort_permutation(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        idx.sort_by(|&a, &b| {
            self.probs[b]
                .partial_cmp(&self.probs[a])
                .expect("validated entries are finite")
        });
        idx
    }
}

/// Numerically stable softmax (max-subtraction before exponentiation).
pub fn softmax(z: &[f64]) -> Result<SimplexVector> {
    if z.is_empty() {
        return Err(Error::dim("softmax", "empty logit vector".to_string()));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(SimplexVector::new_unchecked(exps.into_iter().map(|e| e / sum).collect()))
}

/// The softmax Jacobian `diag(p) - ppᵀ` as an explicit symmetric matrix.
pub fn softmax_jacobian(p: &SimplexVector) -> Matrix {
    let n = p.len();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = if i == j { p.probs[i] } else { 0.0 };
            m.set(i, j, d - p.probs[i] * p.probs[j]);
        }
    }
    m
}

/// `g_k(p) = x_(k) (1 - x_(k) + x_(k+1))` on the sorted entries, with the
/// convention `x_(n+1) = 0` so that `g_n = x_(n)(1 - x_(n))`. `k` is 1-based.
pub fn g_k(p: &SimplexVector, k: usize) -> Result<f64> {
    let n = p.len();
    if k == 0 || k > n {
        return Err(Error::Index {
            op: "g_k",
            details: format!("k = {k} outside 1..={n}"),
        });
    }
    let sorted = p.sorted_desc();
    Ok(g_from_sorted(&sorted, k))
}

/// All of `g_1..g_n` from one sort.
pub fn g_values(p: &SimplexVector) -> Vec<f64> {
    let sorted = p.sorted_desc();
    (1..=p.len()).map(|k| g_from_sorted(&sorted, k)).collect()
}

fn g_from_sorted(sorted: &[f64], k: usize) -> f64 {
    let xk = sorted[k - 1];
    let xk1 = if k < sorted.len() { sorted[k] } else { 0.0 };
    xk * (1.0 - xk + xk1)
}

/// Cheap upper bound on the softmax-Jacobian spectral norm: `g_1(p)`, which
/// never exceeds 1/2.
pub fn softmax_jacobian_norm_upper(p: &SimplexVector) -> f64 {
    let sorted = p.sorted_desc();
    g_from_sorted(&sorted, 1)
}

/// Top eigenvalue (= spectral norm, the matrix being PSD) of the softmax
/// Jacobian by matrix-free power iteration: `Jv = p ⊙ v - p (pᵀv)` costs
/// O(n) per step, so rows of long sequences stay cheap where a full
/// eigendecomposition would not.
pub fn softmax_jacobian_top_eigenvalue(
    p: &SimplexVector,
    cfg: &crate::linalg::PowerIterationConfig,
) -> crate::linalg::SpectralResult {
    let probs = p.probs();
    let n = probs.len();
    let mut rng = crate::rng::seeded(cfg.seed);
    let mut v = crate::rng::unit_sphere_vector(&mut rng, n);
    let apply = |v: &[f64]| -> Vec<f64> {
        let dot: f64 = probs.iter().zip(v).map(|(a, b)| a * b).sum();
        probs.iter().zip(v).map(|(pi, vi)| pi * (vi - dot)).collect()
    };
    let mut lambda = 0.0f64;
    let mut previous = f64::INFINITY;
    for iter in 1..=cfg.max_iter {
        let w = apply(&v);
        lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let wnorm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wnorm == 0.0 {
            return crate::linalg::SpectralResult {
                value: 0.0,
                iterations: iter,
                converged: true,
                residual: 0.0,
            };
        }
        let rel = (lambda - previous).abs() / lambda.abs().max(f64::MIN_POSITIVE);
        if rel <= cfg.tol {
            return crate::linalg::SpectralResult {
                value: lambda.max(0.0),
                iterations: iter,
                converged: true,
                residual: rel,
            };
        }
        previous = lambda;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / wnorm;
        }
    }
    crate::linalg::SpectralResult {
        value: lambda.max(0.0),
        iterations: cfg.max_iter,
        converged: false,
        residual: (lambda - previous).abs() / lambda.abs().max(f64::MIN_POSITIVE),
    }
}

/// The three interlaced sequences for one probability vector: sorted entries,
/// `g` values, and the exact singular values of `diag(p) - ppᵀ`.
#[derive(Debug, Clone)]
pub struct InterlacingSandwich {
    pub sorted_probs: Vec<f64>,
    pub g: Vec<f64>,
    pub singular_values: Vec<f64>,
}

impl InterlacingSandwich {
    /// Largest slack violation of the chain
    /// `x_(1) >= g_1 >= s_1 >= x_(2) >= g_2 >= s_2 >= ... >= x_(n) >= g_n >= s_n`,
    /// as a non-negative number (0 means the chain holds exactly).
    pub fn max_violation(&self) -> f64 {
        let n = self.sorted_probs.len();
        let mut worst: f64 = 0.0;
        let mut prev = f64::INFINITY;
        for k in 0..n {
            for &next in &[self.sorted_probs[k], self.g[k], self.singular_values[k]] {
                worst = worst.max(next - prev);
                prev = next;
            }
        }
        worst
    }

    pub fn holds_within(&self, slack: f64) -> bool {
        self.max_violation() <= slack
    }
}

/// Computes the full interlacing sandwich for `p` (needs `n >= 2`; the
/// single-point simplex has a 0x0-like degenerate spectrum of one zero and
/// nothing to interlace).
pub fn interlacing_sandwich(p: &SimplexVector) -> Result<InterlacingSandwich> {
    let n = p.len();
    if n < 2 {
        return Err(Error::dim(
            "interlacing_sandwich",
            format!("need n >= 2, got {n}"),
        ));
    }
    let sorted_probs = p.sorted_desc();
    let g = (1..=n).map(|k| g_from_sorted(&sorted_probs, k)).collect();
    // diag(p) - ppᵀ is PSD, so its eigenvalues (descending) are its singular
    // values up to eigensolver round-off in the last one.
    let singular_values = symmetric_eigenvalues(&softmax_jacobian(p))?;
    Ok(InterlacingSandwich {
        sorted_probs,
        g,
        singular_values,
    })
}

/// The two roots of `x(1-x) = gamma` for `0 < gamma <= 1/4`.
///
/// Whenever `g_1(p) <= gamma`, the largest entry `x_(1)` cannot lie strictly
/// between these roots: driving `g_1` low forces the top probability to
/// either the near-uniform or the near-categorical side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BifurcationThresholds {
    pub lower: f64,
    pub upper: f64,
}

pub fn bifurcation_thresholds(gamma: f64) -> Result<BifurcationThresholds> {
    if !(gamma > 0.0 && gamma <= 0.25) {
        return Err(Error::domain(
            "bifurcation_thresholds",
            format!("gamma = {gamma} outside (0, 1/4]"),
        ));
    }
    let root = (1.0 - 4.0 * gamma).sqrt();
    Ok(BifurcationThresholds {
        lower: (1.0 - root) / 2.0,
        upper: (1.0 + root) / 2.0,
    })
}

/// Spectral-norm bound `(1 - sqrt(1 - 4 gamma / k)) / 2` available when the
/// top-ratio constraint `g_1 / g_k <= gamma` holds with `1 <= gamma <= k/4`.
pub fn ratio_constrained_norm_bound(gamma: f64, k: usize) -> Result<f64> {
    if !(gamma.is_finite() && gamma >= 1.0) {
        return Err(Error::domain(
            "ratio_constrained_norm_bound",
            format!("gamma = {gamma} must be >= 1"),
        ));
    }
    if gamma > k as f64 / 4.0 {
        return Err(Error::domain(
            "ratio_constrained_norm_bound",
            format!("gamma = {gamma} exceeds k/4 = {}", k as f64 / 4.0),
        ));
    }
    Ok((1.0 - (1.0 - 4.0 * gamma / k as f64).sqrt()) / 2.0)
}
