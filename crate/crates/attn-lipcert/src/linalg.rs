//! Dense matrix primitives sized for certification workloads: a few hundred
//! rows at most, everything in f64, correctness and determinism over speed.
//!
//! Spectral norms come from power iteration on `mᵀm` with a seeded start
//! vector, full symmetric spectra from a cyclic Jacobi eigensolver, and
//! reference Jacobians from central finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::unit_sphere_vector;

/// Row-major dense matrix. Constructors reject non-finite entries, so a
/// `Matrix` always holds finite data.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::from_vec",
                format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            ));
        }
        if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Domain {
                op: "Matrix::from_vec",
                details: format!("entry {bad} is not finite"),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("Matrix::from_rows", "ragged rows".to_string()));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    /// Internal constructor for arithmetic results already known to be finite
    /// combinations of finite inputs.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::from_parts(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "Matrix::matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in arow.iter().enumerate() {
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::dim(
                "Matrix::matvec",
                format!("{}x{} times vector of length {}", self.rows, self.cols, v.len()),
            ));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix::from_parts(self.rows, self.cols, self.data.iter().map(|x| x * c).collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "Matrix::add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "Matrix::sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim(
                op,
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix::from_parts(self.rows, self.cols, data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.data[i * self.cols + i]).sum()
    }

    /// Assembles a block matrix from a rectangular grid. Blocks in the same
    /// grid row must agree on height, blocks in the same grid column on width.
    pub fn from_blocks(grid: &[Vec<Matrix>]) -> Result<Matrix> {
        if grid.is_empty() || grid[0].is_empty() {
            return Err(Error::dim("Matrix::from_blocks", "empty grid".to_string()));
        }
        let block_cols = grid[0].len();
        if grid.iter().any(|r| r.len() != block_cols) {
            return Err(Error::dim("Matrix::from_blocks", "ragged grid".to_string()));
        }
        let heights: Vec<usize> = grid.iter().map(|r| r[0].rows).collect();
        let widths: Vec<usize> = grid[0].iter().map(|b| b.cols).collect();
        for (bi, row) in grid.iter().enumerate() {
            for (bj, block) in row.iter().enumerate() {
                if block.rows != heights[bi] || block.cols != widths[bj] {
                    return Err(Error::dim(
                        "Matrix::from_blocks",
                        format!(
                            "block ({bi},{bj}) is {}x{}, expected {}x{}",
                            block.rows, block.cols, heights[bi], widths[bj]
                        ),
                    ));
                }
            }
        }
        let total_rows: usize = heights.iter().sum();
        let total_cols: usize = widths.iter().sum();
        let mut out = Matrix::zeros(total_rows, total_cols);
        let mut row_off = 0;
        for (bi, row) in grid.iter().enumerate() {
            let mut col_off = 0;
            for block in row {
                for i in 0..block.rows {
                    let src = block.row(i);
                    let dst_start = (row_off + i) * total_cols + col_off;
                    out.data[dst_start..dst_start + block.cols].copy_from_slice(src);
                }
                col_off += block.cols;
            }
            row_off += heights[bi];
        }
        Ok(out)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of {}x{}", self.rows, self.cols);
        &self.data[i * self.cols + j]
    }
}

/// Knobs for power iteration. `tol` is the relative-change threshold on the
/// Rayleigh estimate of the dominant eigenvalue of `mᵀm`; `seed` fixes the
/// start vector so results are bit-reproducible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIterationConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerIterationConfig {
    fn default() -> Self {
        PowerIterationConfig {
            tol: 1e-10,
            max_iter: 10_000,
            seed: 0,
        }
    }
}

/// Outcome of a spectral-norm estimate. `residual` is the relative change of
/// the Rayleigh estimate at the final iteration, so `converged` implies
/// `residual <= tol`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpectralResult {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Largest singular value of `m`, via power iteration on the Gram matrix
/// `mᵀm` with a start vector drawn uniformly from the unit sphere.
///
/// Deterministic: identical `(m, cfg)` gives a bit-identical result.
pub fn spectral_norm(m: &Matrix, cfg: &PowerIterationConfig) -> Result<SpectralResult> {
    if m.is_empty() {
        return Err(Error::dim("spectral_norm", "empty matrix".to_string()));
    }
    if !(cfg.tol > 0.0 && cfg.tol.is_finite()) {
        return Err(Error::domain("spectral_norm", format!("tol = {} must be positive", cfg.tol)));
    }
    if cfg.max_iter == 0 {
        return Err(Error::domain("spectral_norm", "max_iter must be at least 1"));
    }
    let gram = m.transpose().matmul(m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v = unit_sphere_vector(&mut rng, m.cols());
    let mut prev: Option<f64> = None;
    let mut lambda = 0.0;
    let mut rel = f64::INFINITY;
    for iter in 1..=cfg.max_iter {
        let w = gram.matvec(&v)?;
        lambda = dot(&v, &w);
        let wnorm = norm2(&w);
        if wnorm == 0.0 {
            // v is in the null space of mᵀm; for a Gram matrix that means
            // the Rayleigh quotient is exactly the eigenvalue 0.
            return Ok(SpectralResult {
                value: 0.0,
                iterations: iter,
                converged: true,
                residual: 0.0,
            });
        }
        if let Some(p) = prev {
            rel = (lambda - p).abs() / lambda.abs().max(f64::MIN_POSITIVE);
            if rel <= cfg.tol {
                return Ok(SpectralResult {
                    value: lambda.max(0.0).sqrt(),
                    iterations: iter,
                    converged: true,
                    residual: rel,
                });
            }
        }
        prev = Some(lambda);
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / wnorm;
        }
    }
    Ok(SpectralResult {
        value: lambda.max(0.0).sqrt(),
        iterations: cfg.max_iter,
        converged: false,
        residual: rel,
    })
}

/// Spectral norm of a block matrix assembled from `grid`.
pub fn block_spectral_norm(grid: &[Vec<Matrix>], cfg: &PowerIterationConfig) -> Result<SpectralResult> {
    spectral_norm(&Matrix::from_blocks(grid)?, cfg)
}

const JACOBI_MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-12;

/// All eigenvalues of a symmetric matrix, sorted descending, via cyclic
/// Jacobi rotations. Sweeps continue until the off-diagonal Frobenius norm
/// drops below `1e-13 * ‖m‖_F`.
///
/// Rejects matrices whose asymmetry exceeds `1e-12` entrywise.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    if m.rows() != m.cols() || m.is_empty() {
        return Err(Error::dim(
            "symmetric_eigenvalues",
            format!("{}x{} (need square, non-empty)", m.rows(), m.cols()),
        ));
    }
    let n = m.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            let delta = (m[(i, j)] - m[(j, i)]).abs();
            if delta > SYMMETRY_TOL {
                return Err(Error::Asymmetric { i, j, delta });
            }
        }
    }
    let threshold = 1e-13 * m.frobenius_norm();
    let mut a = m.clone();
    let mut d: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    // Accumulator pair in the style of the classic algorithm: rotations
    // update `d` immediately, while `b`+`z` re-derive it once per sweep to
    // keep rounding error from piling up across many rotations.
    let mut b = d.clone();
    let mut z = vec![0.0; n];

    let off = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += a[(p, q)] * a[(p, q)];
            }
        }
        (2.0 * s).sqrt()
    };

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if off(&a) <= threshold {
            d.sort_by(|x, y| y.partial_cmp(x).expect("eigenvalues are finite"));
            return Ok(d);
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (d[q] - d[p]) / (2.0 * apq);
                // tan of the rotation angle; the alternate form guards
                // against overflow in theta^2.
                let t = if theta.abs() > 1e150 {
                    1.0 / (2.0 * theta)
                } else if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                let h = t * apq;
                z[p] -= h;
                z[q] += h;
                d[p] -= h;
                d[q] += h;
                a.set(p, q, 0.0);
                let rotate = |a: &mut Matrix, i1: usize, j1: usize, i2: usize, j2: usize| {
                    let g = a[(i1, j1)];
                    let hh = a[(i2, j2)];
                    a.set(i1, j1, g - s * (hh + g * tau));
                    a.set(i2, j2, hh + s * (g - hh * tau));
                };
                for j in 0..p {
                    rotate(&mut a, j, p, j, q);
                }
                for j in (p + 1)..q {
                    rotate(&mut a, p, j, j, q);
                }
                for j in (q + 1)..n {
                    rotate(&mut a, p, j, q, j);
                }
            }
        }
        for i in 0..n {
            b[i] += z[i];
            d[i] = b[i];
            z[i] = 0.0;
        }
    }
    Err(Error::domain(
        "symmetric_eigenvalues",
        format!("no convergence within {JACOBI_MAX_SWEEPS} sweeps"),
    ))
}

/// Jacobian of `f` at `x0` by central differences: column `j` is
/// `(f(x0 + h e_j) - f(x0 - h e_j)) / (2h)`.
///
/// `f` must return vectors of one fixed length; non-finite outputs are
/// rejected so silent NaN propagation cannot masquerade as a derivative.
pub fn finite_difference_jacobian<F>(f: F, x0: &[f64], h: f64) -> Result<Matrix>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if x0.is_empty() {
        return Err(Error::dim("finite_difference_jacobian", "empty input point".to_string()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::domain("finite_difference_jacobian", format!("step h = {h} must be positive")));
    }
    let check = |y: &[f64]| -> Result<()> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "finite_difference_jacobian",
            });
        }
        Ok(())
    };
    let base = f(x0);
    check(&base)?;
    let out_dim = base.len();
    if out_dim == 0 {
        return Err(Error::dim("finite_difference_jacobian", "f returned an empty vector".to_string()));
    }
    let mut jac = Matrix::zeros(out_dim, x0.len());
    let mut xp = x0.to_vec();
    let mut xm = x0.to_vec();
    for j in 0..x0.len() {
        xp[j] = x0[j] + h;
        xm[j] = x0[j] - h;
        let fp = f(&xp);
        let fm = f(&xm);
        check(&fp)?;
        check(&fm)?;
        if fp.len() != out_dim || fm.len() != out_dim {
            return Err(Error::dim(
                "finite_difference_jacobian",
                format!("f output length changed from {out_dim} to {}", fp.len().max(fm.len())),
            ));
        }
        for i in 0..out_dim {
            jac.set(i, j, (fp[i] - fm[i]) / (2.0 * h));
        }
        xp[j] = x0[j];
        xm[j] = x0[j];
    }
    Ok(jac)
}
