//! Single-head dot-product self-attention and its exact input Jacobian.
//!
//! Conventions, fixed once here and relied on everywhere else:
//!
//! * a sequence is a matrix `X` with one token per row (`N x D`);
//! * a head holds `W_Q, W_K, W_V`, each `D x d`, plus optional biases in `R^d`;
//! * logits are `(X W_Q + 1 b_Qᵀ)(X W_K + 1 b_Kᵀ)ᵀ / sqrt(d)`, the map `P` is
//!   their row-wise softmax, the output is `P (X W_V + 1 b_Vᵀ)`;
//! * flattening is row-major over tokens: token `i` of the output occupies
//!   rows `i*d..(i+1)*d` of the Jacobian, token `j` of the input occupies
//!   columns `j*D..(j+1)*D`.
//!
//! Biases are handled by absorption: append a constant-1 column to `X` and the
//! bias row to each weight matrix, which reproduces the biased forward pass
//! exactly. The Jacobian of the biased map is the augmented Jacobian with the
//! constant column's derivatives dropped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, Matrix, PowerIterationConfig, SpectralResult};
use crate::softmax::{softmax, softmax_jacobian, SimplexVector};

/// Ceiling on `rows * cols` of a densely assembled attention Jacobian.
/// Requests above it get a capacity error instead of an allocation attempt.
pub const DENSE_JACOBIAN_MAX_ENTRIES: usize = 40_000_000;

/// Tolerance when checking declared input radii against row norms.
pub const RADIUS_SLACK: f64 = 1e-9;

/// Query/key/value projections of one attention head (`D x d` each), with
/// optional per-projection biases of length `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeadWeights {
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
    bias_q: Option<Vec<f64>>,
    bias_k: Option<Vec<f64>>,
    bias_v: Option<Vec<f64>>,
}

impl AttentionHeadWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        Self::with_biases(w_q, w_k, w_v, None, None, None)
    }

    pub fn with_biases(
        w_q: Matrix,
        w_k: Matrix,
        w_v: Matrix,
        bias_q: Option<Vec<f64>>,
        bias_k: Option<Vec<f64>>,
        bias_v: Option<Vec<f64>>,
    ) -> Result<Self> {
        let (dd, hd) = (w_q.rows(), w_q.cols());
        if dd == 0 || hd == 0 {
            return Err(Error::dim("AttentionHeadWeights", "zero-sized projection".to_string()));
        }
        for (name, m) in [("w_k", &w_k), ("w_v", &w_v)] {
            if m.rows() != dd || m.cols() != hd {
                return Err(Error::dim(
                    "AttentionHeadWeights",
                    format!("{name} is {}x{}, expected {dd}x{hd}", m.rows(), m.cols()),
                ));
            }
        }
        for (name, b) in [("bias_q", &bias_q), ("bias_k", &bias_k), ("bias_v", &bias_v)] {
            if let Some(b) = b {
                if b.len() != hd {
                    return Err(Error::dim(
                        "AttentionHeadWeights",
                        format!("{name} has length {}, expected {hd}", b.len()),
                    ));
                }
                if b.iter().any(|x| !x.is_finite()) {
                    return Err(Error::domain("AttentionHeadWeights", format!("{name} has a non-finite entry")));
                }
            }
        }
        Ok(AttentionHeadWeights {
            w_q,
            w_k,
            w_v,
            bias_q,
            bias_k,
            bias_v,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn w_q(&self) -> &Matrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &Matrix {
        &self.w_k
    }

    pub fn w_v(&self) -> &Matrix {
        &self.w_v
    }

    pub fn biases(&self) -> (Option<&[f64]>, Option<&[f64]>, Option<&[f64]>) {
        (self.bias_q.as_deref(), self.bias_k.as_deref(), self.bias_v.as_deref())
    }

    pub fn has_biases(&self) -> bool {
        self.bias_q.is_some() || self.bias_k.is_some() || self.bias_v.is_some()
    }

    /// The combined logit matrix `A = W_Q W_Kᵀ / sqrt(d)` (`D x D`).
    pub fn attention_matrix(&self) -> Matrix {
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        self.w_q
            .matmul(&self.w_k.transpose())
            .expect("projections share shape")
            .scale(scale)
    }

    /// Bias-free head over the augmented space: each projection gains one
    /// final row holding its bias (zeros when absent). Pairs with appending a
    /// constant-1 column to the input; see [`absorb_biases`].
    pub fn absorbed(&self) -> AttentionHeadWeights {
        let (dd, hd) = (self.model_dim(), self.head_dim());
        let augment = |m: &Matrix, bias: &Option<Vec<f64>>| -> Matrix {
            let mut out = Matrix::zeros(dd + 1, hd);
            for i in 0..dd {
                for j in 0..hd {
                    out.set(i, j, m[(i, j)]);
                }
            }
            if let Some(b) = bias {
                for (j, &bj) in b.iter().enumerate() {
                    out.set(dd, j, bj);
                }
            }
            out
        };
        AttentionHeadWeights {
            w_q: augment(&self.w_q, &self.bias_q),
            w_k: augment(&self.w_k, &self.bias_k),
            w_v: augment(&self.w_v, &self.bias_v),
            bias_q: None,
            bias_k: None,
            bias_v: None,
        }
    }
}

/// Token sequence, optionally with a declared bound on row norms. A declared
/// radius must actually cover every row (within [`RADIUS_SLACK`]).
#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    x: Matrix,
    radius: Option<f64>,
}

impl InputSequence {
    pub fn new(x: Matrix) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::dim("InputSequence", "empty sequence".to_string()));
        }
        Ok(InputSequence { x, radius: None })
    }

    pub fn with_radius(x: Matrix, radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius >= 0.0) {
            return Err(Error::domain("InputSequence", format!("radius = {radius} must be non-negative")));
        }
        let seq = InputSequence::new(x)?;
        let max_norm = seq.max_row_norm();
        if max_norm > radius + RADIUS_SLACK {
            return Err(Error::domain(
                "InputSequence",
                format!("row norm {max_norm} exceeds declared radius {radius}"),
            ));
        }
        Ok(InputSequence {
            radius: Some(radius),
            ..seq
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.x
    }

    pub fn seq_len(&self) -> usize {
        self.x.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn declared_radius(&self) -> Option<f64> {
        self.radius
    }

    pub fn max_row_norm(&self) -> f64 {
        (0..self.x.rows())
            .map(|i| self.x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Declared radius if present, otherwise the tightest one (max row norm).
    pub fn effective_radius(&self) -> f64 {
        self.radius.unwrap_or_else(|| self.max_row_norm())
    }
}

/// Row-stochastic attention map: each row is a probability vector. Row sums
/// may drift from 1 by at most 1e-10 (softmax keeps them far tighter).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    p: Matrix,
}

pub const MAP_ROW_SUM_TOL: f64 = 1e-10;

impl AttentionMap {
    pub fn new(p: Matrix) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::dim("AttentionMap", "empty map".to_string()));
        }
        for i in 0..p.rows() {
            let mut sum = 0.0;
            for &v in p.row(i) {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::domain("AttentionMap", format!("row {i} has entry {v}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > MAP_ROW_SUM_TOL {
                return Err(Error::domain(
                    "AttentionMap",
                    format!("row {i} sums to {sum}"),
                ));
            }
        }
        Ok(AttentionMap { p })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.p
    }

    pub fn seq_len(&self) -> usize {
        self.p.rows()
    }

    /// Row `i` as a simplex vector (validated when the map was built).
    pub fn row_simplex(&self, i: usize) -> SimplexVector {
        SimplexVector::new_unchecked(self.p.row(i).to_vec())
    }
}

fn projected(x: &Matrix, w: &Matrix, bias: Option<&[f64]>) -> Matrix {
    let mut out = x.matmul(w).expect("dimensions checked by caller");
    if let Some(b) = bias {
        for i in 0..out.rows() {
            for (j, &bj) in b.iter().enumerate() {
                let v = out[(i, j)] + bj;
                out.set(i, j, v);
            }
        }
    }
    out
}

fn check_dims(x: &InputSequence, w: &AttentionHeadWeights, op: &'static str) -> Result<()> {
    if x.model_dim() != w.model_dim() {
        return Err(Error::dim(
            op,
            format!("input dim {} vs weight dim {}", x.model_dim(), w.model_dim()),
        ));
    }
    Ok(())
}

/// Full forward pass of one head: returns the output sequence (`N x d`) and
/// the attention map (`N x N`).
pub fn attention_forward(x: &InputSequence, w: &AttentionHeadWeights) -> Result<(Matrix, AttentionMap)> {
    check_dims(x, w, "attention_forward")?;
    let q = projected(x.matrix(), w.w_q(), w.bias_q.as_deref());
    let k = projected(x.matrix(), w.w_k(), w.bias_k.as_deref());
    let v = projected(x.matrix(), w.w_v(), w.bias_v.as_deref());
    let scale = 1.0 / (w.head_dim() as f64).sqrt();
    let logits = q.matmul(&k.transpose())?.scale(scale);
    if logits.data().iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite {
            op: "attention_forward",
        });
    }
    let n = logits.rows();
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        let row = softmax(logits.row(i))?;
        for (j, &pij) in row.probs().iter().enumerate() {
            p.set(i, j, pij);
        }
    }
    let map = AttentionMap::new(p)?;
    let out = map.matrix().matmul(&v)?;
    Ok((out, map))
}

/// Rewrites a biased head over `X` as an unbiased head over `[X | 1]`:
/// appends a constant-1 column to the input and the bias row (zeros when a
/// bias is absent) to each projection. The forward pass is unchanged; a
/// declared radius `R` becomes `sqrt(R^2 + 1)`.
pub fn absorb_biases(x: &InputSequence, w: &AttentionHeadWeights) -> Result<(InputSequence, AttentionHeadWeights)> {
    check_dims(x, w, "absorb_biases")?;
    let (n, dd) = (x.seq_len(), x.model_dim());
    let mut xa = Matrix::zeros(n, dd + 1);
    for i in 0..n {
        for j in 0..dd {
            xa.set(i, j, x.matrix()[(i, j)]);
        }
        xa.set(i, dd, 1.0);
    }
    let weights = w.absorbed();
    let input = match x.declared_radius() {
        Some(r) => InputSequence::with_radius(xa, (r * r + 1.0).sqrt())?,
        None => InputSequence::new(xa)?,
    };
    Ok((input, weights))
}

/// Exact Jacobian of the head as one dense `(N d) x (N D)` matrix in the
/// row-major token layout described at the top of this module.
///
/// Block `(i, j)` is
/// `W_Vᵀ Xᵀ S_i (E_{ji} X A + δ_{ij} X Aᵀ) + P_{ij} W_Vᵀ`,
/// where `S_i = diag(P_{i,:}) - P_{i,:} P_{i,:}ᵀ` and `A = W_Q W_Kᵀ / sqrt(d)`.
/// The placement of the transposes on `A` is the one validated against
/// central finite differences (see the tests), not taken on faith.
pub fn exact_attention_jacobian(x: &InputSequence, w: &AttentionHeadWeights) -> Result<Matrix> {
    check_dims(x, w, "exact_attention_jacobian")?;
    if w.has_biases() {
        // Differentiate the absorbed head and drop the constant column's
        // derivatives: d/dx of f([x | 1]) is the first D columns per block.
        let (xa, wa) = absorb_biases(x, w)?;
        let jac_aug = exact_attention_jacobian(&xa, &wa)?;
        let (n, dd, hd) = (x.seq_len(), x.model_dim(), w.head_dim());
        let mut jac = Matrix::zeros(n * hd, n * dd);
        for bi in 0..n * hd {
            for j in 0..n {
                for b in 0..dd {
                    jac.set(bi, j * dd + b, jac_aug[(bi, j * (dd + 1) + b)]);
                }
            }
        }
        return Ok(jac);
    }

    let (n, dd, hd) = (x.seq_len(), x.model_dim(), w.head_dim());
    let entries = n * hd * n * dd;
    if entries > DENSE_JACOBIAN_MAX_ENTRIES {
        return Err(Error::Capacity {
            details: format!(
                "dense Jacobian needs {entries} entries ({} x {}), cap is {DENSE_JACOBIAN_MAX_ENTRIES}",
                n * hd,
                n * dd
            ),
        });
    }
    let (_, map) = attention_forward(x, w)?;
    let a = w.attention_matrix();
    let xa = x.matrix().matmul(&a)?; // rows: x_iᵀ A
    let xat = x.matrix().matmul(&a.transpose())?; // rows: x_iᵀ Aᵀ
    let wvt_xt = w.w_v().transpose().matmul(&x.matrix().transpose())?; // d x N

    let mut jac = Matrix::zeros(n * hd, n * dd);
    for i in 0..n {
        let s_i = softmax_jacobian(&map.row_simplex(i));
        let c_i = wvt_xt.matmul(&s_i)?; // d x N, column j = W_Vᵀ Xᵀ S_i e_j
        let diag_term = c_i.matmul(&xat)?; // d x D, only enters block (i, i)
        let xa_row = xa.row(i);
        for j in 0..n {
            let p_ij = map.matrix()[(i, j)];
            for r in 0..hd {
                let c_rj = c_i[(r, j)];
                let out_row = i * hd + r;
                for b in 0..dd {
                    let mut v = c_rj * xa_row[b] + p_ij * w.w_v()[(b, r)];
                    if i == j {
                        v += diag_term[(r, b)];
                    }
                    jac.set(out_row, j * dd + b, v);
                }
            }
        }
    }
    Ok(jac)
}

/// Spectral norm of the exact Jacobian at `x`: the local Lipschitz constant
/// of the head in the flattened Euclidean geometry.
pub fn exact_local_lipschitz(
    x: &InputSequence,
    w: &AttentionHeadWeights,
    cfg: &PowerIterationConfig,
) -> Result<SpectralResult> {
    let jac = exact_attention_jacobian(x, w)?;
    spectral_norm(&jac, cfg)
}

/// The two standard ways to combine per-head Jacobian norms into a bound for
/// the concatenated multi-head map: root-sum-square (tighter) and plain sum
/// (looser but sub-multiplicative in more compositions).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiheadNormBound {
    pub root_sum_square: f64,
    pub sum: f64,
}

pub fn multihead_norm_bound(per_head: &[f64]) -> Result<MultiheadNormBound> {
    if per_head.is_empty() {
        return Err(Error::dim("multihead_norm_bound", "no head norms given".to_string()));
    }
    if let Some(bad) = per_head.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::domain(
            "multihead_norm_bound",
            format!("norm {bad} = {} is not a valid norm", per_head[bad]),
        ));
    }
    Ok(MultiheadNormBound {
        root_sum_square: per_head.iter().map(|v| v * v).sum::<f64>().sqrt(),
        sum: per_head.iter().sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::finite_difference_jacobian;
    use crate::rng::{gaussian_matrix, seeded, substream};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_head(seed: u64, dd: usize, hd: usize) -> AttentionHeadWeights {
        let mut rng = seeded(seed);
        AttentionHeadWeights::new(
            gaussian_matrix(&mut rng, dd, hd),
            gaussian_matrix(&mut rng, dd, hd),
            gaussian_matrix(&mut rng, dd, hd),
        )
        .unwrap()
    }

    fn random_input(seed: u64, n: usize, dd: usize) -> InputSequence {
        let mut rng = seeded(seed);
        InputSequence::new(gaussian_matrix(&mut rng, n, dd)).unwrap()
    }

    #[test]
    fn weights_validation() {
        let ok = Matrix::zeros(3, 2);
        let bad = Matrix::zeros(2, 2);
        assert!(AttentionHeadWeights::new(ok.clone(), ok.clone(), bad).is_err());
        assert!(AttentionHeadWeights::with_biases(
            ok.clone(),
            ok.clone(),
            ok.clone(),
            Some(vec![0.0; 3]),
            None,
            None
        )
        .is_err());
        let h = AttentionHeadWeights::new(ok.clone(), ok.clone(), ok).unwrap();
        assert_eq!(h.model_dim(), 3);
        assert_eq!(h.head_dim(), 2);
        assert!(!h.has_biases());
    }

    #[test]
    fn input_radius_validation() {
        let x = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap(); // row norm 5
        assert!(InputSequence::with_radius(x.clone(), 4.9).is_err());
        let ok = InputSequence::with_radius(x.clone(), 5.0).unwrap();
        assert_eq!(ok.effective_radius(), 5.0);
        let free = InputSequence::new(x).unwrap();
        assert_relative_eq!(free.effective_radius(), 5.0, epsilon = 1e-15);
    }

    #[test]
    fn map_validation() {
        let good = Matrix::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        assert!(AttentionMap::new(good).is_ok());
        let bad_sum = Matrix::from_rows(&[vec![0.6, 0.6]]).unwrap();
        assert!(AttentionMap::new(bad_sum).is_err());
        let negative = Matrix::from_rows(&[vec![1.5, -0.5]]).unwrap();
        assert!(AttentionMap::new(negative).is_err());
    }

    #[test]
    fn all_ones_head_on_identity_input() {
        let ones = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let w = AttentionHeadWeights::new(ones.clone(), ones.clone(), ones).unwrap();
        let x = InputSequence::new(Matrix::identity(2)).unwrap();
        let (out, map) = attention_forward(&x, &w).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(map.matrix()[(i, j)], 0.5);
            }
            assert_eq!(out[(i, 0)], 1.0);
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let x = InputSequence::new(Matrix::from_rows(&[vec![0.7, -1.3]]).unwrap()).unwrap();
        let w = random_head(3, 2, 2);
        let (out, map) = attention_forward(&x, &w).unwrap();
        assert_eq!(map.matrix().data(), &[1.0]);
        let direct = x.matrix().matmul(w.w_v()).unwrap();
        assert_eq!(out.data(), direct.data());
    }

    /// Output of a seeded head recomputed by an index-by-index straight-line
    /// evaluation of the defining formula, then frozen. Guards the fast path
    /// against transcription slips in the matrix plumbing.
    #[test]
    fn forward_matches_naive_reimplementation_and_fixture() {
        let (n, dd, hd) = (5, 4, 3);
        let x = random_input(100, n, dd);
        let w = random_head(101, dd, hd);
        let (out, map) = attention_forward(&x, &w).unwrap();

        // Straight-line recomputation with scalar loops only.
        let xm = x.matrix();
        let mut logits = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for a in 0..hd {
                    let mut qa = 0.0;
                    let mut ka = 0.0;
                    for b in 0..dd {
                        qa += xm[(i, b)] * w.w_q()[(b, a)];
                        ka += xm[(j, b)] * w.w_k()[(b, a)];
                    }
                    acc += qa * ka;
                }
                logits[i][j] = acc / (hd as f64).sqrt();
            }
        }
        for i in 0..n {
            let m = logits[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits[i].iter().map(|z| (z - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            for j in 0..n {
                let pij = exps[j] / s;
                assert_relative_eq!(map.matrix()[(i, j)], pij, max_relative = 1e-13);
            }
        }
        let mut naive_out = vec![vec![0.0; hd]; n];
        for i in 0..n {
            for a in 0..hd {
                let mut acc = 0.0;
                for j in 0..n {
                    let mut vja = 0.0;
                    for b in 0..dd {
                        vja += xm[(j, b)] * w.w_v()[(b, a)];
                    }
                    acc += map.matrix()[(i, j)] * vja;
                }
                naive_out[i][a] = acc;
            }
        }
        for i in 0..n {
            for a in 0..hd {
                assert_relative_eq!(out[(i, a)], naive_out[i][a], max_relative = 1e-13);
            }
        }

        // Frozen spot checks of the same run.
        assert_relative_eq!(out[(0, 0)], 0.110900645134957315, max_relative = 1e-12);
        assert_relative_eq!(out[(2, 1)], -1.91365039369004308, max_relative = 1e-12);
        assert_relative_eq!(out[(4, 2)], -0.374843239488710567, max_relative = 1e-12);
    }

    #[test]
    fn map_spectral_norm_stays_below_sqrt_n() {
        let cfg = PowerIterationConfig::default();
        for seed in 0..40u64 {
            let mut rng = substream(2024, seed);
            let n = 2 + (rng.gen::<u32>() as usize % 9);
            let dd = 2 + (rng.gen::<u32>() as usize % 5);
            let hd = 1 + (rng.gen::<u32>() as usize % 4);
            let x = InputSequence::new(gaussian_matrix(&mut rng, n, dd)).unwrap();
            let w = AttentionHeadWeights::new(
                gaussian_matrix(&mut rng, dd, hd),
                gaussian_matrix(&mut rng, dd, hd),
                gaussian_matrix(&mut rng, dd, hd),
            )
            .unwrap();
            let (_, map) = attention_forward(&x, &w).unwrap();
            let norm = spectral_norm(map.matrix(), &cfg).unwrap().value;
            assert!(
                norm <= (n as f64).sqrt() + 1e-8,
                "seed {seed}: map norm {norm} exceeds sqrt({n})"
            );
        }
    }

    #[test]
    fn permutation_of_tokens_permutes_output_rows() {
        // Row-wise softmax makes attention permutation-equivariant. Floating
        // summation order changes under the permutation, so equality is up to
        // rounding, not bitwise.
        let (n, dd, hd) = (5, 3, 2);
        let x = random_input(7, n, dd);
        let w = random_head(8, dd, hd);
        let (out, _) = attention_forward(&x, &w).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let xp = Matrix::from_rows(&perm.map(|i| x.matrix().row(i).to_vec())).unwrap();
        let (out_p, _) = attention_forward(&InputSequence::new(xp).unwrap(), &w).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for a in 0..hd {
                assert_relative_eq!(out_p[(new_row, a)], out[(old_row, a)], epsilon = 1e-13, max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn absorbing_biases_reproduces_the_biased_forward() {
        let (n, dd, hd) = (4, 3, 2);
        let x = random_input(21, n, dd);
        let mut rng = seeded(22);
        let w = AttentionHeadWeights::with_biases(
            gaussian_matrix(&mut rng, dd, hd),
            gaussian_matrix(&mut rng, dd, hd),
            gaussian_matrix(&mut rng, dd, hd),
            Some((0..hd).map(|_| rng.gen::<f64>() - 0.5).collect()),
            Some((0..hd).map(|_| rng.gen::<f64>() - 0.5).collect()),
            Some((0..hd).map(|_| rng.gen::<f64>() - 0.5).collect()),
        )
        .unwrap();
        let (out, map) = attention_forward(&x, &w).unwrap();
        let (xa, wa) = absorb_biases(&x, &w).unwrap();
        assert_eq!(xa.model_dim(), dd + 1);
        assert!(!wa.has_biases());
        let (out_a, map_a) = attention_forward(&xa, &wa).unwrap();
        for (a, b) in out.data().iter().zip(out_a.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-12);
        }
        for (a, b) in map.matrix().data().iter().zip(map_a.matrix().data()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn absorbing_zero_biases_changes_nothing() {
        let (n, dd, hd) = (3, 3, 2);
        let x = random_input(31, n, dd);
        let base = random_head(32, dd, hd);
        let zeroed = AttentionHeadWeights::with_biases(
            base.w_q().clone(),
            base.w_k().clone(),
            base.w_v().clone(),
            Some(vec![0.0; hd]),
            Some(vec![0.0; hd]),
            Some(vec![0.0; hd]),
        )
        .unwrap();
        let (out_plain, _) = attention_forward(&x, &base).unwrap();
        let (xa, wa) = absorb_biases(&x, &zeroed).unwrap();
        let (out_aug, _) = attention_forward(&xa, &wa).unwrap();
        // The appended column contributes exactly 1 * 0 to every projection
        // sum, so the results agree bit for bit.
        assert_eq!(out_plain.data(), out_aug.data());
    }

    #[test]
    fn absorption_updates_declared_radius() {
        let x = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.5, -0.5]]).unwrap();
        let seq = InputSequence::with_radius(x, 2.0).unwrap();
        let w = random_head(41, 2, 2);
        let (xa, _) = absorb_biases(&seq, &w).unwrap();
        assert_eq!(xa.declared_radius(), Some(5.0f64.sqrt()));
    }

    #[test]
    fn jacobian_of_single_token_is_value_projection() {
        let x = random_input(51, 1, 3);
        let w = random_head(52, 3, 2);
        let jac = exact_attention_jacobian(&x, &w).unwrap();
        assert_eq!((jac.rows(), jac.cols()), (2, 3));
        for a in 0..2 {
            for b in 0..3 {
                assert_eq!(jac[(a, b)], w.w_v()[(b, a)]);
            }
        }
    }

    #[test]
    fn jacobian_of_uniform_map_head_is_block_constant() {
        let zeros = Matrix::zeros(2, 2);
        let w = AttentionHeadWeights::new(zeros.clone(), zeros, Matrix::identity(2)).unwrap();
        let x = random_input(53, 2, 2);
        let jac = exact_attention_jacobian(&x, &w).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i % 2 == j % 2 { 0.5 } else { 0.0 };
                assert_eq!(jac[(i, j)], expect);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = substream(600, seed);
            let n = 2 + (rng.gen::<u32>() as usize % 5);
            let dd = 2 + (rng.gen::<u32>() as usize % 5);
            let hd = 1 + (rng.gen::<u32>() as usize % 5);
            let x = InputSequence::new(gaussian_matrix(&mut rng, n, dd)).unwrap();
            let w = AttentionHeadWeights::new(
                gaussian_matrix(&mut rng, dd, hd),
                gaussian_matrix(&mut rng, dd, hd),
                gaussian_matrix(&mut rng, dd, hd),
            )
            .unwrap();
            let jac = exact_attention_jacobian(&x, &w).unwrap();
            let fd = finite_difference_jacobian(
                |xflat| {
                    let xm = Matrix::from_vec(n, dd, xflat.to_vec()).unwrap();
                    let xi = InputSequence::new(xm).unwrap();
                    attention_forward(&xi, &w).unwrap().0.data().to_vec()
                },
                x.matrix().data(),
                1e-5,
            )
            .unwrap();
            let rel = fd.sub(&jac).unwrap().frobenius_norm() / jac.frobenius_norm();
            assert!(rel < 1e-5, "seed {seed} (n={n}, D={dd}, d={hd}): rel err {rel:e}");
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_with_biases() {
        let (n, dd, hd) = (3, 3, 2);
        let x = random_input(61, n, dd);
        let mut rng = seeded(62);
        let w = AttentionHeadWeights::with_biases(
            gaussian_matrix(&mut rng, dd, hd),
            gaussian_matrix(&mut rng, dd, hd),
            gaussian_matrix(&mut rng, dd, hd),
            Some(vec![0.3, -0.6]),
            Some(vec![-0.2, 0.8]),
            Some(vec![1.1, 0.4]),
        )
        .unwrap();
        let jac = exact_attention_jacobian(&x, &w).unwrap();
        assert_eq!((jac.rows(), jac.cols()), (n * hd, n * dd));
        let fd = finite_difference_jacobian(
            |xflat| {
                let xm = Matrix::from_vec(n, dd, xflat.to_vec()).unwrap();
                let xi = InputSequence::new(xm).unwrap();
                attention_forward(&xi, &w).unwrap().0.data().to_vec()
            },
            x.matrix().data(),
            1e-5,
        )
        .unwrap();
        let rel = fd.sub(&jac).unwrap().frobenius_norm() / jac.frobenius_norm();
        assert!(rel < 1e-5, "rel err {rel:e}");
    }

    #[test]
    fn jacobian_respects_capacity_cap() {
        let x = InputSequence::new(Matrix::zeros(500, 50)).unwrap();
        let w = AttentionHeadWeights::new(
            Matrix::zeros(50, 20),
            Matrix::zeros(50, 20),
            Matrix::zeros(50, 20),
        )
        .unwrap();
        assert!(matches!(
            exact_attention_jacobian(&x, &w),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn exact_lipschitz_of_zero_head_is_zero() {
        let x = random_input(71, 3, 2);
        let z = Matrix::zeros(2, 2);
        let w = AttentionHeadWeights::new(z.clone(), z.clone(), z).unwrap();
        let r = exact_local_lipschitz(&x, &w, &PowerIterationConfig::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.converged);
    }

    #[test]
    fn multihead_bounds() {
        let b = multihead_norm_bound(&[3.0, 4.0]).unwrap();
        assert_eq!(b.root_sum_square, 5.0);
        assert_eq!(b.sum, 7.0);
        assert!(multihead_norm_bound(&[]).is_err());
        assert!(multihead_norm_bound(&[1.0, -2.0]).is_err());
        assert!(multihead_norm_bound(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn multihead_rss_dominates_concatenated_jacobian() {
        let (n, dd) = (3, 3);
        let x = random_input(81, n, dd);
        let cfg = PowerIterationConfig::default();
        let mut blocks = Vec::new();
        let mut norms = Vec::new();
        for h in 0..4u64 {
            let w = random_head(90 + h, dd, 2);
            let jac = exact_attention_jacobian(&x, &w).unwrap();
            norms.push(spectral_norm(&jac, &cfg).unwrap().value);
            blocks.push(jac);
        }
        let concat = Matrix::from_blocks(&[blocks]).unwrap();
        let concat_norm = spectral_norm(&concat, &cfg).unwrap().value;
        let bound = multihead_norm_bound(&norms).unwrap();
        assert!(
            bound.root_sum_square >= concat_norm - 1e-9,
            "{} < {}",
            bound.root_sum_square,
            concat_norm
        );
        assert!(bound.sum >= bound.root_sum_square - 1e-12);
    }
}
