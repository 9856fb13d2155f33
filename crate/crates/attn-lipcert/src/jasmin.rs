//! JaSMin: a regularizer on attention maps that pushes the `g`-certificate of
//! every row's softmax Jacobian down, plus the classic weight-norm penalty it
//! is compared against.
//!
//! Two variants, selected by `k`:
//!
//! * `k = 0` — per row, `log(g_1 + eps)`: directly shrinks the certified
//!   softmax-Jacobian norm.
//! * `k >= 2` — per row, `log(g_1 / (g_k + eps))`: pushes the top-`k` entries
//!   toward equality (or the row toward categorical), which caps the exact
//!   norm through the top-ratio bound. `k = 1` is meaningless (the ratio is
//!   identically 1) and rejected.
//!
//! Rows are aggregated per attention map by `max` or `mean`; maps are summed.
//! Gradients are exact reverse-mode derivations with the sort permutation
//! frozen at the forward pass, so a tie contributes its subgradient and the
//! whole computation stays deterministic.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, AttentionHeadWeights, AttentionMap, InputSequence};
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, Matrix, PowerIterationConfig};
use crate::softmax::softmax_jacobian;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JasminConfig {
    /// 0 for the `log(g_1 + eps)` variant, `k >= 2` for the ratio variant.
    pub k: usize,
    /// Strength of the penalty; gradients are returned already scaled by it.
    pub lambda: f64,
    pub aggregation: Aggregation,
    /// Guard added inside the logarithms; defaults to 1e-6.
    pub epsilon: f64,
}

pub const DEFAULT_EPSILON: f64 = 1e-6;

impl JasminConfig {
    pub fn new(k: usize, lambda: f64, aggregation: Aggregation) -> Result<Self> {
        Self::with_epsilon(k, lambda, aggregation, DEFAULT_EPSILON)
    }

    pub fn with_epsilon(k: usize, lambda: f64, aggregation: Aggregation, epsilon: f64) -> Result<Self> {
        if k == 1 {
            return Err(Error::domain(
                "JasminConfig",
                "k = 1 is degenerate (g_1/g_1 is identically 1); use k = 0 or k >= 2",
            ));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::domain("JasminConfig", format!("lambda = {lambda} must be non-negative")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::domain("JasminConfig", format!("epsilon = {epsilon} must be positive")));
        }
        Ok(JasminConfig {
            k,
            lambda,
            aggregation,
            epsilon,
        })
    }
}

/// Value of the (unscaled) penalty, with per-map detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JasminValue {
    /// Sum of the per-map contributions (not multiplied by lambda).
    pub loss: f64,
    pub per_map: Vec<f64>,
    /// Row that realized the max per map (`None` under mean aggregation).
    pub argmax_rows: Vec<Option<usize>>,
}

/// Per-row value of the chosen variant on a sorted row. `sorted` is the row
/// descending; returns the loss term and, for gradients, the partials with
/// respect to the sorted entries (sparse: at most 4 slots touched).
fn row_term(sorted: &[f64], cfg: &JasminConfig) -> Result<(f64, Vec<(usize, f64)>)> {
    let n = sorted.len();
    let x1 = sorted[0];
    let x2 = if n >= 2 { sorted[1] } else { 0.0 };
    let g1 = x1 * (1.0 - x1 + x2);
    let mut partials: Vec<(usize, f64)> = Vec::with_capacity(4);
    let value = if cfg.k == 0 {
        let c = 1.0 / (g1 + cfg.epsilon);
        partials.push((0, c * (1.0 - 2.0 * x1 + x2)));
        if n >= 2 {
            partials.push((1, c * x1));
        }
        (g1 + cfg.epsilon).ln()
    } else {
        let k = cfg.k;
        if n < k {
            return Err(Error::Index {
                op: "jasmin row term",
                details: format!("k = {k} exceeds row length {n}"),
            });
        }
        let xk = sorted[k - 1];
        let xk1 = if k < n { sorted[k] } else { 0.0 };
        let gk = xk * (1.0 - xk + xk1);
        // d/dg1 of log(g1) needs g1 > 0; a categorical row makes the ratio
        // variant -inf and is rejected rather than propagated.
        let value = g1.ln() - (gk + cfg.epsilon).ln();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: "jasmin row term",
            });
        }
        let c1 = 1.0 / g1;
        let ck = -1.0 / (gk + cfg.epsilon);
        partials.push((0, c1 * (1.0 - 2.0 * x1 + x2)));
        if n >= 2 {
            partials.push((1, c1 * x1));
        }
        partials.push((k - 1, ck * (1.0 - 2.0 * xk + xk1)));
        if k < n {
            partials.push((k, ck * xk));
        }
        value
    };
    Ok((value, partials))
}

/// The penalty over a set of attention maps (one per layer/head pair):
/// rows aggregated within each map, maps summed.
pub fn jasmin_loss(maps: &[AttentionMap], cfg: &JasminConfig) -> Result<JasminValue> {
    if maps.is_empty() {
        return Err(Error::dim("jasmin_loss", "no maps given".to_string()));
    }
    let mut per_map = Vec::with_capacity(maps.len());
    let mut argmax_rows = Vec::with_capacity(maps.len());
    for map in maps {
        let n = map.seq_len();
        let mut best = f64::NEG_INFINITY;
        let mut best_row = 0usize;
        let mut sum = 0.0;
        for i in 0..n {
            let sorted = map.row_simplex(i).sorted_desc();
            let (value, _) = row_term(&sorted, cfg)?;
            sum += value;
            if value > best {
                best = value;
                best_row = i;
            }
        }
        match cfg.aggregation {
            Aggregation::Max => {
                per_map.push(best);
                argmax_rows.push(Some(best_row));
            }
            Aggregation::Mean => {
                per_map.push(sum / n as f64);
                argmax_rows.push(None);
            }
        }
    }
    let loss = per_map.iter().sum::<f64>();
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "jasmin_loss",
        });
    }
    Ok(JasminValue {
        loss,
        per_map,
        argmax_rows,
    })
}

/// Gradient of `lambda * jasmin_loss` for one head applied to `x`, with
/// respect to that head's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

/// Gradient of one map's (unscaled) penalty contribution with respect to the
/// map entries themselves — the quantity a training loop injects into its
/// `dP` before backpropagating through the softmax. Aggregation weights are
/// already applied: every row under mean, only the argmax row under max.
pub fn jasmin_map_gradient(map: &AttentionMap, cfg: &JasminConfig) -> Result<Matrix> {
    let n = map.seq_len();
    let mut dp = Matrix::zeros(n, n);
    let mut best = f64::NEG_INFINITY;
    let mut best_row = 0usize;
    let mut per_row: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let row = map.row_simplex(i);
        let perm = row.sort_permutation();
        let sorted: Vec<f64> = perm.iter().map(|&j| row.probs()[j]).collect();
        let (value, partials) = row_term(&sorted, cfg)?;
        // Scatter the sparse sorted-order partials back to map order through
        // the frozen permutation.
        let mut grad = vec![0.0; n];
        for &(slot, g) in &partials {
            grad[perm[slot]] += g;
        }
        if value > best {
            best = value;
            best_row = i;
        }
        per_row.push(grad);
    }
    match cfg.aggregation {
        Aggregation::Mean => {
            let inv_n = 1.0 / n as f64;
            for (i, grad) in per_row.iter().enumerate() {
                for (j, v) in grad.iter().enumerate() {
                    dp.set(i, j, v * inv_n);
                }
            }
        }
        Aggregation::Max => {
            for (j, v) in per_row[best_row].iter().enumerate() {
                dp.set(best_row, j, *v);
            }
        }
    }
    Ok(dp)
}

/// Analytic gradient of the lambda-scaled penalty of `heads` all applied to
/// the same input, with respect to every head's projections. The penalty
/// never reads `W_V`, so its gradient block is identically zero; it is
/// returned anyway so optimizers can treat heads uniformly.
pub fn jasmin_gradient(
    x: &InputSequence,
    heads: &[AttentionHeadWeights],
    cfg: &JasminConfig,
) -> Result<Vec<HeadGradients>> {
    if heads.is_empty() {
        return Err(Error::dim("jasmin_gradient", "no heads given".to_string()));
    }
    let mut out = Vec::with_capacity(heads.len());
    for w in heads {
        let (_, map) = attention_forward(x, w)?;
        let n = map.seq_len();
        let scale = 1.0 / (w.head_dim() as f64).sqrt();
        let (bias_q, bias_k, _) = w.biases();
        let q = with_bias(x.matrix().matmul(w.w_q())?, bias_q);
        let k = with_bias(x.matrix().matmul(w.w_k())?, bias_k);

        let dp = jasmin_map_gradient(&map, cfg)?;
        // Through the softmax, row by row: dz_i = (diag(p_i) - p_i p_iᵀ) dp_i.
        let mut dz = Matrix::zeros(n, n);
        for i in 0..n {
            let s = softmax_jacobian(&map.row_simplex(i));
            let dzi = s.matvec(dp.row(i))?;
            for (j, v) in dzi.iter().enumerate() {
                dz.set(i, j, *v);
            }
        }
        // Z = Q Kᵀ * scale, Q = X W_Q + 1 b_Qᵀ:
        //   dW_Q = Xᵀ (dZ K) * scale,  dW_K = Xᵀ (dZᵀ Q) * scale.
        let dq = dz.matmul(&k)?.scale(scale);
        let dk = dz.transpose().matmul(&q)?.scale(scale);
        let xt = x.matrix().transpose();
        out.push(HeadGradients {
            w_q: xt.matmul(&dq)?.scale(cfg.lambda),
            w_k: xt.matmul(&dk)?.scale(cfg.lambda),
            w_v: Matrix::zeros(w.model_dim(), w.head_dim()),
        });
    }
    Ok(out)
}

fn with_bias(mut m: Matrix, bias: Option<&[f64]>) -> Matrix {
    if let Some(b) = bias {
        for i in 0..m.rows() {
            for (j, &bj) in b.iter().enumerate() {
                let v = m[(i, j)] + bj;
                m.set(i, j, v);
            }
        }
    }
    m
}

/// Per-matrix weights of the squared-spectral-norm penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyCoefficients {
    pub q: f64,
    pub k: f64,
    pub v: f64,
}

/// The weight-norm baseline penalty:
/// `sum over heads of q*s1(W_Q)^2 + k*s1(W_K)^2 + v*s1(W_V)^2`.
pub fn specformer_penalty(
    heads: &[AttentionHeadWeights],
    coeffs: &PenaltyCoefficients,
    cfg: &PowerIterationConfig,
) -> Result<f64> {
    for (name, c) in [("q", coeffs.q), ("k", coeffs.k), ("v", coeffs.v)] {
        if !(c.is_finite() && c >= 0.0) {
            return Err(Error::domain("specformer_penalty", format!("coefficient {name} = {c} must be non-negative")));
        }
    }
    let mut total = 0.0;
    for w in heads {
        let sq = spectral_norm(w.w_q(), cfg)?.value;
        let sk = spectral_norm(w.w_k(), cfg)?.value;
        let sv = spectral_norm(w.w_v(), cfg)?.value;
        total += coeffs.q * sq * sq + coeffs.k * sk * sk + coeffs.v * sv * sv;
    }
    Ok(total)
}
