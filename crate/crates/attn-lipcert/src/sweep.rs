//! Seeded batch experiments: many random attention instances pushed through
//! the whole bound stack, and many random simplex points pushed through the
//! interlacing machinery. Each instance draws from its own RNG substream
//! keyed by instance id, so results are identical whether the batch runs on
//! the rayon pool or sequentially — the tests assert that equality.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionHeadWeights, InputSequence};
use crate::bounds::{certify, BoundReport, CertifyOptions};
use crate::error::{Error, Result};
use crate::linalg::PowerIterationConfig;
use crate::rng::{gaussian_matrix, substream, uniform_simplex_point};
use crate::softmax::{interlacing_sandwich, SimplexVector};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub instances: usize,
    pub seq_len: (usize, usize),
    pub model_dim: (usize, usize),
    pub head_dim: (usize, usize),
    pub seed: u64,
    pub compute_exact: bool,
    pub power: PowerIterationConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            instances: 100,
            seq_len: (2, 12),
            model_dim: (2, 6),
            head_dim: (1, 4),
            seed: 0,
            compute_exact: true,
            power: PowerIterationConfig::default(),
        }
    }
}

impl SweepConfig {
    fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::dim("bounds sweep", "instances must be positive".to_string()));
        }
        for (name, (lo, hi), floor) in [
            ("seq_len", self.seq_len, 1),
            ("model_dim", self.model_dim, 1),
            ("head_dim", self.head_dim, 1),
        ] {
            if lo < floor || hi < lo {
                return Err(Error::dim(
                    "bounds sweep",
                    format!("{name} range ({lo}, {hi}) must satisfy {floor} <= lo <= hi"),
                ));
            }
        }
        Ok(())
    }
}

/// One instance's bounds, in the column order of the sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsRow {
    pub instance_id: usize,
    pub seq_len: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub exact: Option<f64>,
    pub refined: f64,
    pub refined_sqrt_n: f64,
    pub specformer: f64,
    pub castin: f64,
    pub max_g1: f64,
    pub max_sigma1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub instances: usize,
    /// Rows where the exact norm exceeded any certified bound beyond the
    /// relative soundness slack.
    pub soundness_violations: usize,
    /// Rows where the refined bound failed to improve on the weight-product
    /// baseline.
    pub refined_vs_specformer_violations: usize,
    /// Rows where the sqrt-n variant failed to improve on the radius-quartic
    /// baseline.
    pub sqrt_n_vs_castin_violations: usize,
    pub max_g1: f64,
    /// Mean of refined / exact over rows with an exact value — the sharpness
    /// factor actually achieved.
    pub mean_refined_over_exact: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSweep {
    pub rows: Vec<BoundsRow>,
    pub summary: SweepSummary,
}

fn sample_in(rng: &mut rand_chacha::ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi)
}

fn bounds_row(cfg: &SweepConfig, id: usize) -> Result<BoundsRow> {
    let mut rng = substream(cfg.seed, id as u64);
    let n = sample_in(&mut rng, cfg.seq_len);
    let dd = sample_in(&mut rng, cfg.model_dim);
    let hd = sample_in(&mut rng, cfg.head_dim);
    let x = InputSequence::new(gaussian_matrix(&mut rng, n, dd))?;
    let w = AttentionHeadWeights::new(
        gaussian_matrix(&mut rng, dd, hd),
        gaussian_matrix(&mut rng, dd, hd),
        gaussian_matrix(&mut rng, dd, hd),
    )?;
    let opts = CertifyOptions {
        compute_exact: cfg.compute_exact,
        power: cfg.power,
        ..CertifyOptions::default()
    };
    let report = certify(&x, std::slice::from_ref(&w), &opts)?;
    Ok(row_from_report(id, n, dd, hd, &report.per_head[0]))
}

fn row_from_report(id: usize, n: usize, dd: usize, hd: usize, r: &BoundReport) -> BoundsRow {
    BoundsRow {
        instance_id: id,
        seq_len: n,
        model_dim: dd,
        head_dim: hd,
        exact: r.exact,
        refined: r.refined,
        refined_sqrt_n: r.refined_sqrt_n,
        specformer: r.specformer,
        castin: r.castin,
        max_g1: r.ingredients.max_g1,
        max_sigma1: r.ingredients.max_sigma1,
    }
}

fn summarize(rows: &[BoundsRow]) -> SweepSummary {
    let slack = crate::bounds::SOUNDNESS_REL_SLACK;
    let mut soundness = 0usize;
    let mut vs_specformer = 0usize;
    let mut vs_castin = 0usize;
    let mut max_g1 = 0.0f64;
    let mut ratio_sum = 0.0;
    let mut ratio_count = 0usize;
    for r in rows {
        if let Some(exact) = r.exact {
            let tol = slack * exact.abs();
            for bound in [r.refined, r.refined_sqrt_n, r.specformer, r.castin] {
                if exact > bound + tol {
                    soundness += 1;
                    break;
                }
            }
            if exact > 0.0 {
                ratio_sum += r.refined / exact;
                ratio_count += 1;
            }
        }
        if r.refined > r.specformer * (1.0 + slack) {
            vs_specformer += 1;
        }
        if r.refined_sqrt_n > r.castin * (1.0 + slack) {
            vs_castin += 1;
        }
        max_g1 = max_g1.max(r.max_g1);
    }
    SweepSummary {
        instances: rows.len(),
        soundness_violations: soundness,
        refined_vs_specformer_violations: vs_specformer,
        sqrt_n_vs_castin_violations: vs_castin,
        max_g1,
        mean_refined_over_exact: if ratio_count > 0 {
            Some(ratio_sum / ratio_count as f64)
        } else {
            None
        },
    }
}

pub fn run_bounds_sweep(cfg: &SweepConfig) -> Result<BoundsSweep> {
    cfg.validate()?;
    let rows: Result<Vec<BoundsRow>> = crate::map_indexed(cfg.instances, |i| bounds_row(cfg, i))
        .into_iter()
        .collect();
    let rows = rows?;
    let summary = summarize(&rows);
    Ok(BoundsSweep { rows, summary })
}

/// Sequential twin of [`run_bounds_sweep`]; exists for the benchmark
/// comparison and produces bitwise-identical rows.
pub fn run_bounds_sweep_seq(cfg: &SweepConfig) -> Result<BoundsSweep> {
    cfg.validate()?;
    let rows: Result<Vec<BoundsRow>> = crate::map_indexed_seq(cfg.instances, |i| bounds_row(cfg, i))
        .into_iter()
        .collect();
    let rows = rows?;
    let summary = summarize(&rows);
    Ok(BoundsSweep { rows, summary })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexSweepConfig {
    pub draws: usize,
    pub min_dim: usize,
    pub max_dim: usize,
    pub seed: u64,
    /// Tolerance used both for the per-draw `sandwich_ok` flag and the
    /// summary violation count.
    pub tolerance: f64,
}

impl Default for SimplexSweepConfig {
    fn default() -> Self {
        SimplexSweepConfig {
            draws: 1000,
            min_dim: 2,
            max_dim: 16,
            seed: 0,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexRow {
    pub draw_id: usize,
    pub dim: usize,
    pub x1: f64,
    pub g1: f64,
    pub sigma1: f64,
    /// Largest violation of the interlacing chain on this draw (values at
    /// rounding level are expected; the flag applies the tolerance).
    pub max_violation: f64,
    pub sandwich_ok: bool,
    /// g1 / sigma1 — how loose the certificate is on this draw.
    pub overestimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexSweepSummary {
    pub draws: usize,
    pub violations: usize,
    pub max_violation: f64,
    pub max_g1: f64,
    pub mean_overestimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexSweep {
    pub rows: Vec<SimplexRow>,
    pub summary: SimplexSweepSummary,
}

fn simplex_row(cfg: &SimplexSweepConfig, id: usize) -> Result<SimplexRow> {
    let mut rng = substream(cfg.seed, id as u64);
    let n = rng.gen_range(cfg.min_dim..=cfg.max_dim);
    let p = SimplexVector::new(uniform_simplex_point(&mut rng, n))?;
    let sandwich = interlacing_sandwich(&p)?;
    let violation = sandwich.max_violation();
    Ok(SimplexRow {
        draw_id: id,
        dim: n,
        x1: sandwich.sorted_probs[0],
        g1: sandwich.g[0],
        sigma1: sandwich.singular_values[0],
        max_violation: violation,
        sandwich_ok: violation <= cfg.tolerance,
        overestimate: if sandwich.singular_values[0] > 0.0 {
            sandwich.g[0] / sandwich.singular_values[0]
        } else {
            f64::INFINITY
        },
    })
}

fn summarize_simplex(rows: &[SimplexRow]) -> SimplexSweepSummary {
    let mut violations = 0usize;
    let mut max_violation = 0.0f64;
    let mut max_g1 = 0.0f64;
    let mut ratio_sum = 0.0;
    for r in rows {
        if !r.sandwich_ok {
            violations += 1;
        }
        max_violation = max_violation.max(r.max_violation);
        max_g1 = max_g1.max(r.g1);
        ratio_sum += r.overestimate;
    }
    SimplexSweepSummary {
        draws: rows.len(),
        violations,
        max_violation,
        max_g1,
        mean_overestimate: ratio_sum / rows.len() as f64,
    }
}

fn validate_simplex_config(cfg: &SimplexSweepConfig) -> Result<()> {
    if cfg.draws == 0 {
        return Err(Error::dim("simplex sweep", "draws must be positive".to_string()));
    }
    if cfg.min_dim < 2 || cfg.max_dim < cfg.min_dim {
        return Err(Error::dim(
            "simplex sweep",
            format!("dimension range ({}, {}) must satisfy 2 <= lo <= hi", cfg.min_dim, cfg.max_dim),
        ));
    }
    if !(cfg.tolerance.is_finite() && cfg.tolerance >= 0.0) {
        return Err(Error::domain("simplex sweep", format!("tolerance {} must be non-negative", cfg.tolerance)));
    }
    Ok(())
}

pub fn run_simplex_sweep(cfg: &SimplexSweepConfig) -> Result<SimplexSweep> {
    validate_simplex_config(cfg)?;
    let rows: Result<Vec<SimplexRow>> = crate::map_indexed(cfg.draws, |i| simplex_row(cfg, i))
        .into_iter()
        .collect();
    let rows = rows?;
    let summary = summarize_simplex(&rows);
    Ok(SimplexSweep { rows, summary })
}

/// Sequential twin of [`run_simplex_sweep`] for the benchmark comparison.
pub fn run_simplex_sweep_seq(cfg: &SimplexSweepConfig) -> Result<SimplexSweep> {
    validate_simplex_config(cfg)?;
    let rows: Result<Vec<SimplexRow>> = crate::map_indexed_seq(cfg.draws, |i| simplex_row(cfg, i))
        .into_iter()
        .collect();
    let rows = rows?;
    let summary = summarize_simplex(&rows);
    Ok(SimplexSweep { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_bounds_sweeps_are_bitwise_identical() {
        let cfg = SweepConfig {
            instances: 24,
            ..SweepConfig::default()
        };
        let par = run_bounds_sweep(&cfg).unwrap();
        let seq = run_bounds_sweep_seq(&cfg).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn bounds_sweep_has_no_violations_on_gaussian_instances() {
        let cfg = SweepConfig {
            instances: 40,
            seed: 17,
            ..SweepConfig::default()
        };
        let sweep = run_bounds_sweep(&cfg).unwrap();
        assert_eq!(sweep.summary.soundness_violations, 0);
        assert_eq!(sweep.summary.refined_vs_specformer_violations, 0);
        assert_eq!(sweep.summary.sqrt_n_vs_castin_violations, 0);
        assert!(sweep.summary.max_g1 <= 0.5 + 1e-12);
        let mean = sweep.summary.mean_refined_over_exact.unwrap();
        assert!(mean >= 1.0, "refined bound cannot undercut the exact norm (mean ratio {mean})");
    }

    #[test]
    fn bounds_rows_respect_configured_ranges_and_ids() {
        let cfg = SweepConfig {
            instances: 20,
            seq_len: (3, 5),
            model_dim: (2, 2),
            head_dim: (1, 3),
            seed: 5,
            compute_exact: false,
            power: PowerIterationConfig::default(),
        };
        let sweep = run_bounds_sweep(&cfg).unwrap();
        for (i, row) in sweep.rows.iter().enumerate() {
            assert_eq!(row.instance_id, i);
            assert!((3..=5).contains(&row.seq_len));
            assert_eq!(row.model_dim, 2);
            assert!((1..=3).contains(&row.head_dim));
            assert!(row.exact.is_none());
        }
        assert!(sweep.summary.mean_refined_over_exact.is_none());
    }

    #[test]
    fn seeds_change_rows() {
        let base = SweepConfig {
            instances: 6,
            ..SweepConfig::default()
        };
        let a = run_bounds_sweep(&base).unwrap();
        let b = run_bounds_sweep(&SweepConfig { seed: 1, ..base }).unwrap();
        assert_ne!(a.rows, b.rows);
    }

    #[test]
    fn parallel_and_sequential_simplex_sweeps_are_bitwise_identical() {
        let cfg = SimplexSweepConfig {
            draws: 200,
            ..SimplexSweepConfig::default()
        };
        let par = run_simplex_sweep(&cfg).unwrap();
        let seq = run_simplex_sweep_seq(&cfg).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn simplex_sweep_respects_the_sandwich_everywhere() {
        let cfg = SimplexSweepConfig {
            draws: 500,
            seed: 23,
            ..SimplexSweepConfig::default()
        };
        let sweep = run_simplex_sweep(&cfg).unwrap();
        assert_eq!(sweep.summary.violations, 0, "max violation {:e}", sweep.summary.max_violation);
        assert!(sweep.summary.max_g1 <= 0.5 + 1e-12);
        assert!(sweep.summary.mean_overestimate >= 1.0);
        for row in &sweep.rows {
            assert!(row.g1 >= row.sigma1 - 1e-10);
            assert!(row.x1 >= row.g1 - 1e-12);
        }
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        assert!(run_bounds_sweep(&SweepConfig { instances: 0, ..SweepConfig::default() }).is_err());
        assert!(run_bounds_sweep(&SweepConfig { seq_len: (4, 2), ..SweepConfig::default() }).is_err());
        assert!(run_simplex_sweep(&SimplexSweepConfig { min_dim: 1, ..SimplexSweepConfig::default() }).is_err());
    }
}
