//! On-disk JSON formats. Weight and input files are strict (unknown fields
//! rejected); report files carry the tool version and every knob that
//! influenced the run, and no timestamps, so a rerun with the same inputs is
//! byte-identical.

use attn_lipcert::attention::{AttentionHeadWeights, InputSequence};
use attn_lipcert::linalg::Matrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile {
    pub model_dim: usize,
    pub head_dim: usize,
    pub heads: Vec<HeadEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadEntry {
    pub layer: usize,
    pub head: usize,
    pub w_q: Vec<Vec<f64>>,
    pub w_k: Vec<Vec<f64>>,
    pub w_v: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_q: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_k: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_v: Option<Vec<f64>>,
}

impl WeightsFile {
    /// Converts to library head weights, sorted by head index. The file
    /// must describe exactly one attention block: a non-empty set of heads
    /// on one layer, each matching the declared dimensions.
    pub fn to_heads(&self) -> attn_lipcert::Result<Vec<AttentionHeadWeights>> {
        use attn_lipcert::Error;
        if self.heads.is_empty() {
            return Err(invalid("weights file lists no heads"));
        }
        let layer = self.heads[0].layer;
        let mut entries: Vec<&HeadEntry> = self.heads.iter().collect();
        entries.sort_by_key(|e| e.head);
        let mut out = Vec::with_capacity(entries.len());
        for (idx, e) in entries.iter().enumerate() {
            if e.layer != layer {
                return Err(invalid(format!(
                    "certification covers a single block, but entries name layers {layer} and {}",
                    e.layer
                )));
            }
            if entries.iter().filter(|o| o.head == e.head).count() > 1 {
                return Err(invalid(format!("duplicate head index {}", e.head)));
            }
            let _ = idx;
            let w = AttentionHeadWeights::with_biases(
                Matrix::from_rows(&e.w_q)?,
                Matrix::from_rows(&e.w_k)?,
                Matrix::from_rows(&e.w_v)?,
                e.bias_q.clone(),
                e.bias_k.clone(),
                e.bias_v.clone(),
            )?;
            if w.model_dim() != self.model_dim || w.head_dim() != self.head_dim {
                return Err(Error::Dimension {
                    op: "weights file",
                    details: format!(
                        "head {} has shape {}x{}, file declares {}x{}",
                        e.head,
                        w.model_dim(),
                        w.head_dim(),
                        self.model_dim,
                        self.head_dim
                    ),
                });
            }
            out.push(w);
        }
        Ok(out)
    }
}

fn invalid(details: impl Into<String>) -> attn_lipcert::Error {
    attn_lipcert::Error::Dimension {
        op: "weights file",
        details: details.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputFile {
    pub x: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
}

impl InputFile {
    pub fn to_input(&self) -> attn_lipcert::Result<InputSequence> {
        let m = Matrix::from_rows(&self.x)?;
        match self.radius {
            Some(r) => InputSequence::with_radius(m, r),
            None => InputSequence::new(m),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

pub fn tool_info() -> ToolInfo {
    ToolInfo {
        name: "attn-lipcert".to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifyRun {
    pub seed: u64,
    pub power_tol: f64,
    pub power_max_iter: usize,
    pub compute_exact: bool,
    pub specformer_radius: f64,
    /// True when the exact oracle was requested but skipped because the
    /// dense Jacobian exceeds the capacity budget.
    pub exact_skipped_capacity: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifyReportFile {
    pub tool: ToolInfo,
    pub run: CertifyRun,
    pub certification: attn_lipcert::bounds::CertificationReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimplexRun {
    pub seed: u64,
    pub draws: usize,
    pub min_dim: usize,
    pub max_dim: usize,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimplexReportFile {
    pub tool: ToolInfo,
    pub run: SimplexRun,
    pub summary: attn_lipcert::sweep::SimplexSweepSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRun {
    pub seed: u64,
    pub instances: usize,
    pub seq_len: (usize, usize),
    pub model_dim: (usize, usize),
    pub head_dim: (usize, usize),
    pub compute_exact: bool,
    pub power_tol: f64,
    pub power_max_iter: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReportFile {
    pub tool: ToolInfo,
    pub run: SweepRun,
    pub summary: attn_lipcert::sweep::SweepSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub k: usize,
    pub aggregation: String,
    pub epsilon: f64,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    pub classes: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub separation: f64,
    pub token_noise: f64,
    pub probes: usize,
    pub trace_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReportFile {
    pub tool: ToolInfo,
    pub run: TrainRun,
    /// Nearest-class-mean accuracy on the test split: the task's oracle.
    pub oracle_accuracy: f64,
    pub final_test_accuracy: f64,
    pub trace: attn_lipcert::trainer::TrainTrace,
}
