//! Per-round diagnostic records written as JSON lines (`trace.jsonl`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("trace line {line}: {reason}")]
    Invalid { line: usize, reason: String },
}

/// Raw material for constant estimation and the layer-gap check.
///
/// Gradients are taken at the model broadcast at the start of the round;
/// losses and gaps are measured after aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub round: usize,
    pub eta: f64,
    pub top_n: usize,
    pub clients_per_round: usize,
    pub layer_count: usize,
    /// SGD steps each client took this round.
    pub local_steps: usize,
    pub participants: Vec<usize>,
    pub client_sizes: Vec<usize>,
    /// Norm of the full-training-set gradient at the broadcast model.
    pub global_grad_norm: f64,
    /// `[client][layer]` norms of each participant's local gradient.
    pub client_layer_grad_norms: Vec<Vec<f64>>,
    /// Per-layer distance between the aggregated and the shadow FedAvg model.
    pub shadow_gaps: Option<Vec<f64>>,
    /// Training loss of the aggregated model.
    pub global_loss: f64,
    /// Training loss of the shadow FedAvg model.
    pub shadow_loss: Option<f64>,
    /// Distance between this round's and the previous round's broadcast model.
    pub step_norm: Option<f64>,
    /// Distance between the corresponding global gradients.
    pub grad_diff_norm: Option<f64>,
}

impl TraceRecord {
    pub fn validate(&self) -> Result<(), String> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if self.layer_count == 0 {
            return Err("layer_count must be positive".into());
        }
        if self.top_n == 0 || self.top_n > self.clients_per_round {
            return Err("top_n must lie in [1, clients_per_round]".into());
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err("eta must be positive".into());
        }
        if !finite_nonneg(self.global_grad_norm) {
            return Err("global_grad_norm must be finite and non-negative".into());
        }
        for row in &self.client_layer_grad_norms {
            if row.len() != self.layer_count {
                return Err("client_layer_grad_norms rows must have layer_count entries".into());
            }
            if !row.iter().copied().all(finite_nonneg) {
                return Err("client layer gradient norms must be finite and non-negative".into());
            }
        }
        if let Some(g) = &self.shadow_gaps {
            if g.len() != self.layer_count || !g.iter().copied().all(finite_nonneg) {
                return Err("shadow_gaps must hold layer_count finite non-negative values".into());
            }
        }
        for v in [self.step_norm, self.grad_diff_norm].into_iter().flatten() {
            if !finite_nonneg(v) {
                return Err("step norms must be finite and non-negative".into());
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace records always serialize")
    }
}

/// Parses a JSON-lines trace; blank lines are skipped.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, TraceError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord =
            serde_json::from_str(raw).map_err(|source| TraceError::Json { line: i + 1, source })?;
        rec.validate()
            .map_err(|reason| TraceError::Invalid { line: i + 1, reason })?;
        out.push(rec);
    }
    Ok(out)
}
