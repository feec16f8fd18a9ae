//! Forward-only attenuation: select risky input dimensions, compute
//! decay-law retention factors, and fold them into adapter columns.
//!
//! The pass never computes gradients. In adapter mode only `W_A` columns
//! change; in full mode the adapter is merged into a dense copy of the
//! base weight first and the merged columns are scaled.

use std::time::Instant;

use crate::config::{Target, UcanConfig};
use crate::data::TokenBatch;
use crate::error::UcanError;
use crate::model::AdapterModel;
use crate::risk::{score_layers, RiskReport};
use crate::signals::{collect_summary, ActivationSummary};
use crate::tensor::Matrix;
use crate::Result;

/// Selected dimensions and per-column retention factors for one layer.
/// `alpha[j]` is exactly 1.0 for unselected dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub selected: Vec<usize>,
    pub alpha: Vec<f32>,
}

/// Per-layer intervention description.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionPlan {
    pub layers: Vec<LayerPlan>,
}

impl InterventionPlan {
    pub fn total_selected(&self) -> usize {
        self.layers.iter().map(|l| l.selected.len()).sum()
    }
}

/// Dimensions scoring strictly above the threshold, ascending. Ties at
/// the threshold are excluded.
pub fn select_intervention(r_dim: &[f64], tau_risk: f64) -> Vec<usize> {
    r_dim
        .iter()
        .enumerate()
        .filter(|(_, r)| **r > tau_risk)
        .map(|(j, _)| j)
        .collect()
}

/// Score-proportional decay `alpha_max * (1 - (R - tau)/(1 - tau + eps))^beta`.
/// Defined only above the threshold.
pub fn retention_factor(r: f64, tau: f64, alpha_max: f64, beta: f64, eps: f64) -> Result<f64> {
    if r <= tau {
        return Err(UcanError::Config(format!(
            "retention_factor requires R > tau (got R={r}, tau={tau})"
        )));
    }
    let base = 1.0 - (r - tau) / (1.0 - tau + eps);
    Ok(alpha_max * base.max(0.0).powf(beta))
}

/// Multiplies column `j` of `w` by `alpha[j]` in place.
pub fn apply_column_scaling(w: &mut Matrix, alpha: &[f32]) -> Result<()> {
    if alpha.len() != w.cols {
        return Err(UcanError::Shape(format!(
            "apply_column_scaling: {} factors for {} columns",
            alpha.len(),
            w.cols
        )));
    }
    for (j, a) in alpha.iter().enumerate() {
        if *a != 1.0 {
            w.scale_column(j, *a);
        }
    }
    Ok(())
}

/// Converts risk scores into a plan: threshold selection plus decay
/// factors, or a hard 0/1 mask under the hard-mask ablation.
pub fn build_plan(report: &RiskReport) -> Result<InterventionPlan> {
    let c = &report.config;
    let mut layers = Vec::with_capacity(report.layers.len());
    for layer in &report.layers {
        let selected = select_intervention(&layer.r_dim, c.tau_risk);
        let mut alpha = vec![1.0f32; layer.d_in];
        for j in &selected {
            alpha[*j] = if c.ablation.hard_mask {
                0.0
            } else {
                retention_factor(layer.r_dim[*j], c.tau_risk, c.alpha_max, c.beta, c.eps)? as f32
            };
        }
        layers.push(LayerPlan { selected, alpha });
    }
    Ok(InterventionPlan { layers })
}

/// Applies a plan to the model weights. Layers with empty selections are
/// left strictly untouched, bit for bit.
pub fn apply_plan(model: &mut AdapterModel, plan: &InterventionPlan, target: Target) -> Result<()> {
    if plan.layers.len() != model.layers.len() {
        return Err(UcanError::Shape(format!(
            "plan covers {} layers, model has {}",
            plan.layers.len(),
            model.layers.len()
        )));
    }
    for (layer, lp) in model.layers.iter_mut().zip(&plan.layers) {
        if lp.selected.is_empty() {
            continue;
        }
        match target {
            Target::Adapter => apply_column_scaling(&mut layer.w_a, &lp.alpha)?,
            Target::Full => {
                let delta = layer.effective_delta()?;
                for (m, d) in layer.w0.data.iter_mut().zip(&delta.data) {
                    *m += d;
                }
                layer.w_b = Matrix::zeros(layer.w_b.rows, layer.w_b.cols);
                apply_column_scaling(&mut layer.w0, &lp.alpha)?;
            }
        }
    }
    Ok(())
}

/// Scores a finalized summary and folds the resulting plan into the model.
pub fn attenuate_with_summary(
    model: &mut AdapterModel,
    summary: &ActivationSummary,
    config: &UcanConfig,
) -> Result<(RiskReport, InterventionPlan)> {
    let report = score_layers(model, summary, config)?;
    let plan = build_plan(&report)?;
    apply_plan(model, &plan, config.target)?;
    Ok((report, plan))
}

/// Timing and volume accounting for one unlearning pass.
#[derive(Debug, Clone, Copy)]
pub struct UnlearnStats {
    pub wall_clock_s: f64,
    /// Signal rows consumed across both sides.
    pub rows_processed: u64,
    /// Gradient ops performed (always zero for this pass).
    pub grad_ops: u64,
}

/// One-shot forward-only unlearning: stream activation statistics over
/// both sides, score risk per layer, and attenuate in place.
pub fn unlearn(
    model: &mut AdapterModel,
    forget_batches: &[TokenBatch],
    retain_batches: &[TokenBatch],
    config: &UcanConfig,
) -> Result<(RiskReport, InterventionPlan, UnlearnStats)> {
    config.validate()?;
    let grad_ops_before = model.grad_ops;
    let start = Instant::now();
    let summary = collect_summary(model, forget_batches, retain_batches)?;
    let (report, plan) = attenuate_with_summary(model, &summary, config)?;
    let stats = UnlearnStats {
        wall_clock_s: start.elapsed().as_secs_f64(),
        rows_processed: summary.n_forget_rows + summary.n_retain_rows,
        grad_ops: model.grad_ops - grad_ops_before,
    };
    Ok((report, plan, stats))
}
