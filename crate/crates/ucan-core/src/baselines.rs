//! Comparison strategies: the retrain-on-remain oracle, gradient ascent,
//! reference-anchored preference optimization, and a hard-prune stand-in
//! that reuses the risk scores.
//!
//! Every strategy leaves `W0`, the embedding, and the head untouched
//! except retraining, which builds a fresh model.

use std::time::Instant;

use crate::config::{BaselineConfig, ModelHyper, TrainHyper};
use crate::data::{templatize, InteractionLog, ItemId, TemplateSpec};
use crate::error::UcanError;
use crate::model::{softmax_rows, AdapterModel, TrainReport, TrainScope};
use crate::risk::RiskReport;
use crate::rng::substream_indexed;
use crate::Result;

/// Probability floor shared by the preference loss and its gradient.
const PROB_FLOOR: f64 = 1e-12;
/// Cap applied to a non-finite or overflowing probability ratio.
const RATIO_CAP: f64 = 1e12;

/// Next-item pairs from the retain side only, excluding each user's final
/// event so the holdout stays unseen, mirroring the deployed protocol.
pub fn retain_train_pairs(retain: &InteractionLog) -> Vec<(Vec<ItemId>, ItemId)> {
    let mut pairs = Vec::new();
    for events in retain.by_user() {
        if events.len() < 2 {
            continue;
        }
        let seq: Vec<ItemId> = events[..events.len() - 1].iter().map(|e| e.item).collect();
        for k in 1..seq.len() {
            pairs.push((seq[..k].to_vec(), seq[k]));
        }
    }
    pairs
}

/// Trains a fresh model from scratch on retain-side pairs only.
pub fn retrain_on_remain(
    retain: &InteractionLog,
    tmpl: &TemplateSpec,
    model_hyper: &ModelHyper,
    train_hyper: &TrainHyper,
    seed: u64,
) -> Result<(AdapterModel, TrainReport)> {
    let pairs = retain_train_pairs(retain);
    if pairs.is_empty() {
        return Err(UcanError::Data("retrain_on_remain: retain side has no training pairs".into()));
    }
    let mut model = AdapterModel::init(retain.n_items, tmpl.n_reserved, model_hyper, seed);
    let report =
        crate::model::train_adapter(&mut model, &pairs, tmpl, train_hyper, seed, TrainScope::Full)?;
    Ok((model, report))
}

/// Trace of an ascent or preference run.
#[derive(Debug, Clone)]
pub struct UnlearnTrace {
    /// Mean loss per full pass, including the pre-update baseline at
    /// index zero.
    pub pass_losses: Vec<f64>,
    /// Set when ascent stopped early at the divergence cap.
    pub diverged: bool,
    /// Probability ratios clamped during preference optimization.
    pub clamped: u64,
    pub grad_ops: u64,
    pub wall_clock_s: f64,
}

fn mean_ce_loss(
    model: &AdapterModel,
    pairs: &[(Vec<ItemId>, ItemId)],
    tmpl: &TemplateSpec,
    batch_size: usize,
) -> Result<f64> {
    let n = model.n_items as usize;
    let mut total = 0.0f64;
    for chunk in pairs.chunks(batch_size) {
        let batch = templatize(chunk, tmpl, model.n_items)?;
        let logits = model.forward(&batch)?;
        let (loss, _) = crate::model::ce_loss_and_dlogits(&logits, &batch.targets, batch.rows, n);
        total += loss * batch.rows as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Maximizes forget-set cross-entropy with adapter-only updates. Stops
/// early once the running mean loss exceeds `divergence_cap` times the
/// pre-update loss.
pub fn gradient_ascent(
    model: &mut AdapterModel,
    forget_pairs: &[(Vec<ItemId>, ItemId)],
    tmpl: &TemplateSpec,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<UnlearnTrace> {
    cfg.validate()?;
    if forget_pairs.is_empty() {
        return Err(UcanError::Data("gradient_ascent: no forget pairs".into()));
    }
    let start = Instant::now();
    let grad_ops_before = model.grad_ops;
    let n = model.n_items as usize;
    let initial = mean_ce_loss(model, forget_pairs, tmpl, cfg.batch_size)?;
    let cap = cfg.divergence_cap * initial.max(1e-6);
    let mut trace = UnlearnTrace {
        pass_losses: vec![initial],
        diverged: false,
        clamped: 0,
        grad_ops: 0,
        wall_clock_s: 0.0,
    };
    let mut order: Vec<usize> = (0..forget_pairs.len()).collect();
    'passes: for pass in 0..cfg.steps {
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut substream_indexed(seed, "ga_epoch", pass as u64));
        }
        let mut pass_loss = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<(Vec<ItemId>, ItemId)> =
                chunk.iter().map(|i| forget_pairs[*i].clone()).collect();
            let batch = templatize(&rows, tmpl, model.n_items)?;
            let logits = model.forward(&batch)?;
            let (loss, dl) =
                crate::model::ce_loss_and_dlogits(&logits, &batch.targets, batch.rows, n);
            if !loss.is_finite() {
                return Err(UcanError::Numeric("gradient_ascent: non-finite loss".into()));
            }
            pass_loss += loss * batch.rows as f64;
            seen += batch.rows;
            if loss > cap {
                trace.diverged = true;
                trace.pass_losses.push(pass_loss / seen as f64);
                break 'passes;
            }
            let g = model.backward_batch(&batch, &dl)?;
            model.apply_grads(&g, -cfg.lr, TrainScope::AdapterOnly);
        }
        trace.pass_losses.push(pass_loss / forget_pairs.len() as f64);
    }
    trace.grad_ops = model.grad_ops - grad_ops_before;
    trace.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(trace)
}

/// Per-sample preference loss `(2/beta) * ln(1 + (p/p_ref)^beta)`.
/// Equals `(2/beta) * ln 2` when the policies agree and falls to zero as
/// the target probability vanishes.
pub fn npo_sample_loss(p_theta: f64, p_ref: f64, beta: f64) -> f64 {
    let ratio = p_theta.max(PROB_FLOOR) / p_ref.max(PROB_FLOOR);
    let powed = ratio.powf(beta).min(RATIO_CAP);
    (2.0 / beta) * powed.ln_1p()
}

fn npo_pass_loss(
    model: &AdapterModel,
    reference: &AdapterModel,
    pairs: &[(Vec<ItemId>, ItemId)],
    tmpl: &TemplateSpec,
    cfg: &BaselineConfig,
) -> Result<f64> {
    let n = model.n_items as usize;
    let mut total = 0.0f64;
    for chunk in pairs.chunks(cfg.batch_size) {
        let batch = templatize(chunk, tmpl, model.n_items)?;
        let p = softmax_rows(&model.forward(&batch)?, batch.rows, n);
        let p_ref = softmax_rows(&reference.forward(&batch)?, batch.rows, n);
        for r in 0..batch.rows {
            let y = batch.targets[r] as usize;
            total += npo_sample_loss(p[r * n + y], p_ref[r * n + y], cfg.npo_beta);
        }
    }
    Ok(total / pairs.len() as f64)
}

/// Minimizes the reference-anchored preference loss over forget samples
/// with adapter-only updates. A frozen copy of the incoming model serves
/// as the reference policy.
pub fn npo_unlearn(
    model: &mut AdapterModel,
    forget_pairs: &[(Vec<ItemId>, ItemId)],
    tmpl: &TemplateSpec,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<UnlearnTrace> {
    cfg.validate()?;
    if forget_pairs.is_empty() {
        return Err(UcanError::Data("npo_unlearn: no forget pairs".into()));
    }
    let start = Instant::now();
    let grad_ops_before = model.grad_ops;
    let reference = model.clone();
    let n = model.n_items as usize;
    let beta = cfg.npo_beta;
    let mut trace = UnlearnTrace {
        pass_losses: vec![npo_pass_loss(model, &reference, forget_pairs, tmpl, cfg)?],
        diverged: false,
        clamped: 0,
        grad_ops: 0,
        wall_clock_s: 0.0,
    };
    let mut order: Vec<usize> = (0..forget_pairs.len()).collect();
    for pass in 0..cfg.steps {
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut substream_indexed(seed, "npo_epoch", pass as u64));
        }
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<(Vec<ItemId>, ItemId)> =
                chunk.iter().map(|i| forget_pairs[*i].clone()).collect();
            let batch = templatize(&rows, tmpl, model.n_items)?;
            let probs = softmax_rows(&model.forward(&batch)?, batch.rows, n);
            let ref_probs = softmax_rows(&reference.forward(&batch)?, batch.rows, n);
            let mut dl = vec![0.0f64; batch.rows * n];
            for r in 0..batch.rows {
                let y = batch.targets[r] as usize;
                let p_y = probs[r * n + y].max(PROB_FLOOR);
                let p_ref = ref_probs[r * n + y].max(PROB_FLOOR);
                let mut ratio = p_y / p_ref;
                if !ratio.is_finite() || ratio > RATIO_CAP {
                    ratio = RATIO_CAP;
                    trace.clamped += 1;
                }
                let powed = ratio.powf(beta).min(RATIO_CAP);
                // dL/dp_y for L = (2/beta) ln(1 + ratio^beta)
                let dloss_dp = 2.0 * ratio.powf(beta - 1.0).min(RATIO_CAP)
                    / ((1.0 + powed) * p_ref);
                for i in 0..n {
                    let onehot = if i == y { 1.0 } else { 0.0 };
                    dl[r * n + i] = dloss_dp * p_y * (onehot - probs[r * n + i])
                        / batch.rows as f64;
                }
            }
            let g = model.backward_batch(&batch, &dl)?;
            model.apply_grads(&g, cfg.lr, TrainScope::AdapterOnly);
        }
        trace.pass_losses.push(npo_pass_loss(model, &reference, forget_pairs, tmpl, cfg)?);
    }
    trace.grad_ops = model.grad_ops - grad_ops_before;
    trace.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(trace)
}

/// Hard-prune selection rule: either the top-scored fraction per layer or
/// every dimension strictly above a threshold.
#[derive(Debug, Clone, Copy)]
pub enum PruneBy {
    Fraction(f64),
    Tau(f64),
}

/// Zeroes `W_A` columns for the selected dimensions (binary mask, no soft
/// decay). Fraction ranking breaks score ties toward the lower index.
/// Returns the selected dimensions per layer.
pub fn hard_prune(
    model: &mut AdapterModel,
    report: &RiskReport,
    by: PruneBy,
) -> Result<Vec<Vec<usize>>> {
    if report.layers.len() != model.layers.len() {
        return Err(UcanError::Shape(format!(
            "hard_prune: {} scored layers for {} model layers",
            report.layers.len(),
            model.layers.len()
        )));
    }
    let mut selections = Vec::with_capacity(report.layers.len());
    for (layer, risk) in model.layers.iter_mut().zip(&report.layers) {
        if risk.d_in != layer.d_in() {
            return Err(UcanError::Shape("hard_prune: layer width mismatch".into()));
        }
        let selected: Vec<usize> = match by {
            PruneBy::Tau(tau) => crate::attenuate::select_intervention(&risk.r_dim, tau),
            PruneBy::Fraction(f) => {
                if !(0.0..=1.0).contains(&f) {
                    return Err(UcanError::Config(format!(
                        "prune fraction must lie in [0, 1], got {f}"
                    )));
                }
                let k = (f * risk.d_in as f64).floor() as usize;
                let mut order: Vec<usize> = (0..risk.d_in).collect();
                order.sort_by(|a, b| {
                    risk.r_dim[*b]
                        .partial_cmp(&risk.r_dim[*a])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(b))
                });
                let mut top: Vec<usize> = order.into_iter().take(k).collect();
                top.sort_unstable();
                top
            }
        };
        for j in &selected {
            layer.w_a.scale_column(*j, 0.0);
        }
        selections.push(selected);
    }
    Ok(selections)
}
