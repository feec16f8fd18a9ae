//! Seven-metric evaluation: ranking quality on both sides, the composite
//! trade-off score, distributional divergence, prediction shift,
//! perplexity, and timing capture.
//!
//! All tie-breaking is by ascending item id. Probabilities are floored at
//! 1e-12 before any logarithm.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{templatize_chunked, ItemId, TemplateSpec, TokenBatch};
use crate::error::UcanError;
use crate::model::{softmax_rows, AdapterModel};
use crate::Result;

/// Floor applied to probabilities before logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// 1-based rank of `truth` under descending score. A competing item wins
/// a tie only with a strictly lower id.
pub fn rank_of(scores: &[f32], truth: ItemId) -> usize {
    let t = truth as usize;
    let st = scores[t];
    let mut rank = 1usize;
    for (i, s) in scores.iter().enumerate() {
        if *s > st || (*s == st && i < t) {
            rank += 1;
        }
    }
    rank
}

/// Top-k item ids by descending score, ties toward the lower id.
pub fn top_k(scores: &[f32], k: usize) -> Vec<ItemId> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| {
        scores[*b].partial_cmp(&scores[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b))
    });
    order.into_iter().take(k).map(|i| i as ItemId).collect()
}

/// Item with the highest score, ties toward the lower id.
pub fn argmax_item(scores: &[f32]) -> ItemId {
    let mut best = 0usize;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best as ItemId
}

fn require_queries(ranks: &[usize], k: usize) -> Result<()> {
    if ranks.is_empty() {
        return Err(UcanError::Data("ranking metrics need at least one query".into()));
    }
    if k == 0 {
        return Err(UcanError::Config("ranking cutoff K must be >= 1".into()));
    }
    Ok(())
}

/// Fraction of queries whose truth lands in the top k.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    require_queries(ranks, k)?;
    let hits = ranks.iter().filter(|r| **r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Mean of 1/rank for ranks within the cutoff, zero beyond it.
pub fn mrr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    require_queries(ranks, k)?;
    let sum: f64 = ranks.iter().map(|r| if *r <= k { 1.0 / *r as f64 } else { 0.0 }).sum();
    Ok(sum / ranks.len() as f64)
}

/// Mean of 1/log2(rank+1) for ranks within the cutoff, zero beyond it.
pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    require_queries(ranks, k)?;
    let sum: f64 = ranks
        .iter()
        .map(|r| if *r <= k { 1.0 / ((*r as f64) + 1.0).log2() } else { 0.0 })
        .sum();
    Ok(sum / ranks.len() as f64)
}

/// Recall, MRR, and NDCG at one cutoff.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub recall: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

impl RankingMetrics {
    pub fn at_k(ranks: &[usize], k: usize) -> Result<RankingMetrics> {
        Ok(RankingMetrics {
            recall: recall_at_k(ranks, k)?,
            mrr: mrr_at_k(ranks, k)?,
            ndcg: ndcg_at_k(ranks, k)?,
        })
    }

    /// Arithmetic mean of the three metrics.
    pub fn mean(&self) -> f64 {
        (self.recall + self.mrr + self.ndcg) / 3.0
    }
}

/// Ranking metrics at cutoffs 5 and 10 for one evaluation side.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SideMetrics {
    pub at5: RankingMetrics,
    pub at10: RankingMetrics,
}

/// Composite balance score in percent points: relative forget-side drop
/// of the mean @10 metric minus relative retain-side drop.
pub fn tradeoff_at_10(
    forget_orig: &RankingMetrics,
    retain_orig: &RankingMetrics,
    forget_new: &RankingMetrics,
    retain_new: &RankingMetrics,
) -> Result<f64> {
    let e_o = forget_orig.mean();
    let u_o = retain_orig.mean();
    if e_o == 0.0 || u_o == 0.0 {
        return Err(UcanError::Numeric(
            "tradeoff_at_10 undefined: a reference-side mean is zero".into(),
        ));
    }
    let forget_gain = (e_o - forget_new.mean()) / e_o;
    let utility_loss = (u_o - retain_new.mean()) / u_o;
    Ok(100.0 * (forget_gain - utility_loss))
}

/// KL divergence between two floored distributions, first relative to
/// second, clamped at zero against rounding on near-identical inputs.
pub fn kl_between(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(UcanError::Shape(format!(
            "kl_between: {} vs {} support points",
            p.len(),
            q.len()
        )));
    }
    let mut sum = 0.0f64;
    for (a, b) in p.iter().zip(q) {
        let pa = a.max(PROB_FLOOR);
        let pb = b.max(PROB_FLOOR);
        let term = pa * (pa.ln() - pb.ln());
        if !term.is_finite() {
            return Err(UcanError::Numeric("kl_between: non-finite term".into()));
        }
        sum += term;
    }
    Ok(sum.max(0.0))
}

fn batched_probs(model: &AdapterModel, batch: &TokenBatch) -> Result<Vec<f64>> {
    let logits = model.forward(batch)?;
    Ok(softmax_rows(&logits, batch.rows, model.n_items as usize))
}

/// Mean KL of the original model's next-item distribution from the
/// unlearned model's, over all queries, full item vocabulary.
pub fn kl_divergence(
    original: &AdapterModel,
    unlearned: &AdapterModel,
    batches: &[TokenBatch],
) -> Result<f64> {
    if original.n_items != unlearned.n_items {
        return Err(UcanError::Shape("kl_divergence: item vocabularies differ".into()));
    }
    let n = original.n_items as usize;
    let mut total = 0.0f64;
    let mut rows = 0usize;
    for batch in batches {
        let po = batched_probs(original, batch)?;
        let pu = batched_probs(unlearned, batch)?;
        for r in 0..batch.rows {
            total += kl_between(&po[r * n..(r + 1) * n], &pu[r * n..(r + 1) * n])?;
        }
        rows += batch.rows;
    }
    if rows == 0 {
        return Err(UcanError::Data("kl_divergence: no queries".into()));
    }
    Ok(total / rows as f64)
}

/// Percent of rows whose top-1 item differs between two logit sets.
pub fn shift_from_logits(
    logits_o: &[f32],
    logits_u: &[f32],
    rows: usize,
    n: usize,
) -> Result<f64> {
    if rows == 0 {
        return Err(UcanError::Data("prediction shift needs at least one query".into()));
    }
    if logits_o.len() != rows * n || logits_u.len() != rows * n {
        return Err(UcanError::Shape("shift_from_logits: bad logit shape".into()));
    }
    let mut changed = 0usize;
    for r in 0..rows {
        let a = argmax_item(&logits_o[r * n..(r + 1) * n]);
        let b = argmax_item(&logits_u[r * n..(r + 1) * n]);
        if a != b {
            changed += 1;
        }
    }
    Ok(100.0 * changed as f64 / rows as f64)
}

/// Percent of queries whose top-1 recommendation changes between models.
pub fn prediction_shift(
    original: &AdapterModel,
    unlearned: &AdapterModel,
    batches: &[TokenBatch],
) -> Result<f64> {
    let n = original.n_items as usize;
    let mut changed = 0usize;
    let mut rows = 0usize;
    for batch in batches {
        let lo = original.forward(batch)?;
        let lu = unlearned.forward(batch)?;
        for r in 0..batch.rows {
            let a = argmax_item(&lo[r * n..(r + 1) * n]);
            let b = argmax_item(&lu[r * n..(r + 1) * n]);
            if a != b {
                changed += 1;
            }
        }
        rows += batch.rows;
    }
    if rows == 0 {
        return Err(UcanError::Data("prediction_shift: no queries".into()));
    }
    Ok(100.0 * changed as f64 / rows as f64)
}

/// Perplexity from ground-truth probabilities: exp of the mean negative
/// log-probability.
pub fn ppl_from_probs(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(UcanError::Data("perplexity: no queries".into()));
    }
    let mean: f64 =
        probs.iter().map(|p| -(p.max(PROB_FLOOR).ln())).sum::<f64>() / probs.len() as f64;
    Ok(mean.exp())
}

/// Perplexity of the model on the ground-truth items of the batches.
pub fn perplexity(model: &AdapterModel, batches: &[TokenBatch]) -> Result<f64> {
    let n = model.n_items as usize;
    let mut truth_probs = Vec::new();
    for batch in batches {
        let probs = batched_probs(model, batch)?;
        for r in 0..batch.rows {
            truth_probs.push(probs[r * n + batch.targets[r] as usize]);
        }
    }
    ppl_from_probs(&truth_probs)
}

/// Wall clock, throughput, and gradient-op accounting for one strategy
/// invocation.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RunMeasurement {
    pub wall_clock_s: f64,
    pub throughput_samples_per_s: f64,
    pub gradient_op_count: u64,
}

/// Samples per second with a guard against a zero-length clock interval.
pub fn throughput(samples: u64, wall_clock_s: f64) -> f64 {
    samples as f64 / wall_clock_s.max(1e-9)
}

/// Runs a strategy against the model, capturing wall clock and the change
/// of the gradient-op counter. `samples` declares the processed volume.
pub fn measure_run<T>(
    model: &mut AdapterModel,
    samples: u64,
    f: impl FnOnce(&mut AdapterModel) -> Result<T>,
) -> Result<(T, RunMeasurement)> {
    let grads_before = model.grad_ops;
    let start = Instant::now();
    let out = f(model)?;
    let wall = start.elapsed().as_secs_f64();
    Ok((
        out,
        RunMeasurement {
            wall_clock_s: wall,
            throughput_samples_per_s: throughput(samples, wall),
            gradient_op_count: model.grad_ops - grads_before,
        },
    ))
}

/// Full seven-metric report for one (method, dataset, seed) run.
/// Serialized field order is the stable JSON key order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub forget: SideMetrics,
    pub retain: SideMetrics,
    pub tradeoff_at_10: f64,
    pub kl: f64,
    pub pred_shift_pct: f64,
    pub ppl: f64,
    pub wall_clock_s: f64,
    pub throughput_samples_per_s: f64,
    pub gradient_op_count: u64,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.tradeoff_at_10,
            self.kl,
            self.pred_shift_pct,
            self.ppl,
            self.wall_clock_s,
            self.throughput_samples_per_s,
            self.forget.at5.recall,
            self.forget.at10.recall,
            self.retain.at5.recall,
            self.retain.at10.recall,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(UcanError::Numeric("report holds a non-finite metric".into()));
        }
        if !(0.0..=100.0).contains(&self.pred_shift_pct) {
            return Err(UcanError::Numeric("prediction shift outside [0, 100]".into()));
        }
        if self.kl < 0.0 {
            return Err(UcanError::Numeric("negative divergence".into()));
        }
        if self.ppl < 1.0 {
            return Err(UcanError::Numeric("perplexity below 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| UcanError::Data(format!("report serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<EvalReport> {
        serde_json::from_str(text)
            .map_err(|e| UcanError::Parse { line: 0, msg: format!("bad report JSON: {e}") })
    }

    pub fn csv_header() -> &'static str {
        "schema_version,method,dataset,seed,\
         forget_recall5,forget_mrr5,forget_ndcg5,forget_recall10,forget_mrr10,forget_ndcg10,\
         retain_recall5,retain_mrr5,retain_ndcg5,retain_recall10,retain_mrr10,retain_ndcg10,\
         tradeoff_at_10,kl,pred_shift_pct,ppl,wall_clock_s,throughput_samples_per_s,\
         gradient_op_count"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.schema_version,
            self.method,
            self.dataset,
            self.seed,
            self.forget.at5.recall,
            self.forget.at5.mrr,
            self.forget.at5.ndcg,
            self.forget.at10.recall,
            self.forget.at10.mrr,
            self.forget.at10.ndcg,
            self.retain.at5.recall,
            self.retain.at5.mrr,
            self.retain.at5.ndcg,
            self.retain.at10.recall,
            self.retain.at10.mrr,
            self.retain.at10.ndcg,
            self.tradeoff_at_10,
            self.kl,
            self.pred_shift_pct,
            self.ppl,
            self.wall_clock_s,
            self.throughput_samples_per_s,
            self.gradient_op_count
        )
    }
}

/// Queries and batching shared by a full evaluation.
pub struct EvalInputs<'a> {
    pub forget_queries: &'a [(Vec<ItemId>, ItemId)],
    pub retain_queries: &'a [(Vec<ItemId>, ItemId)],
    pub tmpl: &'a TemplateSpec,
    pub batch_size: usize,
}

/// Truth ranks of a model over a query list.
pub fn ranks_for_queries(
    model: &AdapterModel,
    queries: &[(Vec<ItemId>, ItemId)],
    tmpl: &TemplateSpec,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let n = model.n_items as usize;
    let mut ranks = Vec::with_capacity(queries.len());
    for batch in templatize_chunked(queries, tmpl, model.n_items, batch_size)? {
        let logits = model.forward(&batch)?;
        for r in 0..batch.rows {
            ranks.push(rank_of(&logits[r * n..(r + 1) * n], batch.targets[r]));
        }
    }
    Ok(ranks)
}

/// Ranking metrics at cutoffs 5 and 10 over a query list.
pub fn side_metrics(
    model: &AdapterModel,
    queries: &[(Vec<ItemId>, ItemId)],
    tmpl: &TemplateSpec,
    batch_size: usize,
) -> Result<SideMetrics> {
    let ranks = ranks_for_queries(model, queries, tmpl, batch_size)?;
    Ok(SideMetrics {
        at5: RankingMetrics::at_k(&ranks, 5)?,
        at10: RankingMetrics::at_k(&ranks, 10)?,
    })
}

/// Builds the full report for an (original, unlearned) model pair.
/// Divergence, shift, and perplexity run over the forget queries.
pub fn evaluate_pair(
    original: &AdapterModel,
    unlearned: &AdapterModel,
    inputs: &EvalInputs,
    method: &str,
    dataset: &str,
    seed: u64,
    run: RunMeasurement,
) -> Result<EvalReport> {
    let forget_o = side_metrics(original, inputs.forget_queries, inputs.tmpl, inputs.batch_size)?;
    let retain_o = side_metrics(original, inputs.retain_queries, inputs.tmpl, inputs.batch_size)?;
    let forget_u = side_metrics(unlearned, inputs.forget_queries, inputs.tmpl, inputs.batch_size)?;
    let retain_u = side_metrics(unlearned, inputs.retain_queries, inputs.tmpl, inputs.batch_size)?;
    let forget_batches = templatize_chunked(
        inputs.forget_queries,
        inputs.tmpl,
        original.n_items,
        inputs.batch_size,
    )?;
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: method.to_string(),
        dataset: dataset.to_string(),
        seed,
        forget: forget_u,
        retain: retain_u,
        tradeoff_at_10: tradeoff_at_10(
            &forget_o.at10,
            &retain_o.at10,
            &forget_u.at10,
            &retain_u.at10,
        )?,
        kl: kl_divergence(original, unlearned, &forget_batches)?,
        pred_shift_pct: prediction_shift(original, unlearned, &forget_batches)?,
        ppl: perplexity(unlearned, &forget_batches)?,
        wall_clock_s: run.wall_clock_s,
        throughput_samples_per_s: run.throughput_samples_per_s,
        gradient_op_count: run.gradient_op_count,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelHyper;
    use crate::tensor::Matrix;

    #[test]
    fn rank_breaks_ties_toward_the_lower_id() {
        let scores = vec![0.5, 0.9, 0.5, 0.1];
        assert_eq!(rank_of(&scores, 1), 1);
        assert_eq!(rank_of(&scores, 0), 2);
        assert_eq!(rank_of(&scores, 2), 3, "id 2 loses the tie against id 0");
        assert_eq!(rank_of(&scores, 3), 4);
        assert_eq!(top_k(&scores, 3), vec![1, 0, 2]);
        assert_eq!(argmax_item(&scores), 1);
        assert_eq!(argmax_item(&[0.7, 0.7, 0.1]), 0);
    }

    #[test]
    fn ranking_metric_hand_values() {
        // truth at rank 1
        assert_eq!(recall_at_k(&[1], 10).unwrap(), 1.0);
        assert_eq!(mrr_at_k(&[1], 10).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[1], 10).unwrap(), 1.0);
        // truth at rank 3, cutoff 10
        assert_eq!(recall_at_k(&[3], 10).unwrap(), 1.0);
        assert!((mrr_at_k(&[3], 10).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&[3], 10).unwrap(), 0.5);
        // truth outside the cutoff
        assert_eq!(recall_at_k(&[11], 10).unwrap(), 0.0);
        assert_eq!(mrr_at_k(&[11], 10).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&[11], 10).unwrap(), 0.0);
        // averaging over queries
        assert_eq!(recall_at_k(&[1, 11], 10).unwrap(), 0.5);
        // degenerate inputs
        assert!(recall_at_k(&[], 10).is_err());
        assert!(recall_at_k(&[1], 0).is_err());
    }

    #[test]
    fn ranks_are_invariant_under_monotone_score_transforms() {
        let scores: Vec<f32> = vec![2.0, -1.0, 0.5, 3.0, 0.5, -2.5];
        let transformed: Vec<f32> = scores.iter().map(|s| s * 0.5 + 3.0).collect();
        for t in 0..scores.len() {
            assert_eq!(rank_of(&scores, t as u32), rank_of(&transformed, t as u32));
        }
        assert_eq!(top_k(&scores, 6), top_k(&transformed, 6));
    }

    fn rmn(r: f64, m: f64, n: f64) -> RankingMetrics {
        RankingMetrics { recall: r, mrr: m, ndcg: n }
    }

    /// Hand-tabulated interaction rows whose composite scores were worked
    /// out independently on paper; frozen here as regression anchors.
    #[test]
    fn tradeoff_reproduces_hand_tabulated_rows() {
        let dense_fo = rmn(0.2381, 0.0811, 0.1176);
        let dense_ro = rmn(0.1180, 0.0456, 0.0623);
        let cases = [
            (rmn(0.1999, 0.0602, 0.0926), rmn(0.1131, 0.0422, 0.0586), 13.9416),
            (rmn(0.1714, 0.0449, 0.0741), rmn(0.1032, 0.0354, 0.0511), 17.4917),
            (rmn(0.1435, 0.0408, 0.0639), rmn(0.1098, 0.0337, 0.0514), 29.4548),
        ];
        for (fu, ru, expect) in cases {
            let got = tradeoff_at_10(&dense_fo, &dense_ro, &fu, &ru).unwrap();
            assert!((got - expect).abs() < 0.05, "dense rows: got {got}, expected {expect}");
        }

        let sparse_fo = rmn(0.0416, 0.0168, 0.0226);
        let sparse_ro = rmn(0.0464, 0.0193, 0.0257);
        let cases = [
            (rmn(0.0416, 0.0168, 0.0226), rmn(0.0416, 0.0123, 0.0158), -23.7418),
            (rmn(0.0416, 0.0168, 0.0226), rmn(0.0416, 0.0123, 0.0157), -23.8512),
            (rmn(0.0347, 0.0154, 0.0201), rmn(0.0406, 0.0128, 0.0193), -7.1262),
            (rmn(0.0356, 0.0131, 0.0184), rmn(0.0469, 0.0177, 0.0245), 14.6441),
        ];
        for (fu, ru, expect) in cases {
            let got = tradeoff_at_10(&sparse_fo, &sparse_ro, &fu, &ru).unwrap();
            assert!((got - expect).abs() < 0.05, "sparse rows: got {got}, expected {expect}");
        }
    }

    #[test]
    fn tradeoff_identity_and_undefined_cases() {
        let m = rmn(0.2, 0.1, 0.15);
        let u = rmn(0.3, 0.2, 0.25);
        assert_eq!(tradeoff_at_10(&m, &u, &m, &u).unwrap(), 0.0);
        let zero = rmn(0.0, 0.0, 0.0);
        assert!(tradeoff_at_10(&zero, &u, &m, &u).is_err());
        assert!(tradeoff_at_10(&m, &zero, &m, &u).is_err());
    }

    #[test]
    fn kl_hand_values() {
        // identical distributions
        let p = vec![0.3, 0.7];
        assert_eq!(kl_between(&p, &p).unwrap(), 0.0);
        // a one-hot against uniform collapses to ~ln 2 after flooring
        let hot = vec![1.0 - PROB_FLOOR, PROB_FLOOR];
        let uniform = vec![0.5, 0.5];
        let got = kl_between(&hot, &uniform).unwrap();
        assert!((got - std::f64::consts::LN_2).abs() < 1e-3, "{got}");
        // direction matters
        let a = vec![0.9, 0.1];
        let b = vec![0.5, 0.5];
        let ab = kl_between(&a, &b).unwrap();
        let ba = kl_between(&b, &a).unwrap();
        assert!((ab - 0.368_064_2).abs() < 1e-6, "{ab}");
        assert!((ba - 0.510_825_6).abs() < 1e-6, "{ba}");
        assert!((ab - ba).abs() > 0.1);
    }

    #[test]
    fn perplexity_hand_values() {
        assert_eq!(ppl_from_probs(&[1.0, 1.0]).unwrap(), 1.0);
        let got = ppl_from_probs(&[0.5, 0.25]).unwrap();
        assert!((got - 2.0 * 2.0f64.sqrt()).abs() < 1e-12, "{got}");
        assert!(ppl_from_probs(&[]).is_err());
    }

    #[test]
    fn shift_hand_values() {
        // two queries over three items, one argmax flipped
        let lo = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let lu = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(shift_from_logits(&lo, &lo, 2, 3).unwrap(), 0.0);
        assert_eq!(shift_from_logits(&lo, &lu, 2, 3).unwrap(), 50.0);
        let flipped = vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(shift_from_logits(&lo, &flipped, 2, 3).unwrap(), 100.0);
        assert!(shift_from_logits(&[], &[], 0, 3).is_err());
    }

    fn toy_model(seed: u64, n_items: u32) -> AdapterModel {
        let hyper = ModelHyper { embed_dim: 4, hidden_dim: 5, rank: 2, w0_scale: 1.0 };
        AdapterModel::init(n_items, 4, &hyper, seed)
    }

    fn toy_batches(model: &AdapterModel, tmpl: &TemplateSpec) -> Vec<TokenBatch> {
        let queries: Vec<(Vec<u32>, u32)> =
            vec![(vec![0, 1], 2), (vec![3], 4), (vec![5, 6, 0], 1)];
        templatize_chunked(&queries, tmpl, model.n_items, 2).unwrap()
    }

    #[test]
    fn model_level_metrics_on_identical_and_uniform_models() {
        let tmpl = TemplateSpec { n_reserved: 4, prefix: vec![1, 2], max_len: 6 };
        let model = toy_model(3, 7);
        let batches = toy_batches(&model, &tmpl);
        assert_eq!(kl_divergence(&model, &model, &batches).unwrap(), 0.0);
        assert_eq!(prediction_shift(&model, &model, &batches).unwrap(), 0.0);

        // zeroed head scores every item equally: perplexity = vocab size
        let mut uniform = toy_model(3, 7);
        uniform.head = Matrix::zeros(uniform.head.rows, uniform.head.cols);
        let ppl = perplexity(&uniform, &batches).unwrap();
        assert!((ppl - 7.0).abs() < 1e-9, "{ppl}");

        // negating the head reverses every preference order
        let mut negated = model.clone();
        for v in &mut negated.head.data {
            *v = -*v;
        }
        let shift = prediction_shift(&model, &negated, &batches).unwrap();
        assert!(shift > 0.0);
        assert!(kl_divergence(&model, &negated, &batches).unwrap() > 0.0);
    }

    #[test]
    fn measure_run_counts_grads_and_throughput() {
        assert_eq!(throughput(100, 2.0), 50.0);
        let mut model = toy_model(5, 7);
        let (_, m) = measure_run(&mut model, 10, |m| {
            let tmpl = TemplateSpec { n_reserved: 4, prefix: vec![1], max_len: 4 };
            let b = &toy_batches(m, &tmpl)[0];
            m.forward(b).map(|_| ())
        })
        .unwrap();
        assert_eq!(m.gradient_op_count, 0);
        assert!(m.wall_clock_s >= 0.0);
        assert!(m.throughput_samples_per_s > 0.0);
    }

    fn sample_report() -> EvalReport {
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            method: "soft".into(),
            dataset: "synthetic".into(),
            seed: 7,
            forget: SideMetrics::default(),
            retain: SideMetrics::default(),
            tradeoff_at_10: 10.0,
            kl: 0.5,
            pred_shift_pct: 40.0,
            ppl: 25.0,
            wall_clock_s: 0.25,
            throughput_samples_per_s: 400.0,
            gradient_op_count: 0,
        }
    }

    #[test]
    fn report_json_round_trips_with_stable_key_order() {
        let report = sample_report();
        let json = report.to_json().unwrap();
        let keys = [
            "\"schema_version\"",
            "\"method\"",
            "\"dataset\"",
            "\"seed\"",
            "\"forget\"",
            "\"retain\"",
            "\"tradeoff_at_10\"",
            "\"kl\"",
            "\"pred_shift_pct\"",
            "\"ppl\"",
            "\"wall_clock_s\"",
            "\"throughput_samples_per_s\"",
            "\"gradient_op_count\"",
        ];
        let mut last = 0;
        for k in keys {
            let at = json.find(k).unwrap_or_else(|| panic!("missing key {k}"));
            assert!(at > last || last == 0, "key {k} out of order");
            last = at;
        }
        let back = EvalReport::from_json(&json).unwrap();
        assert_eq!(back.method, "soft");
        assert_eq!(back.tradeoff_at_10, 10.0);
    }

    #[test]
    fn report_csv_row_width_matches_the_header() {
        let report = sample_report();
        let header_fields = EvalReport::csv_header().split(',').count();
        let row_fields = report.csv_row().split(',').count();
        assert_eq!(header_fields, row_fields);
        assert_eq!(header_fields, 23);
    }

    #[test]
    fn report_validation_rejects_broken_metrics() {
        let mut r = sample_report();
        r.kl = -0.1;
        assert!(r.validate().is_err());
        let mut r = sample_report();
        r.ppl = 0.5;
        assert!(r.validate().is_err());
        let mut r = sample_report();
        r.pred_shift_pct = 101.0;
        assert!(r.validate().is_err());
        let mut r = sample_report();
        r.tradeoff_at_10 = f64::NAN;
        assert!(r.validate().is_err());
        assert!(sample_report().validate().is_ok());
    }
}
