//! Streaming activation statistics split by forget/retain side.
//!
//! One forward pass per side is enough: per-row masked means feed the
//! side averages, and squared activations accumulate into a running
//! per-dimension sum whose square root approximates the column norms of
//! the layer-input matrix. All accumulation is f64 and row-ordered, so
//! batch partitioning and shard merging leave results unchanged.

use crate::data::TokenBatch;
use crate::error::UcanError;
use crate::model::{ActivationCapture, AdapterModel};
use crate::Result;

/// Running sums for one adapter layer's input dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSummary {
    pub d_in: usize,
    /// Sum over forget rows of per-row masked mean activations.
    pub sum_forget: Vec<f64>,
    /// Sum over retain rows of per-row masked mean activations.
    pub sum_retain: Vec<f64>,
    /// Sum over retain mask-1 tokens of squared activations.
    pub sq_retain: Vec<f64>,
}

impl LayerSummary {
    fn new(d_in: usize) -> Self {
        LayerSummary {
            d_in,
            sum_forget: vec![0.0; d_in],
            sum_retain: vec![0.0; d_in],
            sq_retain: vec![0.0; d_in],
        }
    }
}

/// Side tag for accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatSide {
    Forget,
    Retain,
}

/// Full streaming state across layers, mergeable across shards.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSummary {
    pub layers: Vec<LayerSummary>,
    pub n_forget_rows: u64,
    pub n_retain_rows: u64,
}

impl ActivationSummary {
    pub fn new(layer_dims: &[usize]) -> Self {
        ActivationSummary {
            layers: layer_dims.iter().map(|d| LayerSummary::new(*d)).collect(),
            n_forget_rows: 0,
            n_retain_rows: 0,
        }
    }

    pub fn for_model(model: &AdapterModel) -> Self {
        let dims: Vec<usize> = model.layers.iter().map(|l| l.d_in()).collect();
        ActivationSummary::new(&dims)
    }

    /// Mean forget-side activation per dimension of `layer`.
    pub fn v_forget(&self, layer: usize) -> Result<Vec<f64>> {
        if self.n_forget_rows == 0 {
            return Err(UcanError::Data("no forget rows accumulated".into()));
        }
        Ok(self.layers[layer]
            .sum_forget
            .iter()
            .map(|s| s / self.n_forget_rows as f64)
            .collect())
    }

    /// Mean retain-side activation per dimension of `layer`.
    pub fn v_retain(&self, layer: usize) -> Result<Vec<f64>> {
        if self.n_retain_rows == 0 {
            return Err(UcanError::Data("no retain rows accumulated".into()));
        }
        Ok(self.layers[layer]
            .sum_retain
            .iter()
            .map(|s| s / self.n_retain_rows as f64)
            .collect())
    }

    /// Column-norm estimate `sqrt(S_j + eps)` for `layer`.
    pub fn finalize_norm(&self, layer: usize, eps: f64) -> Vec<f64> {
        self.layers[layer].sq_retain.iter().map(|s| (s + eps).sqrt()).collect()
    }

    /// Adds another shard's sums into this one. Shapes must agree.
    pub fn merge(&mut self, other: &ActivationSummary) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || self
                .layers
                .iter()
                .zip(&other.layers)
                .any(|(a, b)| a.d_in != b.d_in)
        {
            return Err(UcanError::Shape("summary shards disagree on layer dims".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.sum_forget.iter_mut().zip(&b.sum_forget) {
                *x += y;
            }
            for (x, y) in a.sum_retain.iter_mut().zip(&b.sum_retain) {
                *x += y;
            }
            for (x, y) in a.sq_retain.iter_mut().zip(&b.sq_retain) {
                *x += y;
            }
        }
        self.n_forget_rows += other.n_forget_rows;
        self.n_retain_rows += other.n_retain_rows;
        Ok(())
    }
}

/// Per-layer, per-row masked mean of captured activations: for each row,
/// the f64 mean over mask-1 positions. Rows with an all-zero mask violate
/// the batch contract and error.
pub fn masked_mean(
    capture: &ActivationCapture,
    batch: &TokenBatch,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if capture.rows != batch.rows || capture.cols != batch.cols {
        return Err(UcanError::Shape(format!(
            "capture {}x{} disagrees with batch {}x{}",
            capture.rows, capture.cols, batch.rows, batch.cols
        )));
    }
    let mut out = Vec::with_capacity(capture.layers.len());
    for (li, lc) in capture.layers.iter().enumerate() {
        let mut rows = Vec::with_capacity(capture.rows);
        for row in 0..capture.rows {
            let mut sum = vec![0.0f64; lc.d_in];
            let mut count = 0u64;
            for col in 0..capture.cols {
                if !batch.masked(row, col) {
                    continue;
                }
                for (s, v) in sum.iter_mut().zip(capture.at(li, row, col)) {
                    *s += *v as f64;
                }
                count += 1;
            }
            if count == 0 {
                return Err(UcanError::Data(format!("row {row} has an all-zero mask")));
            }
            for s in &mut sum {
                *s /= count as f64;
            }
            rows.push(sum);
        }
        out.push(rows);
    }
    Ok(out)
}

/// Folds per-row masked means into the side sums. Row counts advance once
/// per row regardless of layer count.
pub fn accumulate_side(
    summary: &mut ActivationSummary,
    means: &[Vec<Vec<f64>>],
    side: StatSide,
) -> Result<()> {
    if means.len() != summary.layers.len() {
        return Err(UcanError::Shape("layer count mismatch in accumulate_side".into()));
    }
    let rows = means.first().map(|m| m.len()).unwrap_or(0);
    for (layer, layer_means) in summary.layers.iter_mut().zip(means) {
        if layer_means.len() != rows {
            return Err(UcanError::Shape("row count differs across layers".into()));
        }
        let target = match side {
            StatSide::Forget => &mut layer.sum_forget,
            StatSide::Retain => &mut layer.sum_retain,
        };
        for mean in layer_means {
            if mean.len() != layer.d_in {
                return Err(UcanError::Shape("mean width disagrees with layer".into()));
            }
            for (t, v) in target.iter_mut().zip(mean) {
                *t += v;
            }
        }
    }
    match side {
        StatSide::Forget => summary.n_forget_rows += rows as u64,
        StatSide::Retain => summary.n_retain_rows += rows as u64,
    }
    Ok(())
}

/// Adds squared activations of every mask-1 token into the running
/// column-norm accumulator.
pub fn accumulate_sq(
    summary: &mut ActivationSummary,
    capture: &ActivationCapture,
    batch: &TokenBatch,
) -> Result<()> {
    if capture.layers.len() != summary.layers.len() {
        return Err(UcanError::Shape("layer count mismatch in accumulate_sq".into()));
    }
    for (li, layer) in summary.layers.iter_mut().enumerate() {
        if capture.layers[li].d_in != layer.d_in {
            return Err(UcanError::Shape("capture width disagrees with summary".into()));
        }
        for row in 0..capture.rows {
            for col in 0..capture.cols {
                if !batch.masked(row, col) {
                    continue;
                }
                for (s, v) in layer.sq_retain.iter_mut().zip(capture.at(li, row, col)) {
                    *s += (*v as f64) * (*v as f64);
                }
            }
        }
    }
    Ok(())
}

/// One streaming pass over both sides: forget batches feed the forget
/// means; retain batches feed the retain means and the squared-activation
/// accumulator. Both sides must be non-empty.
pub fn collect_summary(
    model: &AdapterModel,
    forget_batches: &[TokenBatch],
    retain_batches: &[TokenBatch],
) -> Result<ActivationSummary> {
    let mut summary = ActivationSummary::for_model(model);
    for batch in forget_batches {
        let (_, cap) = model.forward_captured(batch)?;
        let means = masked_mean(&cap, batch)?;
        accumulate_side(&mut summary, &means, StatSide::Forget)?;
    }
    for batch in retain_batches {
        let (_, cap) = model.forward_captured(batch)?;
        let means = masked_mean(&cap, batch)?;
        accumulate_side(&mut summary, &means, StatSide::Retain)?;
        accumulate_sq(&mut summary, &cap, batch)?;
    }
    if summary.n_forget_rows == 0 {
        return Err(UcanError::Data("collect_summary: no forget rows".into()));
    }
    if summary.n_retain_rows == 0 {
        return Err(UcanError::Data("collect_summary: no retain rows".into()));
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelHyper;
    use crate::data::{templatize_chunked, TemplateSpec};
    use crate::model::LayerCapture;

    fn hand_capture() -> (ActivationCapture, TokenBatch) {
        // 2 rows x 3 cols, one layer of width 2. Values chosen so masked
        // means are easy: row 0 masks cols 0 and 2.
        let capture = ActivationCapture {
            rows: 2,
            cols: 3,
            layers: vec![LayerCapture {
                d_in: 2,
                data: vec![
                    1.0, 2.0, /* row0 col1 (masked out) */ 9.0, 9.0, 3.0, 6.0, // row 0
                    0.5, 1.0, 1.5, 2.0, /* row1 col2 */ 7.0, 7.0, // row 1
                ],
            }],
        };
        let batch = TokenBatch {
            rows: 2,
            cols: 3,
            tokens: vec![0; 6],
            mask: vec![1, 0, 1, 1, 1, 0],
            targets: vec![0, 0],
        };
        (capture, batch)
    }

    #[test]
    fn masked_mean_averages_only_masked_positions() {
        let (capture, batch) = hand_capture();
        let means = masked_mean(&capture, &batch).unwrap();
        assert_eq!(means[0][0], vec![2.0, 4.0]); // (1+3)/2, (2+6)/2
        assert_eq!(means[0][1], vec![1.0, 1.5]); // (0.5+1.5)/2, (1+2)/2
    }

    #[test]
    fn masked_mean_rejects_empty_masks_and_shape_drift() {
        let (capture, mut batch) = hand_capture();
        batch.mask = vec![0, 0, 0, 1, 1, 0];
        assert!(matches!(masked_mean(&capture, &batch), Err(UcanError::Data(_))));
        let (capture, mut batch) = hand_capture();
        batch.cols = 2;
        batch.tokens.truncate(4);
        batch.mask = vec![1, 1, 1, 1];
        assert!(matches!(masked_mean(&capture, &batch), Err(UcanError::Shape(_))));
    }

    #[test]
    fn side_sums_and_norms_follow_hand_arithmetic() {
        let (capture, batch) = hand_capture();
        let means = masked_mean(&capture, &batch).unwrap();
        let mut summary = ActivationSummary::new(&[2]);
        accumulate_side(&mut summary, &means, StatSide::Forget).unwrap();
        // two rows with means 2.0 and 1.0 -> side mean 1.5
        assert_eq!(summary.n_forget_rows, 2);
        assert_eq!(summary.v_forget(0).unwrap(), vec![1.5, 2.75]);
        assert!(summary.v_retain(0).is_err());

        accumulate_sq(&mut summary, &capture, &batch).unwrap();
        // dim 0 squares over masked tokens: 1 + 9 + 0.25 + 2.25 = 12.5
        let norms = summary.finalize_norm(0, 0.0);
        assert!((norms[0] - 12.5f64.sqrt()).abs() < 1e-12);
        // eps floors the estimate for dead dimensions
        let empty = ActivationSummary::new(&[2]);
        let floored = empty.finalize_norm(0, 1e-8);
        for v in floored {
            assert!((v - 1e-4).abs() < 1e-12, "{v}");
        }
    }

    fn toy_batches(chunk: usize) -> (AdapterModel, Vec<TokenBatch>, Vec<TokenBatch>) {
        let hyper = ModelHyper { embed_dim: 4, hidden_dim: 5, rank: 2, w0_scale: 1.0 };
        let mut model = AdapterModel::init(8, 4, &hyper, 99);
        // give the adapters some effect
        for layer in &mut model.layers {
            for (i, v) in layer.w_b.data.iter_mut().enumerate() {
                *v = 0.05 * (i as f32 % 3.0 - 1.0);
            }
        }
        let tmpl = TemplateSpec { n_reserved: 4, prefix: vec![1, 2], max_len: 8 };
        let forget_rows: Vec<(Vec<u32>, u32)> = vec![
            (vec![6, 7], 0),
            (vec![7, 6, 7], 0),
            (vec![6], 0),
        ];
        let retain_rows: Vec<(Vec<u32>, u32)> = vec![
            (vec![0, 1, 2], 0),
            (vec![2, 3], 0),
            (vec![1, 0, 3, 2], 0),
            (vec![3], 0),
        ];
        let f = templatize_chunked(&forget_rows, &tmpl, 8, chunk).unwrap();
        let r = templatize_chunked(&retain_rows, &tmpl, 8, chunk).unwrap();
        (model, f, r)
    }

    /// Materialized oracle: captures everything, then computes the three
    /// statistics directly from the stacked activations.
    fn materialized_summary(
        model: &AdapterModel,
        forget: &[TokenBatch],
        retain: &[TokenBatch],
    ) -> ActivationSummary {
        let mut summary = ActivationSummary::for_model(model);
        for (side, batches) in [(StatSide::Forget, forget), (StatSide::Retain, retain)] {
            for batch in batches {
                let (_, cap) = model.forward_captured(batch).unwrap();
                for li in 0..cap.layers.len() {
                    for row in 0..batch.rows {
                        let cols: Vec<&[f32]> = (0..batch.cols)
                            .filter(|c| batch.masked(row, *c))
                            .map(|c| cap.at(li, row, c))
                            .collect();
                        let d = cap.layers[li].d_in;
                        for j in 0..d {
                            let mean: f64 = cols.iter().map(|v| v[j] as f64).sum::<f64>()
                                / cols.len() as f64;
                            match side {
                                StatSide::Forget => summary.layers[li].sum_forget[j] += mean,
                                StatSide::Retain => {
                                    summary.layers[li].sum_retain[j] += mean;
                                }
                            }
                            if side == StatSide::Retain {
                                summary.layers[li].sq_retain[j] += cols
                                    .iter()
                                    .map(|v| (v[j] as f64) * (v[j] as f64))
                                    .sum::<f64>();
                            }
                        }
                    }
                }
                match side {
                    StatSide::Forget => summary.n_forget_rows += batch.rows as u64,
                    StatSide::Retain => summary.n_retain_rows += batch.rows as u64,
                }
            }
        }
        summary
    }

    #[test]
    fn streaming_matches_the_materialized_oracle() {
        let (model, f, r) = toy_batches(2);
        let streamed = collect_summary(&model, &f, &r).unwrap();
        let oracle = materialized_summary(&model, &f, &r);
        assert_eq!(streamed.n_forget_rows, oracle.n_forget_rows);
        for li in 0..streamed.layers.len() {
            for j in 0..streamed.layers[li].d_in {
                let a = streamed.layers[li].sum_forget[j];
                let b = oracle.layers[li].sum_forget[j];
                assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "forget {li}/{j}");
                let a = streamed.layers[li].sq_retain[j];
                let b = oracle.layers[li].sq_retain[j];
                assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "sq {li}/{j}");
            }
        }
    }

    #[test]
    fn batch_partitioning_does_not_move_the_statistics() {
        let (model, f1, r1) = toy_batches(1);
        let (_, f3, r3) = toy_batches(3);
        let a = collect_summary(&model, &f1, &r1).unwrap();
        let b = collect_summary(&model, &f3, &r3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shard_merge_equals_single_pass() {
        let (model, f, r) = toy_batches(1);
        let whole = collect_summary(&model, &f, &r).unwrap();
        let mut left = collect_summary(&model, &f[..1], &r[..2]).unwrap();
        let right = collect_summary(&model, &f[1..], &r[2..]).unwrap();
        left.merge(&right).unwrap();
        assert_eq!(left, whole);

        let incompatible = ActivationSummary::new(&[3, 3]);
        assert!(left.merge(&incompatible).is_err());
    }

    #[test]
    fn collect_requires_both_sides() {
        let (model, f, r) = toy_batches(2);
        assert!(collect_summary(&model, &[], &r).is_err());
        assert!(collect_summary(&model, &f, &[]).is_err());
    }
}
