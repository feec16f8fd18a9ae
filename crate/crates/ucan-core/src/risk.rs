//! Per-dimension risk scoring: contrastive activation gaps calibrated by
//! utility importance, with an optional 4-bit dequantization proxy for the
//! scored weight matrix.
//!
//! Pipeline per layer: gap = ReLU(v_f - gamma * v_r), importance =
//! mean-|column| * activation norm, both min-max normalized, fused as
//! ReLU(lambda * gap - (1 - lambda) * imp) and re-normalized to [0,1].

use crate::config::{Target, UcanConfig};
use crate::error::UcanError;
use crate::model::AdapterModel;
use crate::signals::ActivationSummary;
use crate::tensor::Matrix;
use crate::tensorio::TensorFile;
use crate::Result;

/// The 16 normal-float-4 codebook levels (ascending, includes exact zero).
pub const NF4_LEVELS: [f32; 16] = [
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0,
];

/// Largest distance between adjacent codebook levels. Any normalized value
/// sits within half this gap of its nearest level.
pub fn nf4_max_gap() -> f32 {
    let mut gap = 0.0f32;
    for w in NF4_LEVELS.windows(2) {
        gap = gap.max(w[1] - w[0]);
    }
    gap
}

/// Blockwise absmax 4-bit quantization state. Codes are packed two per
/// byte (low nibble first); the final block may be partial.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantState {
    pub rows: usize,
    pub cols: usize,
    pub block_size: usize,
    pub scales: Vec<f32>,
    pub codes: Vec<u8>,
}

fn nearest_level(x: f32) -> u8 {
    let mut best = 0usize;
    let mut best_d = f32::INFINITY;
    for (i, level) in NF4_LEVELS.iter().enumerate() {
        let d = (x - level).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best as u8
}

/// Quantizes a matrix onto the codebook with per-block absmax scales.
pub fn quantize(w: &Matrix, block_size: usize) -> Result<QuantState> {
    if block_size == 0 {
        return Err(UcanError::Config("quantize: block_size must be >= 1".into()));
    }
    if w.data.is_empty() {
        return Err(UcanError::Shape("quantize: empty matrix".into()));
    }
    if w.data.iter().any(|v| !v.is_finite()) {
        return Err(UcanError::Numeric("quantize: non-finite weight".into()));
    }
    let n = w.data.len();
    let n_blocks = n.div_ceil(block_size);
    let mut scales = Vec::with_capacity(n_blocks);
    let mut nibbles = Vec::with_capacity(n);
    for block in w.data.chunks(block_size) {
        let absmax = block.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        scales.push(absmax);
        for v in block {
            if absmax == 0.0 {
                nibbles.push(nearest_level(0.0));
            } else {
                nibbles.push(nearest_level(v / absmax));
            }
        }
    }
    let mut codes = vec![0u8; n.div_ceil(2)];
    for (i, nib) in nibbles.iter().enumerate() {
        if i % 2 == 0 {
            codes[i / 2] |= nib & 0x0f;
        } else {
            codes[i / 2] |= (nib & 0x0f) << 4;
        }
    }
    Ok(QuantState { rows: w.rows, cols: w.cols, block_size, scales, codes })
}

/// Reconstructs the weight proxy from codes and scales.
pub fn dequantize(q: &QuantState) -> Matrix {
    let n = q.rows * q.cols;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let byte = q.codes[i / 2];
        let nib = if i % 2 == 0 { byte & 0x0f } else { byte >> 4 };
        let scale = q.scales[i / q.block_size];
        data.push(scale * NF4_LEVELS[nib as usize]);
    }
    Matrix { rows: q.rows, cols: q.cols, data }
}

// ── Scoring primitives ───────────────────────────────────────────────────

/// `ReLU(v_f - gamma * v_r)` elementwise.
pub fn contrast_gap(v_f: &[f64], v_r: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if v_f.len() != v_r.len() {
        return Err(UcanError::Shape(format!(
            "contrast_gap: {} vs {} dims",
            v_f.len(),
            v_r.len()
        )));
    }
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(UcanError::Config(format!("gamma must be > 0, got {gamma}")));
    }
    Ok(v_f
        .iter()
        .zip(v_r)
        .map(|(f, r)| (f - gamma * r).max(0.0))
        .collect())
}

/// `(v - min) / (max - min + eps)`; constant input maps to all zeros, and
/// outputs always land in `[0, 1)`.
pub fn minmax_norm(v: &[f64], eps: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(UcanError::Shape("minmax_norm: empty vector".into()));
    }
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom = max - min + eps;
    Ok(v.iter().map(|x| (x - min) / denom).collect())
}

/// `r_imp[j] = mean_i |W[i,j]| * norms[j]`.
pub fn utility_importance(w: &Matrix, norms: &[f64]) -> Result<Vec<f64>> {
    if norms.len() != w.cols {
        return Err(UcanError::Shape(format!(
            "utility_importance: {} norms for {} columns",
            norms.len(),
            w.cols
        )));
    }
    Ok((0..w.cols).map(|j| w.col_l1_mean(j) * norms[j]).collect())
}

/// Fuses normalized gap and importance: layer-wise min-max of
/// `ReLU(lambda * gap - (1 - lambda) * imp)`.
pub fn fuse_risk(gap_norm: &[f64], imp_norm: &[f64], lambda: f64, eps: f64) -> Result<Vec<f64>> {
    if gap_norm.len() != imp_norm.len() {
        return Err(UcanError::Shape(format!(
            "fuse_risk: {} vs {} dims",
            gap_norm.len(),
            imp_norm.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(UcanError::Config(format!("lambda must be in [0,1], got {lambda}")));
    }
    let pre: Vec<f64> = gap_norm
        .iter()
        .zip(imp_norm)
        .map(|(g, i)| (lambda * g - (1.0 - lambda) * i).max(0.0))
        .collect();
    minmax_norm(&pre, eps)
}

// ── Layer scoring ────────────────────────────────────────────────────────

/// Scores and intermediates for one layer's input dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRisk {
    pub d_in: usize,
    /// Raw gap input before normalization. Non-negative on the standard
    /// path; the no-contrast ablation stores raw `v_f` instead.
    pub r_gap: Vec<f64>,
    pub r_imp: Vec<f64>,
    pub gap_norm: Vec<f64>,
    pub imp_norm: Vec<f64>,
    pub r_dim: Vec<f64>,
}

/// Per-layer risk scores plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskReport {
    pub layers: Vec<LayerRisk>,
    pub config: UcanConfig,
}

/// The weight matrix utility is measured on: what attenuation will scale.
fn scored_weight(model: &AdapterModel, layer: usize, config: &UcanConfig) -> Result<Matrix> {
    let delta = model.layers[layer].effective_delta()?;
    match config.target {
        Target::Adapter => Ok(delta),
        Target::Full => {
            let mut merged = model.layers[layer].w0.clone();
            for (m, d) in merged.data.iter_mut().zip(&delta.data) {
                *m += d;
            }
            Ok(merged)
        }
    }
}

/// Runs the full risk evaluation per adapter layer.
pub fn score_layers(
    model: &AdapterModel,
    summary: &ActivationSummary,
    config: &UcanConfig,
) -> Result<RiskReport> {
    config.validate()?;
    if summary.layers.len() != model.layers.len() {
        return Err(UcanError::Shape(format!(
            "summary has {} layers, model has {}",
            summary.layers.len(),
            model.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for (li, layer) in model.layers.iter().enumerate() {
        if summary.layers[li].d_in != layer.d_in() {
            return Err(UcanError::Shape(format!(
                "summary layer {li} width {} disagrees with model {}",
                summary.layers[li].d_in,
                layer.d_in()
            )));
        }
        let v_f = summary.v_forget(li)?;
        let v_r = summary.v_retain(li)?;
        let norms = summary.finalize_norm(li, config.eps);

        let mut w = scored_weight(model, li, config)?;
        if config.quant_proxy {
            w = dequantize(&quantize(&w, config.quant_block)?);
        }
        let r_imp = utility_importance(&w, &norms)?;

        let (r_gap, gap_norm) = if config.ablation.no_contrast {
            (v_f.clone(), minmax_norm(&v_f, config.eps)?)
        } else {
            let gap = contrast_gap(&v_f, &v_r, config.gamma)?;
            let norm = minmax_norm(&gap, config.eps)?;
            (gap, norm)
        };
        let imp_norm = if config.ablation.no_utility {
            vec![0.0; r_imp.len()]
        } else {
            minmax_norm(&r_imp, config.eps)?
        };
        let r_dim = fuse_risk(&gap_norm, &imp_norm, config.lambda, config.eps)?;

        for (name, v) in [
            ("r_gap", &r_gap),
            ("r_imp", &r_imp),
            ("gap_norm", &gap_norm),
            ("imp_norm", &imp_norm),
            ("r_dim", &r_dim),
        ] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(UcanError::Numeric(format!(
                    "non-finite {name} at layer {li}"
                )));
            }
        }
        layers.push(LayerRisk {
            d_in: layer.d_in(),
            r_gap,
            r_imp,
            gap_norm,
            imp_norm,
            r_dim,
        });
    }
    Ok(RiskReport { layers, config: *config })
}

impl RiskReport {
    /// Audit dump: per-layer score vectors plus a plain-text echo of the
    /// producing configuration in the header.
    pub fn to_tensorfile(&self) -> TensorFile {
        let mut f = TensorFile::new();
        let c = &self.config;
        let meta = [
            ("gamma", c.gamma.to_string()),
            ("lambda", c.lambda.to_string()),
            ("tau_risk", c.tau_risk.to_string()),
            ("alpha_max", c.alpha_max.to_string()),
            ("beta", c.beta.to_string()),
            ("eps", c.eps.to_string()),
            ("target", format!("{:?}", c.target).to_lowercase()),
            ("quant_proxy", c.quant_proxy.to_string()),
            ("ablation", c.ablation.tags()),
            ("n_layers", self.layers.len().to_string()),
        ];
        for (k, v) in meta {
            f.push_meta(k, v).expect("static keys");
        }
        for (li, layer) in self.layers.iter().enumerate() {
            for (name, v) in [
                ("r_gap", &layer.r_gap),
                ("r_imp", &layer.r_imp),
                ("gap_norm", &layer.gap_norm),
                ("imp_norm", &layer.imp_norm),
                ("r_dim", &layer.r_dim),
            ] {
                let data: Vec<f32> = v.iter().map(|x| *x as f32).collect();
                f.push(&format!("{name}.{li}"), vec![layer.d_in], data)
                    .expect("risk tensors are well-formed");
            }
        }
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AblationFlags, ModelHyper};
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn contrast_gap_clamps_at_zero() {
        let g = contrast_gap(&[1.0, 0.2], &[0.4, 0.8], 0.5).unwrap();
        assert_eq!(g, vec![0.8, 0.0]);
        assert!(contrast_gap(&[1.0], &[1.0, 2.0], 0.5).is_err());
        assert!(contrast_gap(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn minmax_lands_in_unit_interval_and_zeroes_constants() {
        let v = minmax_norm(&[2.0, 4.0, 6.0], 1e-8).unwrap();
        assert!((v[0] - 0.0).abs() < 1e-12);
        assert!((v[1] - 0.5).abs() < 1e-8);
        assert!(v[2] < 1.0 && v[2] > 0.999999);
        assert_eq!(minmax_norm(&[3.0, 3.0, 3.0], 1e-8).unwrap(), vec![0.0; 3]);
        assert_eq!(minmax_norm(&[7.0], 1e-8).unwrap(), vec![0.0]);
        assert!(minmax_norm(&[], 1e-8).is_err());
    }

    #[test]
    fn importance_is_mean_column_magnitude_times_norm() {
        let w = Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let r = utility_importance(&w, &[2.0, 1.0]).unwrap();
        assert_eq!(r, vec![4.0, 3.0]);
        assert!(utility_importance(&w, &[1.0]).is_err());
    }

    #[test]
    fn fusion_follows_the_weighted_subtraction_spreadsheet() {
        let gap = [0.9, 0.1, 0.5];
        let imp = [0.0, 1.0, 0.5];
        let r = fuse_risk(&gap, &imp, 0.3, 0.0).unwrap();
        // pre = relu([0.27, -0.67, -0.2]) = [0.27, 0, 0]; minmax -> [1,0,0]
        assert!((r[0] - 1.0).abs() < 1e-12);
        assert_eq!(r[1], 0.0);
        assert_eq!(r[2], 0.0);
        assert!(fuse_risk(&gap, &imp[..2], 0.3, 0.0).is_err());
        assert!(fuse_risk(&gap, &imp, 1.2, 0.0).is_err());
    }

    #[test]
    fn nf4_codebook_shape() {
        assert!(NF4_LEVELS.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(NF4_LEVELS[7], 0.0);
        assert_eq!(NF4_LEVELS[0], -1.0);
        assert_eq!(NF4_LEVELS[15], 1.0);
        // widest gap sits at the negative tail
        assert!((nf4_max_gap() - (NF4_LEVELS[1] - NF4_LEVELS[0])).abs() < 1e-7);
    }

    #[test]
    fn zero_blocks_and_absmax_values_round_trip_exactly() {
        let w = Matrix::from_vec(2, 3, vec![0.0; 6]).unwrap();
        let q = quantize(&w, 4).unwrap();
        assert_eq!(dequantize(&q).data, vec![0.0; 6]);

        // absmax entries normalize to ±1, both codebook endpoints
        let w = Matrix::from_vec(1, 4, vec![0.5, -2.0, 2.0, 0.0]).unwrap();
        let q = quantize(&w, 4).unwrap();
        let back = dequantize(&q);
        assert_eq!(back.data[1], -2.0);
        assert_eq!(back.data[2], 2.0);
        assert_eq!(back.data[3], 0.0);
    }

    #[test]
    fn quantization_error_stays_within_the_codebook_bound() {
        let mut rng = substream(5, "quant");
        for trial in 0..50 {
            let n = 1 + rng.gen_range(0..130usize);
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let w = Matrix::from_vec(1, n, data).unwrap();
            let q = quantize(&w, 64).unwrap();
            let back = dequantize(&q);
            for (i, (a, b)) in w.data.iter().zip(&back.data).enumerate() {
                let scale = q.scales[i / 64];
                let bound = scale * nf4_max_gap() / 2.0 + 1e-7;
                assert!((a - b).abs() <= bound, "trial {trial} elem {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn quantize_rejects_degenerate_inputs() {
        let w = Matrix::zeros(0, 4);
        assert!(matches!(quantize(&w, 4), Err(UcanError::Shape(_))));
        let w = Matrix::from_vec(1, 2, vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(quantize(&w, 4), Err(UcanError::Numeric(_))));
        let w = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(quantize(&w, 0).is_err());
    }

    fn summary_with(
        model: &AdapterModel,
        v_f: [Vec<f64>; 2],
        v_r: [Vec<f64>; 2],
        sq: [Vec<f64>; 2],
    ) -> ActivationSummary {
        let mut s = ActivationSummary::for_model(model);
        for li in 0..2 {
            s.layers[li].sum_forget = v_f[li].clone();
            s.layers[li].sum_retain = v_r[li].clone();
            s.layers[li].sq_retain = sq[li].clone();
        }
        s.n_forget_rows = 1;
        s.n_retain_rows = 1;
        s
    }

    fn tiny_model() -> AdapterModel {
        let hyper = ModelHyper { embed_dim: 3, hidden_dim: 3, rank: 1, w0_scale: 1.0 };
        let mut m = AdapterModel::init(4, 2, &hyper, 1);
        // hand-set factors: effective delta columns have L1 means 1, 2, 3 (layer 0)
        m.layers[0].w_b = Matrix::from_vec(3, 1, vec![1.0, -1.0, 1.0]).unwrap();
        m.layers[0].w_a = Matrix::from_vec(1, 3, vec![1.0, 2.0, -3.0]).unwrap();
        m.layers[1].w_b = Matrix::from_vec(3, 1, vec![2.0, 0.0, 0.0]).unwrap();
        m.layers[1].w_a = Matrix::from_vec(1, 3, vec![0.5, 0.5, 0.5]).unwrap();
        m
    }

    #[test]
    fn score_layers_matches_a_hand_spreadsheet() {
        let model = tiny_model();
        // layer 0: v_f = [1, 0.5, 0], v_r = [0, 1, 0], S = [3, 0, 1]
        let summary = summary_with(
            &model,
            [vec![1.0, 0.5, 0.0], vec![0.0, 0.0, 0.0]],
            [vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0]],
            [vec![3.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]],
        );
        // eps tiny so hand numbers hold to ~1e-6
        let config = UcanConfig { eps: 1e-12, ..UcanConfig::default() };
        let report = score_layers(&model, &summary, &config).unwrap();
        let l0 = &report.layers[0];
        let close = |a: f64, b: f64, what: &str| {
            assert!((a - b).abs() < 1e-6, "{what}: {a} vs {b}");
        };

        // gap = relu([1 - 0, 0.5 - 0.5, 0]) = [1, 0, 0]; norm -> [1, 0, 0]
        assert_eq!(l0.r_gap, vec![1.0, 0.0, 0.0]);
        close(l0.gap_norm[0], 1.0, "gap_norm0");
        assert_eq!(l0.gap_norm[1], 0.0);
        // delta columns: |1|,|2|,|3| -> L1 means [1,2,3]; norms = sqrt(S + eps),
        // so the S = 0 dimension keeps a floor of 2 * sqrt(1e-12)
        let n0 = 3.0f64.sqrt();
        close(l0.r_imp[0], n0, "r_imp0");
        close(l0.r_imp[1], 2e-6, "r_imp1");
        close(l0.r_imp[2], 3.0, "r_imp2");
        // imp_norm = minmax([1.732, ~0, 3]) = [0.577, 0, 1]
        close(l0.imp_norm[0], n0 / 3.0, "imp_norm0");
        // pre-fusion: [0.3 - 0.7 * 0.577, 0, -0.7] -> relu -> all zero,
        // and a constant vector min-maxes to exact zeros
        assert_eq!(l0.r_dim, vec![0.0; 3]);

        // dropping the utility branch rescues dim 0
        let config = UcanConfig {
            eps: 1e-12,
            ablation: AblationFlags { no_utility: true, ..Default::default() },
            ..UcanConfig::default()
        };
        let report = score_layers(&model, &summary, &config).unwrap();
        let l0 = &report.layers[0];
        assert_eq!(l0.imp_norm, vec![0.0; 3]);
        // pre = relu(0.3 * [1,0,0]) = [0.3,0,0]; minmax -> [1,0,0]
        close(l0.r_dim[0], 1.0, "r_dim0");
        assert_eq!(l0.r_dim[1], 0.0);
        assert_eq!(l0.r_dim[2], 0.0);
    }

    #[test]
    fn no_contrast_ablation_normalizes_raw_forget_means() {
        let model = tiny_model();
        let summary = summary_with(
            &model,
            [vec![2.0, 6.0, 4.0], vec![0.0, 0.0, 0.0]],
            [vec![9.0, 9.0, 9.0], vec![0.0, 0.0, 0.0]],
            [vec![0.0; 3], vec![0.0; 3]],
        );
        let config = UcanConfig {
            eps: 1e-12,
            ablation: AblationFlags { no_contrast: true, ..Default::default() },
            ..UcanConfig::default()
        };
        let report = score_layers(&model, &summary, &config).unwrap();
        let l0 = &report.layers[0];
        // retain reference ignored entirely: gap_norm = minmax(v_f)
        assert_eq!(l0.r_gap, vec![2.0, 6.0, 4.0]);
        assert_eq!(l0.gap_norm[0], 0.0);
        assert!((l0.gap_norm[1] - 1.0).abs() < 1e-9);
        assert!((l0.gap_norm[2] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn quant_proxy_perturbs_importance_within_bound() {
        let hyper = ModelHyper { embed_dim: 16, hidden_dim: 16, rank: 4, w0_scale: 1.0 };
        let mut model = AdapterModel::init(8, 2, &hyper, 3);
        let mut rng = substream(8, "proxy");
        for l in &mut model.layers {
            for v in &mut l.w_b.data {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let mut summary = ActivationSummary::for_model(&model);
        for layer in &mut summary.layers {
            for j in 0..layer.d_in {
                layer.sum_forget[j] = rng.gen_range(0.0..1.0);
                layer.sum_retain[j] = rng.gen_range(0.0..1.0);
                layer.sq_retain[j] = rng.gen_range(0.0..4.0);
            }
        }
        summary.n_forget_rows = 1;
        summary.n_retain_rows = 1;

        let exact = score_layers(&model, &summary, &UcanConfig::default()).unwrap();
        let proxied = score_layers(
            &model,
            &summary,
            &UcanConfig { quant_proxy: true, quant_block: 8, ..UcanConfig::default() },
        )
        .unwrap();
        for (a, b) in exact.layers.iter().zip(&proxied.layers) {
            assert_eq!(a.gap_norm, b.gap_norm); // gap path untouched by quant
            for (x, y) in a.r_imp.iter().zip(&b.r_imp) {
                // 4-bit round trip moves importance, but not unboundedly
                assert!((x - y).abs() <= 0.25 * x.abs() + 0.5, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn risk_dump_carries_config_echo_and_score_tensors() {
        let model = tiny_model();
        let summary = summary_with(
            &model,
            [vec![1.0, 0.0, 0.0], vec![0.5, 0.0, 0.0]],
            [vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]],
            [vec![1.0; 3], vec![1.0; 3]],
        );
        let report = score_layers(&model, &summary, &UcanConfig::default()).unwrap();
        let dump = report.to_tensorfile();
        assert_eq!(dump.meta_value("gamma"), Some("0.5"));
        assert_eq!(dump.meta_value("ablation"), Some("-"));
        assert!(dump.tensor("r_dim.0").is_some());
        assert!(dump.tensor("imp_norm.1").is_some());
        let bytes = dump.to_bytes();
        let back = TensorFile::from_bytes(&bytes).unwrap();
        assert_eq!(back.tensor("r_dim.0").unwrap().data.len(), 3);
    }
}
