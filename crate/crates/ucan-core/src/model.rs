//! Adapter-augmented next-item model.
//!
//! Architecture: token embedding, two low-rank-adapter linear layers with
//! tanh applied per token, masked mean-pooling over history positions, and
//! a linear scoring head over the item vocabulary. Each adapter layer
//! computes `W0 x + W_B (W_A x)` where `W0` is frozen after init and only
//! the rank-r factors are trainable during unlearning.
//!
//! Every backward pass bumps an instrumented gradient-op counter; the
//! forward-only unlearning path must leave it untouched.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::config::{ModelHyper, TrainHyper};
use crate::data::{templatize, ItemId, TemplateSpec, TokenBatch};
use crate::error::UcanError;
use crate::rng::substream;
use crate::tensor::Matrix;
use crate::tensorio::TensorFile;
use crate::Result;

/// Per-token activation function between adapter layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
}

impl Nonlinearity {
    pub fn tag(self) -> &'static str {
        match self {
            Nonlinearity::Tanh => "tanh",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "tanh" => Ok(Nonlinearity::Tanh),
            other => Err(UcanError::Checkpoint(format!("unknown nonlinearity {other:?}"))),
        }
    }

    #[inline]
    fn apply(self, v: f32) -> f32 {
        match self {
            Nonlinearity::Tanh => v.tanh(),
        }
    }
}

/// One frozen base weight plus trainable rank-r factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    /// Frozen base projection, `d_out x d_in`.
    pub w0: Matrix,
    /// Trainable down-projection, `rank x d_in`.
    pub w_a: Matrix,
    /// Trainable up-projection, `d_out x rank`.
    pub w_b: Matrix,
}

impl AdapterLayer {
    pub fn d_in(&self) -> usize {
        self.w0.cols
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows
    }

    pub fn rank(&self) -> usize {
        self.w_a.rows
    }

    /// Seeded init: `W0` uniform at `w0_scale / sqrt(d_in)`, `W_A` uniform
    /// at `1 / sqrt(d_in)`, `W_B` zero so the adapter starts as identity.
    pub fn init(
        d_in: usize,
        d_out: usize,
        rank: usize,
        w0_scale: f32,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let b0 = w0_scale / (d_in as f32).sqrt();
        let w0 = Matrix::from_fn(d_out, d_in, |_, _| rng.gen_range(-b0..b0));
        let ba = 1.0 / (d_in as f32).sqrt();
        let w_a = Matrix::from_fn(rank, d_in, |_, _| rng.gen_range(-ba..ba));
        let w_b = Matrix::zeros(d_out, rank);
        AdapterLayer { w0, w_a, w_b }
    }

    /// `W0 x + W_B (W_A x)` without materializing the composed weight.
    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        let mut y = self.w0.matvec(x)?;
        let a = self.w_a.matvec(x)?;
        let delta = self.w_b.matvec(&a)?;
        for (yi, di) in y.iter_mut().zip(delta) {
            *yi += di;
        }
        Ok(y)
    }

    /// Dense adapter contribution `W_B W_A` (`d_out x d_in`).
    pub fn effective_delta(&self) -> Result<Matrix> {
        self.w_b.matmul(&self.w_a)
    }

    fn validate(&self) -> Result<()> {
        if self.w_a.cols != self.w0.cols
            || self.w_b.rows != self.w0.rows
            || self.w_b.cols != self.w_a.rows
        {
            return Err(UcanError::Shape(format!(
                "adapter factors {}x{} / {}x{} incompatible with base {}x{}",
                self.w_b.rows, self.w_b.cols, self.w_a.rows, self.w_a.cols, self.w0.rows,
                self.w0.cols
            )));
        }
        Ok(())
    }
}

/// Per-token inputs seen by each adapter layer during one forward pass,
/// shaped `(rows, cols, d_in)` per layer. Padding positions are captured
/// too; downstream consumers apply the batch mask.
#[derive(Debug, Clone)]
pub struct ActivationCapture {
    pub rows: usize,
    pub cols: usize,
    pub layers: Vec<LayerCapture>,
}

#[derive(Debug, Clone)]
pub struct LayerCapture {
    pub d_in: usize,
    /// Row-major `(row, col, dim)` values.
    pub data: Vec<f32>,
}

impl ActivationCapture {
    /// Input vector of `layer` at `(row, col)`.
    pub fn at(&self, layer: usize, row: usize, col: usize) -> &[f32] {
        let lc = &self.layers[layer];
        let start = (row * self.cols + col) * lc.d_in;
        &lc.data[start..start + lc.d_in]
    }
}

/// Provenance of the artifacts a checkpoint was produced from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lineage {
    pub config_hash: String,
    pub data_hash: String,
    pub split_hash: String,
    pub seed: u64,
}

impl Default for Lineage {
    fn default() -> Self {
        Lineage {
            config_hash: "-".into(),
            data_hash: "-".into(),
            split_hash: "-".into(),
            seed: 0,
        }
    }
}

/// Which parameters a gradient step may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Embedding, adapter factors, and head: initial fitting.
    Full,
    /// Adapter factors only: all gradient-based unlearning.
    AdapterOnly,
}

/// The complete recommender with an instrumented gradient-op counter.
#[derive(Debug, Clone)]
pub struct AdapterModel {
    /// Token embedding, `(n_reserved + n_items) x embed_dim`.
    pub embedding: Matrix,
    pub layers: Vec<AdapterLayer>,
    pub head: Matrix,
    pub nonlin: Nonlinearity,
    pub n_items: u32,
    pub n_reserved: u32,
    pub lineage: Lineage,
    /// Per-example backward passes performed through this instance.
    pub grad_ops: u64,
}

impl AdapterModel {
    /// Fresh seeded model. The adapter delta starts at zero (`W_B = 0`), so
    /// initial behavior is the frozen backbone alone.
    pub fn init(n_items: u32, n_reserved: u32, hyper: &ModelHyper, seed: u64) -> AdapterModel {
        let vocab = n_reserved as usize + n_items as usize;
        let mut rng = substream(seed, "init");
        let be = 1.0 / (hyper.embed_dim as f32).sqrt();
        let embedding = Matrix::from_fn(vocab, hyper.embed_dim, |_, _| rng.gen_range(-be..be));
        let layers = vec![
            AdapterLayer::init(hyper.embed_dim, hyper.hidden_dim, hyper.rank, hyper.w0_scale, &mut rng),
            AdapterLayer::init(hyper.hidden_dim, hyper.hidden_dim, hyper.rank, hyper.w0_scale, &mut rng),
        ];
        let bh = 1.0 / (hyper.hidden_dim as f32).sqrt();
        let head = Matrix::from_fn(n_items as usize, hyper.hidden_dim, |_, _| rng.gen_range(-bh..bh));
        AdapterModel {
            embedding,
            layers,
            head,
            nonlin: Nonlinearity::Tanh,
            n_items,
            n_reserved,
            lineage: Lineage { seed, ..Lineage::default() },
            grad_ops: 0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows
    }

    pub fn hidden_dim(&self) -> usize {
        self.head.cols
    }

    /// Item-score logits for each row, `rows x n_items`.
    pub fn forward(&self, batch: &TokenBatch) -> Result<Vec<f32>> {
        Ok(self.forward_inner(batch, false)?.0)
    }

    /// Logits plus per-token layer inputs for activation statistics.
    pub fn forward_captured(&self, batch: &TokenBatch) -> Result<(Vec<f32>, ActivationCapture)> {
        let (logits, cap) = self.forward_inner(batch, true)?;
        Ok((logits, cap.expect("capture requested")))
    }

    fn forward_inner(
        &self,
        batch: &TokenBatch,
        capture: bool,
    ) -> Result<(Vec<f32>, Option<ActivationCapture>)> {
        let mut cap = if capture {
            Some(ActivationCapture {
                rows: batch.rows,
                cols: batch.cols,
                layers: self
                    .layers
                    .iter()
                    .map(|l| LayerCapture {
                        d_in: l.d_in(),
                        data: Vec::with_capacity(batch.rows * batch.cols * l.d_in()),
                    })
                    .collect(),
            })
        } else {
            None
        };

        let hidden = self.hidden_dim();
        let mut logits = Vec::with_capacity(batch.rows * self.n_items as usize);
        for row in 0..batch.rows {
            let mut pooled = vec![0.0f64; hidden];
            let mut count = 0u32;
            for col in 0..batch.cols {
                let tok = batch.token(row, col) as usize;
                if tok >= self.vocab_size() {
                    return Err(UcanError::Data(format!(
                        "token {tok} outside vocabulary {}",
                        self.vocab_size()
                    )));
                }
                let mut x: Vec<f32> = self.embedding.row(tok).to_vec();
                for (li, layer) in self.layers.iter().enumerate() {
                    if let Some(c) = cap.as_mut() {
                        c.layers[li].data.extend_from_slice(&x);
                    }
                    let mut y = layer.forward(&x)?;
                    for v in &mut y {
                        *v = self.nonlin.apply(*v);
                    }
                    x = y;
                }
                if batch.masked(row, col) {
                    for (p, v) in pooled.iter_mut().zip(&x) {
                        *p += *v as f64;
                    }
                    count += 1;
                }
            }
            if count == 0 {
                return Err(UcanError::Data(format!("row {row} has an all-zero mask")));
            }
            let pooled: Vec<f32> =
                pooled.into_iter().map(|v| (v / count as f64) as f32).collect();
            logits.extend(self.head.matvec(&pooled)?);
        }
        Ok((logits, cap))
    }

    /// Checkpoint contents as a named-tensor file. Byte-deterministic for
    /// identical weights and lineage.
    pub fn to_tensorfile(&self) -> TensorFile {
        let mut f = TensorFile::new();
        let push_meta = |f: &mut TensorFile, k: &str, v: String| {
            f.push_meta(k, v).expect("static meta keys are valid");
        };
        push_meta(&mut f, "model_schema", "1".into());
        push_meta(&mut f, "n_items", self.n_items.to_string());
        push_meta(&mut f, "n_reserved", self.n_reserved.to_string());
        push_meta(&mut f, "embed_dim", self.embedding.cols.to_string());
        push_meta(&mut f, "hidden_dim", self.hidden_dim().to_string());
        push_meta(&mut f, "rank", self.layers[0].rank().to_string());
        push_meta(&mut f, "n_layers", self.layers.len().to_string());
        push_meta(&mut f, "nonlinearity", self.nonlin.tag().into());
        push_meta(&mut f, "seed", self.lineage.seed.to_string());
        push_meta(&mut f, "config_hash", self.lineage.config_hash.clone());
        push_meta(&mut f, "data_hash", self.lineage.data_hash.clone());
        push_meta(&mut f, "split_hash", self.lineage.split_hash.clone());

        let push = |f: &mut TensorFile, name: String, m: &Matrix| {
            f.push(&name, vec![m.rows, m.cols], m.data.clone())
                .expect("model tensors are well-formed");
        };
        push(&mut f, "embedding".into(), &self.embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            push(&mut f, format!("layers.{i}.w0"), &layer.w0);
            push(&mut f, format!("layers.{i}.w_a"), &layer.w_a);
            push(&mut f, format!("layers.{i}.w_b"), &layer.w_b);
        }
        push(&mut f, "head".into(), &self.head);
        f
    }

    pub fn from_tensorfile(f: &TensorFile) -> Result<AdapterModel> {
        let schema = f.require_meta("model_schema")?;
        if schema != "1" {
            return Err(UcanError::Checkpoint(format!("unsupported model schema {schema}")));
        }
        let parse_u32 = |key: &str| -> Result<u32> {
            f.require_meta(key)?
                .parse()
                .map_err(|_| UcanError::Checkpoint(format!("meta {key} is not an integer")))
        };
        let n_items = parse_u32("n_items")?;
        let n_reserved = parse_u32("n_reserved")?;
        let n_layers = parse_u32("n_layers")? as usize;
        let nonlin = Nonlinearity::from_tag(f.require_meta("nonlinearity")?)?;
        let seed: u64 = f
            .require_meta("seed")?
            .parse()
            .map_err(|_| UcanError::Checkpoint("meta seed is not an integer".into()))?;

        let matrix = |name: &str| -> Result<Matrix> {
            let t = f.require(name)?;
            if t.shape.len() != 2 {
                return Err(UcanError::Checkpoint(format!(
                    "tensor {name} must be rank 2, got shape {:?}",
                    t.shape
                )));
            }
            Ok(Matrix { rows: t.shape[0], cols: t.shape[1], data: t.data.clone() })
        };
        let embedding = matrix("embedding")?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let layer = AdapterLayer {
                w0: matrix(&format!("layers.{i}.w0"))?,
                w_a: matrix(&format!("layers.{i}.w_a"))?,
                w_b: matrix(&format!("layers.{i}.w_b"))?,
            };
            layer.validate()?;
            layers.push(layer);
        }
        let head = matrix("head")?;

        if layers.is_empty() {
            return Err(UcanError::Checkpoint("checkpoint has no adapter layers".into()));
        }
        if embedding.rows != n_reserved as usize + n_items as usize {
            return Err(UcanError::Checkpoint(format!(
                "embedding rows {} disagree with vocabulary {} + {}",
                embedding.rows, n_reserved, n_items
            )));
        }
        if embedding.cols != layers[0].d_in() {
            return Err(UcanError::Checkpoint("embedding width disagrees with layer 0".into()));
        }
        for w in layers.windows(2) {
            if w[0].d_out() != w[1].d_in() {
                return Err(UcanError::Checkpoint("adapter layer widths do not chain".into()));
            }
        }
        if head.rows != n_items as usize || head.cols != layers[layers.len() - 1].d_out() {
            return Err(UcanError::Checkpoint("head shape disagrees with model dims".into()));
        }

        Ok(AdapterModel {
            embedding,
            layers,
            head,
            nonlin,
            n_items,
            n_reserved,
            lineage: Lineage {
                config_hash: f.require_meta("config_hash")?.to_string(),
                data_hash: f.require_meta("data_hash")?.to_string(),
                split_hash: f.require_meta("split_hash")?.to_string(),
                seed,
            },
            grad_ops: 0,
        })
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        self.to_tensorfile().write(path)
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<AdapterModel> {
        AdapterModel::from_tensorfile(&TensorFile::read(path)?)
    }
}

// ── Losses and gradients ─────────────────────────────────────────────────

/// Row-wise softmax in f64 (max-shifted for stability).
pub fn softmax_rows(logits: &[f32], rows: usize, n: usize) -> Vec<f64> {
    let mut probs = vec![0.0f64; rows * n];
    for r in 0..rows {
        let row = &logits[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut z = 0.0f64;
        let out = &mut probs[r * n..(r + 1) * n];
        for (o, v) in out.iter_mut().zip(row) {
            *o = ((*v as f64) - max).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o /= z;
        }
    }
    probs
}

/// Gradient buffers matching the trainable parameters, f64-accumulated.
pub struct GradBuffers {
    pub emb: Vec<f64>,
    pub wa: Vec<Vec<f64>>,
    pub wb: Vec<Vec<f64>>,
    pub head: Vec<f64>,
}

impl GradBuffers {
    fn zeros(model: &AdapterModel) -> Self {
        GradBuffers {
            emb: vec![0.0; model.embedding.data.len()],
            wa: model.layers.iter().map(|l| vec![0.0; l.w_a.data.len()]).collect(),
            wb: model.layers.iter().map(|l| vec![0.0; l.w_b.data.len()]).collect(),
            head: vec![0.0; model.head.data.len()],
        }
    }
}

impl AdapterModel {
    /// Backpropagates `dlogits` (`rows x n_items`, f64) through the batch
    /// and returns summed parameter gradients. Counts one gradient op per
    /// row. Padding positions carry no gradient.
    pub fn backward_batch(
        &mut self,
        batch: &TokenBatch,
        dlogits: &[f64],
    ) -> Result<GradBuffers> {
        let n = self.n_items as usize;
        if dlogits.len() != batch.rows * n {
            return Err(UcanError::Shape(format!(
                "dlogits has {} values, expected {}",
                dlogits.len(),
                batch.rows * n
            )));
        }
        let hidden = self.hidden_dim();
        let mut g = GradBuffers::zeros(self);

        for row in 0..batch.rows {
            // Forward replay with caches for masked positions.
            let mut toks = Vec::new();
            let mut x0s: Vec<Vec<f32>> = Vec::new();
            let mut a1s: Vec<Vec<f32>> = Vec::new();
            let mut h1s: Vec<Vec<f32>> = Vec::new();
            let mut a2s: Vec<Vec<f32>> = Vec::new();
            let mut h2s: Vec<Vec<f32>> = Vec::new();
            let mut pooled = vec![0.0f64; hidden];
            for col in 0..batch.cols {
                if !batch.masked(row, col) {
                    continue;
                }
                let tok = batch.token(row, col) as usize;
                if tok >= self.vocab_size() {
                    return Err(UcanError::Data(format!(
                        "token {tok} outside vocabulary {}",
                        self.vocab_size()
                    )));
                }
                let x0 = self.embedding.row(tok).to_vec();
                let a1 = self.layers[0].w_a.matvec(&x0)?;
                let mut h1 = self.layers[0].w0.matvec(&x0)?;
                let d1 = self.layers[0].w_b.matvec(&a1)?;
                for (h, d) in h1.iter_mut().zip(d1) {
                    *h = self.nonlin.apply(*h + d);
                }
                let a2 = self.layers[1].w_a.matvec(&h1)?;
                let mut h2 = self.layers[1].w0.matvec(&h1)?;
                let d2 = self.layers[1].w_b.matvec(&a2)?;
                for (h, d) in h2.iter_mut().zip(d2) {
                    *h = self.nonlin.apply(*h + d);
                }
                for (p, v) in pooled.iter_mut().zip(&h2) {
                    *p += *v as f64;
                }
                toks.push(tok);
                x0s.push(x0);
                a1s.push(a1);
                h1s.push(h1);
                a2s.push(a2);
                h2s.push(h2);
            }
            let m = toks.len();
            if m == 0 {
                return Err(UcanError::Data(format!("row {row} has an all-zero mask")));
            }
            let pooled: Vec<f32> =
                pooled.iter().map(|v| (*v / m as f64) as f32).collect();

            let dz = &dlogits[row * n..(row + 1) * n];
            // head gradient and pooled-vector gradient
            let mut g_pool = vec![0.0f64; hidden];
            for i in 0..n {
                let gi = dz[i];
                if gi == 0.0 {
                    continue;
                }
                let hrow = self.head.row(i);
                let grow = &mut g.head[i * hidden..(i + 1) * hidden];
                for j in 0..hidden {
                    grow[j] += gi * pooled[j] as f64;
                    g_pool[j] += gi * hrow[j] as f64;
                }
            }

            for t in 0..m {
                // layer 2 backprop
                let h2 = &h2s[t];
                let mut g_pre2 = vec![0.0f64; hidden];
                for j in 0..hidden {
                    let h = h2[j] as f64;
                    g_pre2[j] = g_pool[j] / m as f64 * (1.0 - h * h);
                }
                let l2 = &self.layers[1];
                let r2 = l2.rank();
                // g_b = W_Bᵀ g_pre2
                let mut g_b2 = vec![0.0f64; r2];
                for i in 0..hidden {
                    let gi = g_pre2[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let brow = l2.w_b.row(i);
                    for k in 0..r2 {
                        g_b2[k] += gi * brow[k] as f64;
                        g.wb[1][i * r2 + k] += gi * a2s[t][k] as f64;
                    }
                }
                let d1 = l2.d_in();
                let mut g_h1 = vec![0.0f64; d1];
                for k in 0..r2 {
                    let gk = g_b2[k];
                    let arow = l2.w_a.row(k);
                    for j in 0..d1 {
                        g.wa[1][k * d1 + j] += gk * h1s[t][j] as f64;
                        g_h1[j] += gk * arow[j] as f64;
                    }
                }
                for i in 0..hidden {
                    let gi = g_pre2[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let w0row = l2.w0.row(i);
                    for j in 0..d1 {
                        g_h1[j] += gi * w0row[j] as f64;
                    }
                }

                // layer 1 backprop
                let l1 = &self.layers[0];
                let d0 = l1.d_in();
                let r1 = l1.rank();
                let mut g_pre1 = vec![0.0f64; d1];
                for j in 0..d1 {
                    let h = h1s[t][j] as f64;
                    g_pre1[j] = g_h1[j] * (1.0 - h * h);
                }
                let mut g_b1 = vec![0.0f64; r1];
                for i in 0..d1 {
                    let gi = g_pre1[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let brow = l1.w_b.row(i);
                    for k in 0..r1 {
                        g_b1[k] += gi * brow[k] as f64;
                        g.wb[0][i * r1 + k] += gi * a1s[t][k] as f64;
                    }
                }
                let mut g_x0 = vec![0.0f64; d0];
                for k in 0..r1 {
                    let gk = g_b1[k];
                    let arow = l1.w_a.row(k);
                    for j in 0..d0 {
                        g.wa[0][k * d0 + j] += gk * x0s[t][j] as f64;
                        g_x0[j] += gk * arow[j] as f64;
                    }
                }
                for i in 0..d1 {
                    let gi = g_pre1[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let w0row = l1.w0.row(i);
                    for j in 0..d0 {
                        g_x0[j] += gi * w0row[j] as f64;
                    }
                }
                let erow = &mut g.emb[toks[t] * d0..(toks[t] + 1) * d0];
                for j in 0..d0 {
                    erow[j] += g_x0[j];
                }
            }
            self.grad_ops += 1;
        }
        Ok(g)
    }

    /// Applies `param -= lr * grad` over the given scope.
    pub fn apply_grads(&mut self, g: &GradBuffers, lr: f64, scope: TrainScope) {
        for (li, layer) in self.layers.iter_mut().enumerate() {
            for (w, gv) in layer.w_a.data.iter_mut().zip(&g.wa[li]) {
                *w = (*w as f64 - lr * gv) as f32;
            }
            for (w, gv) in layer.w_b.data.iter_mut().zip(&g.wb[li]) {
                *w = (*w as f64 - lr * gv) as f32;
            }
        }
        if scope == TrainScope::Full {
            for (w, gv) in self.embedding.data.iter_mut().zip(&g.emb) {
                *w = (*w as f64 - lr * gv) as f32;
            }
            for (w, gv) in self.head.data.iter_mut().zip(&g.head) {
                *w = (*w as f64 - lr * gv) as f32;
            }
        }
    }
}

/// Mean cross-entropy of target items and the logit gradient of the batch
/// mean (rows x n_items).
pub fn ce_loss_and_dlogits(
    logits: &[f32],
    targets: &[ItemId],
    rows: usize,
    n: usize,
) -> (f64, Vec<f64>) {
    let probs = softmax_rows(logits, rows, n);
    let mut loss = 0.0f64;
    let mut dl = vec![0.0f64; rows * n];
    for r in 0..rows {
        let y = targets[r] as usize;
        let p = probs[r * n + y].max(1e-300);
        loss += -p.ln();
        for i in 0..n {
            dl[r * n + i] = (probs[r * n + i] - if i == y { 1.0 } else { 0.0 }) / rows as f64;
        }
    }
    (loss / rows as f64, dl)
}

/// Loss trace of an SGD fit.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Minibatch SGD on next-item cross-entropy. Pair order reshuffles per
/// epoch from a seeded substream; zero epochs leaves weights untouched.
pub fn train_adapter(
    model: &mut AdapterModel,
    pairs: &[(Vec<ItemId>, ItemId)],
    tmpl: &TemplateSpec,
    hyper: &TrainHyper,
    seed: u64,
    scope: TrainScope,
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(UcanError::Data("train_adapter: no training pairs".into()));
    }
    if hyper.batch_size == 0 {
        return Err(UcanError::Config("train batch_size must be >= 1".into()));
    }
    let n = model.n_items as usize;
    let mut losses = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..hyper.epochs {
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut crate::rng::substream_indexed(seed, "train_epoch", epoch as u64));
        }
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(hyper.batch_size) {
            let rows: Vec<(Vec<ItemId>, ItemId)> =
                chunk.iter().map(|i| pairs[*i].clone()).collect();
            let batch = templatize(&rows, tmpl, model.n_items)?;
            let logits = model.forward(&batch)?;
            let (loss, dl) = ce_loss_and_dlogits(&logits, &batch.targets, batch.rows, n);
            if !loss.is_finite() {
                return Err(UcanError::Numeric(format!(
                    "non-finite loss at epoch {epoch} (lr {})",
                    hyper.lr
                )));
            }
            epoch_loss += loss * batch.rows as f64;
            let g = model.backward_batch(&batch, &dl)?;
            model.apply_grads(&g, hyper.lr, scope);
        }
        losses.push(epoch_loss / pairs.len() as f64);
    }
    Ok(TrainReport { epoch_losses: losses })
}
