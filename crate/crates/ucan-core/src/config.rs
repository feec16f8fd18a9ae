//! Experiment configuration: typed sections, TOML round-trip, validation,
//! and content hashes for artifact lineage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::UcanError;
use crate::Result;

/// Which weights the attenuation pass edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Scale adapter in-projection columns; backbone stays bit-identical.
    #[default]
    Adapter,
    /// Merge each adapter into a dense copy of its base weight, then scale
    /// the merged columns.
    Full,
}

/// Ablation switches. `F` drops the utility branch, `C` drops the
/// contrastive reference, `H` replaces soft decay with a hard zero mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AblationFlags {
    pub no_utility: bool,
    pub no_contrast: bool,
    pub hard_mask: bool,
}

impl AblationFlags {
    /// Parses a comma-free list of single-letter tags, e.g. `"F"`, `"FH"`.
    pub fn from_tags(tags: &str) -> Result<Self> {
        let mut flags = AblationFlags::default();
        for c in tags.chars() {
            match c.to_ascii_uppercase() {
                'F' => flags.no_utility = true,
                'C' => flags.no_contrast = true,
                'H' => flags.hard_mask = true,
                other => {
                    return Err(UcanError::Config(format!(
                        "unknown ablation tag {other:?} (expected F, C, or H)"
                    )))
                }
            }
        }
        Ok(flags)
    }

    pub fn tags(&self) -> String {
        let mut s = String::new();
        if self.no_utility {
            s.push('F');
        }
        if self.no_contrast {
            s.push('C');
        }
        if self.hard_mask {
            s.push('H');
        }
        if s.is_empty() {
            s.push('-');
        }
        s
    }
}

/// Hyper-parameters of the attenuation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UcanConfig {
    /// Contrast strength applied to the retain reference.
    pub gamma: f64,
    /// Mixing weight between forgetting signal and utility penalty.
    pub lambda: f64,
    /// Risk threshold; dimensions scoring strictly above are edited.
    pub tau_risk: f64,
    /// Retention ceiling at the threshold boundary.
    pub alpha_max: f64,
    /// Decay sharpness exponent.
    pub beta: f64,
    /// Numerical floor shared by all normalizers.
    pub eps: f64,
    pub target: Target,
    /// Route utility importance through the 4-bit dequantization proxy.
    pub quant_proxy: bool,
    pub quant_block: usize,
    pub ablation: AblationFlags,
}

impl Default for UcanConfig {
    fn default() -> Self {
        UcanConfig {
            gamma: 0.5,
            lambda: 0.3,
            tau_risk: 0.2,
            alpha_max: 0.1,
            beta: 2.0,
            eps: crate::EPS,
            target: Target::Adapter,
            quant_proxy: false,
            quant_block: 64,
            ablation: AblationFlags::default(),
        }
    }
}

impl UcanConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(UcanError::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(UcanError::Config(format!("lambda must be in [0,1], got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.tau_risk) {
            return Err(UcanError::Config(format!(
                "tau_risk must be in [0,1], got {}",
                self.tau_risk
            )));
        }
        if !self.alpha_max.is_finite() || self.alpha_max <= 0.0 || self.alpha_max > 1.0 {
            return Err(UcanError::Config(format!(
                "alpha_max must be in (0,1], got {}",
                self.alpha_max
            )));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(UcanError::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(UcanError::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.quant_block == 0 {
            return Err(UcanError::Config("quant_block must be >= 1".into()));
        }
        Ok(())
    }
}

/// Unlearning baseline selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Retrain,
    #[default]
    Ga,
    Npo,
    Prune,
}

impl BaselineMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "retrain" => Ok(BaselineMethod::Retrain),
            "ga" => Ok(BaselineMethod::Ga),
            "npo" => Ok(BaselineMethod::Npo),
            "prune" => Ok(BaselineMethod::Prune),
            other => Err(UcanError::Config(format!(
                "unknown baseline method {other:?} (expected retrain, ga, npo, or prune)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::Retrain => "retrain",
            BaselineMethod::Ga => "ga",
            BaselineMethod::Npo => "npo",
            BaselineMethod::Prune => "prune",
        }
    }
}

/// Hyper-parameters shared by the gradient and pruning baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    /// Step size for the gradient baselines.
    pub lr: f64,
    /// Full passes over the forget set.
    pub steps: usize,
    /// Preference-loss sharpness.
    pub npo_beta: f64,
    /// Fraction of input dimensions zeroed per layer by hard pruning.
    pub prune_fraction: f64,
    /// Ascent aborts once mean loss exceeds this multiple of its start.
    pub divergence_cap: f64,
    pub batch_size: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            method: BaselineMethod::Ga,
            lr: 1e-1,
            steps: 3,
            npo_beta: 1.0,
            prune_fraction: 0.1,
            divergence_cap: 5.0,
            batch_size: 16,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(UcanError::Config(format!("baseline lr must be > 0, got {}", self.lr)));
        }
        if !self.npo_beta.is_finite() || self.npo_beta <= 0.0 {
            return Err(UcanError::Config(format!(
                "npo_beta must be > 0, got {}",
                self.npo_beta
            )));
        }
        if !(0.0..=1.0).contains(&self.prune_fraction) {
            return Err(UcanError::Config(format!(
                "prune_fraction must be in [0,1], got {}",
                self.prune_fraction
            )));
        }
        if !self.divergence_cap.is_finite() || self.divergence_cap <= 1.0 {
            return Err(UcanError::Config(format!(
                "divergence_cap must be > 1, got {}",
                self.divergence_cap
            )));
        }
        if self.batch_size == 0 {
            return Err(UcanError::Config("baseline batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Source corpus selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Ml100k,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Ratings file for `ml100k`.
    pub path: Option<PathBuf>,
    /// Optional item-title metadata file; items absent from it are dropped.
    pub titles: Option<PathBuf>,
    /// Synthetic corpus size.
    pub users: u32,
    pub items: u32,
    /// Fraction of each user's events planted in the forget cluster; also
    /// the forget fraction replayed by the splitter.
    pub cluster_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            path: None,
            titles: None,
            users: 50,
            items: 100,
            cluster_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelHyper {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub rank: usize,
    /// Init scale multiplier for the frozen base weights.
    pub w0_scale: f32,
}

impl Default for ModelHyper {
    fn default() -> Self {
        ModelHyper { embed_dim: 32, hidden_dim: 64, rank: 4, w0_scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper { lr: 0.1, epochs: 40, batch_size: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateHyper {
    /// Token width of every prompt, template prefix included.
    pub max_len: usize,
}

impl Default for TemplateHyper {
    fn default() -> Self {
        TemplateHyper { max_len: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitHyper {
    pub forget_fraction: f64,
}

impl Default for SplitHyper {
    fn default() -> Self {
        SplitHyper { forget_fraction: 0.25 }
    }
}

/// Full experiment description. Serializes to TOML with stable section and
/// field order, which makes the config hash content-addressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelHyper,
    pub train: TrainHyper,
    pub template: TemplateHyper,
    pub split: SplitHyper,
    pub ucan: UcanConfig,
    pub baseline: BaselineConfig,
}

impl RunConfig {
    pub fn load_toml(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| UcanError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.ucan.validate()?;
        self.baseline.validate()?;
        if self.model.embed_dim == 0 || self.model.hidden_dim == 0 || self.model.rank == 0 {
            return Err(UcanError::Config("model dimensions must be >= 1".into()));
        }
        if self.model.rank > self.model.embed_dim.min(self.model.hidden_dim) {
            return Err(UcanError::Config(format!(
                "rank {} exceeds the smaller of embed_dim/hidden_dim",
                self.model.rank
            )));
        }
        if !self.train.lr.is_finite() || self.train.lr <= 0.0 {
            return Err(UcanError::Config(format!("train lr must be > 0, got {}", self.train.lr)));
        }
        if self.train.batch_size == 0 {
            return Err(UcanError::Config("train batch_size must be >= 1".into()));
        }
        if self.template.max_len < 2 {
            return Err(UcanError::Config("template max_len must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.split.forget_fraction) {
            return Err(UcanError::Config(format!(
                "forget_fraction must be in [0,1], got {}",
                self.split.forget_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.dataset.cluster_fraction) {
            return Err(UcanError::Config(format!(
                "cluster_fraction must be in [0,1], got {}",
                self.dataset.cluster_fraction
            )));
        }
        if self.dataset.kind == DatasetKind::Ml100k && self.dataset.path.is_none() {
            return Err(UcanError::Config("ml100k dataset requires dataset.path".into()));
        }
        Ok(())
    }

    /// Canonical serialized form used for the config hash.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes")
    }

    /// 16-hex-char content hash of the resolved configuration.
    pub fn config_hash(&self) -> String {
        let mut h = sha256_hex(self.canonical_toml().as_bytes());
        h.truncate(16);
        h
    }
}

/// Lowercase hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
