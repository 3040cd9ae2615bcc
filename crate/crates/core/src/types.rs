//! Shared vocabulary: token and layer identifiers, validated distributions,
//! and the per-session configuration.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Absolute tolerance on `Σ probs = 1`.
pub const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{field} out of {bound}")]
    OutOfRange { field: &'static str, bound: &'static str },
    #[error("missing field: {0}")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum DistributionError {
    #[error("distribution is empty")]
    Empty,
    #[error("negative or non-finite probability {value} at index {index}")]
    BadEntry { index: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
}

/// A vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One-based transformer layer index. Layer `L` is the full model; exit
/// layers live in `[1, L)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerIndex(pub usize);

impl LayerIndex {
    pub fn new(value: usize, num_layers: usize) -> Result<Self, ConfigError> {
        if value == 0 || value > num_layers {
            return Err(ConfigError::OutOfRange { field: "layer", bound: "[1, L]" });
        }
        Ok(Self(value))
    }

    /// Like [`LayerIndex::new`] but rejects the final layer.
    pub fn exit(value: usize, num_layers: usize) -> Result<Self, ConfigError> {
        if value == 0 || value >= num_layers {
            return Err(ConfigError::OutOfRange { field: "exit_layer", bound: "[1, L)" });
        }
        Ok(Self(value))
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Zero-based offset into per-layer vectors.
    pub fn offset(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for LayerIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A normalized probability vector over the vocabulary, stored in linear space.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, DistributionError> {
        validate_probs(&probs)?;
        Ok(Self { probs })
    }

    /// Point mass on `token`.
    pub fn one_hot(vocab: usize, token: TokenId) -> Self {
        let mut probs = vec![0.0; vocab];
        probs[token.index()] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token.index()]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> TokenId {
        argmax(&self.probs)
    }

    pub fn top1(&self) -> (TokenId, f64) {
        let t = self.argmax();
        (t, self.probs[t.index()])
    }
}

pub(crate) fn validate_probs(probs: &[f64]) -> Result<(), DistributionError> {
    if probs.is_empty() {
        return Err(DistributionError::Empty);
    }
    let mut sum = 0.0;
    for (index, &value) in probs.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(DistributionError::BadEntry { index, value });
        }
        sum += value;
    }
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(DistributionError::NotNormalized(sum));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest token id.
pub fn argmax(probs: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    TokenId(best as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Sampling,
}

/// How far the draft loop may run in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DraftCapMode {
    /// Loop to `d_max`; only the confidence threshold stops drafting early.
    #[default]
    Algorithm1,
    /// Loop to `min(planned_len, d_max)`.
    PlanCapped,
}

/// Denominator used when turning decayed match counts into acceptance rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaDenominator {
    /// Decayed sum of window sizes `u_r + 1`.
    #[default]
    WindowLen,
    /// Decayed sum of first-mismatch indices `u_r`.
    FirstMismatch,
}

/// Which row decides the end of each round's statistics window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShadowWindow {
    /// Every layer uses the exit layer's first mismatch.
    #[default]
    ExitLayer,
    /// Every layer uses its own first mismatch.
    PerLayer,
}

fn default_d_max() -> usize {
    18
}
fn default_omega() -> f64 {
    0.95
}
fn default_prefill_window() -> usize {
    32
}
fn default_max_new_tokens() -> usize {
    256
}
fn default_eps() -> f64 {
    1e-6
}
fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub num_layers: usize,
    pub vocab_size: usize,
    #[serde(default = "default_d_max")]
    pub d_max: usize,
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default = "default_prefill_window")]
    pub prefill_window: usize,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub decode_mode: DecodeMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub draft_cap_mode: DraftCapMode,
    #[serde(default = "default_eps")]
    pub alpha_clamp_eps: f64,
    #[serde(default = "default_threshold")]
    pub default_threshold: f64,
    #[serde(default)]
    pub alpha_denominator: AlphaDenominator,
    #[serde(default)]
    pub shadow_window: ShadowWindow,
}

impl SessionConfig {
    /// Defaults for an `L`-layer model over `V` tokens.
    pub fn new(num_layers: usize, vocab_size: usize) -> Self {
        Self {
            num_layers,
            vocab_size,
            d_max: default_d_max(),
            omega: default_omega(),
            prefill_window: default_prefill_window(),
            max_new_tokens: default_max_new_tokens(),
            decode_mode: DecodeMode::Greedy,
            seed: 0,
            draft_cap_mode: DraftCapMode::Algorithm1,
            alpha_clamp_eps: default_eps(),
            default_threshold: default_threshold(),
            alpha_denominator: AlphaDenominator::WindowLen,
            shadow_window: ShadowWindow::ExitLayer,
        }
    }

    pub fn validate(self) -> Result<Self, ConfigError> {
        validate_config(self)
    }
}

pub fn validate_config(cfg: SessionConfig) -> Result<SessionConfig, ConfigError> {
    use ConfigError::OutOfRange;
    if cfg.num_layers < 2 {
        return Err(OutOfRange { field: "num_layers", bound: "[2, inf)" });
    }
    if cfg.vocab_size < 2 || cfg.vocab_size > u32::MAX as usize {
        return Err(OutOfRange { field: "vocab_size", bound: "[2, 2^32)" });
    }
    if !(0.0..=1.0).contains(&cfg.omega) {
        return Err(OutOfRange { field: "omega", bound: "[0,1]" });
    }
    if cfg.prefill_window < 1 {
        return Err(OutOfRange { field: "prefill_window", bound: "[1, inf)" });
    }
    if cfg.max_new_tokens < 1 {
        return Err(OutOfRange { field: "max_new_tokens", bound: "[1, inf)" });
    }
    if !(cfg.alpha_clamp_eps > 0.0 && cfg.alpha_clamp_eps < 0.5) {
        return Err(OutOfRange { field: "alpha_clamp_eps", bound: "(0,0.5)" });
    }
    if !(0.0..=1.0).contains(&cfg.default_threshold) {
        return Err(OutOfRange { field: "default_threshold", bound: "[0,1]" });
    }
    Ok(cfg)
}
