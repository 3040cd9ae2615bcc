//! Layered language models.
//!
//! A [`LayeredModel`] maps a context to a [`LayerStep`]: the next-token
//! distribution obtained by reading the LM head at every layer. Hidden states
//! are never materialized. The synthetic models in this module are built so
//! that the argmax agreement between each layer and the final layer has a
//! known long-run frequency, which makes acceptance-rate estimators checkable
//! against ground truth.
//!
//! All synthetic models are stateless: a step is a pure function of
//! `(spec, seed, context)`, so replaying a context always reproduces the
//! same distributions.

use crate::types::{argmax, Distribution, LayerIndex, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution as _, Gamma};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("context is empty; the prompt must provide at least one token")]
    EmptyContext,
    #[error("context length {len} exceeds horizon {horizon}")]
    HorizonExceeded { len: usize, horizon: usize },
    #[error("exit layer {exit} must be below L={num_layers}")]
    ExitIsFinalLayer { exit: usize, num_layers: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
}

/// Something that can be decoded layer by layer.
pub trait LayeredModel: Send + Sync {
    fn num_layers(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn step(&self, context: &[TokenId]) -> Result<LayerStep, ModelError>;
}

impl<M: LayeredModel + ?Sized> LayeredModel for &M {
    fn num_layers(&self) -> usize {
        (**self).num_layers()
    }
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn step(&self, context: &[TokenId]) -> Result<LayerStep, ModelError> {
        (**self).step(context)
    }
}

/// Per-layer next-token distributions at one position.
///
/// Stored as one flat `L × V` buffer; the top-1 token and probability of
/// every layer are cached at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStep {
    vocab: usize,
    probs: Vec<f64>,
    top: Vec<(TokenId, f64)>,
}

impl LayerStep {
    pub fn from_layers(layers: Vec<Distribution>) -> Result<Self, ModelError> {
        let vocab = layers.first().map(Distribution::len).unwrap_or(0);
        if vocab == 0 || layers.iter().any(|d| d.len() != vocab) {
            return Err(ModelError::InvalidSpec("ragged or empty layer step".into()));
        }
        let mut probs = Vec::with_capacity(vocab * layers.len());
        for d in &layers {
            probs.extend_from_slice(d.probs());
        }
        Ok(Self::from_flat(vocab, probs))
    }

    fn from_flat(vocab: usize, probs: Vec<f64>) -> Self {
        let top = probs
            .chunks_exact(vocab)
            .map(|row| {
                let t = argmax(row);
                (t, row[t.index()])
            })
            .collect();
        Self { vocab, probs, top }
    }

    pub fn num_layers(&self) -> usize {
        self.top.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    /// Probabilities at one-based `layer`.
    pub fn layer_probs(&self, layer: usize) -> &[f64] {
        let start = (layer - 1) * self.vocab;
        &self.probs[start..start + self.vocab]
    }

    pub fn layer(&self, layer: usize) -> Distribution {
        Distribution::new(self.layer_probs(layer).to_vec())
            .expect("layer steps hold normalized rows")
    }

    /// Argmax token and its probability at one-based `layer`.
    pub fn top1(&self, layer: usize) -> (TokenId, f64) {
        self.top[layer - 1]
    }

    pub fn target_probs(&self) -> &[f64] {
        self.layer_probs(self.num_layers())
    }

    pub fn target_top1(&self) -> (TokenId, f64) {
        self.top1(self.num_layers())
    }

    pub fn exit_probs(&self, exit: LayerIndex) -> Result<&[f64], ModelError> {
        self.check_exit(exit)?;
        Ok(self.layer_probs(exit.get()))
    }

    fn check_exit(&self, exit: LayerIndex) -> Result<(), ModelError> {
        if exit.get() == 0 || exit.get() >= self.num_layers() {
            return Err(ModelError::ExitIsFinalLayer {
                exit: exit.get(),
                num_layers: self.num_layers(),
            });
        }
        Ok(())
    }
}

/// The full model's next-token distribution `p`.
pub fn target_distribution(ls: &LayerStep) -> Distribution {
    ls.layer(ls.num_layers())
}

/// The draft distribution `q` read at exit layer `exit`.
pub fn exit_distribution(ls: &LayerStep, exit: LayerIndex) -> Result<Distribution, ModelError> {
    ls.check_exit(exit)?;
    Ok(ls.layer(exit.get()))
}

/// Transition law of the target chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseProcess {
    /// Each row is a seeded Dirichlet draw with symmetric `concentration`.
    Dirichlet { concentration: f64 },
    /// Explicit `V × V` row-stochastic matrix.
    Table { rows: Vec<Vec<f64>> },
}

impl Default for BaseProcess {
    fn default() -> Self {
        BaseProcess::Dirichlet { concentration: 1.0 }
    }
}

/// Law of the top-1 probability drawn for a shadow token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConfidenceDist {
    Beta { alpha: f64, beta: f64 },
    Uniform { low: f64, high: f64 },
    Fixed { value: f64 },
}

impl ConfidenceDist {
    pub fn mean(&self) -> f64 {
        match *self {
            ConfidenceDist::Beta { alpha, beta } => alpha / (alpha + beta),
            ConfidenceDist::Uniform { low, high } => 0.5 * (low + high),
            ConfidenceDist::Fixed { value } => value,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let ok = match *self {
            ConfidenceDist::Beta { alpha, beta } => alpha > 0.0 && beta > 0.0,
            ConfidenceDist::Uniform { low, high } => 0.0 <= low && low <= high && high <= 1.0,
            ConfidenceDist::Fixed { value } => (0.0..=1.0).contains(&value),
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidSpec(format!("bad confidence distribution {self:?}")))
        }
    }
}

fn default_match_conf() -> ConfidenceDist {
    ConfidenceDist::Beta { alpha: 8.0, beta: 2.0 }
}
fn default_mismatch_conf() -> ConfidenceDist {
    ConfidenceDist::Beta { alpha: 2.0, beta: 8.0 }
}
fn default_horizon() -> usize {
    1 << 20
}

/// Per-layer agreement probabilities `a_ℓ`, given explicitly or by shape.
/// Shapes describe layers `1..L`; layer `L` is always pinned to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Profile {
    Explicit(Vec<f64>),
    Shape(ProfileShape),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileShape {
    Constant { value: f64 },
    /// Linear ramp from layer 1 to layer `L-1`.
    Linear { first: f64, last: f64 },
    /// `low` below layer `at`, `high` from `at` on.
    Step { at: usize, low: f64, high: f64 },
}

impl Profile {
    pub fn resolve(&self, num_layers: usize) -> Result<Vec<f64>, ModelError> {
        let l = num_layers;
        let values = match self {
            Profile::Explicit(v) => {
                if v.len() != l {
                    return Err(ModelError::InvalidSpec(format!(
                        "agreement profile has {} entries, expected L={l}",
                        v.len()
                    )));
                }
                if v[l - 1] != 1.0 {
                    return Err(ModelError::InvalidSpec("agreement profile must end in a_L = 1".into()));
                }
                v.clone()
            }
            Profile::Shape(shape) => {
                let mut v: Vec<f64> = (1..l)
                    .map(|layer| match *shape {
                        ProfileShape::Constant { value } => value,
                        ProfileShape::Linear { first, last } => {
                            if l == 2 {
                                first
                            } else {
                                let t = (layer - 1) as f64 / (l - 2) as f64;
                                first + t * (last - first)
                            }
                        }
                        ProfileShape::Step { at, low, high } => {
                            if layer < at {
                                low
                            } else {
                                high
                            }
                        }
                    })
                    .collect();
                v.push(1.0);
                v
            }
        };
        if let Some(bad) = values.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(ModelError::InvalidSpec(format!("agreement {bad} outside [0,1]")));
        }
        Ok(values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regime {
    pub segment_len: usize,
    pub profile: Profile,
}

/// Synthetic model family descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Stationary per-layer agreement with the target argmax.
    Agreement {
        #[serde(default)]
        base_process: BaseProcess,
        agreement_profile: Profile,
        #[serde(default = "default_match_conf")]
        confidence_match: ConfidenceDist,
        #[serde(default = "default_mismatch_conf")]
        confidence_mismatch: ConfidenceDist,
        #[serde(default = "default_horizon")]
        horizon: usize,
    },
    /// Agreement profile chosen by absolute position; the segment list cycles.
    RegimeSwitching {
        #[serde(default)]
        base_process: BaseProcess,
        regimes: Vec<Regime>,
        #[serde(default = "default_match_conf")]
        confidence_match: ConfidenceDist,
        #[serde(default = "default_mismatch_conf")]
        confidence_mismatch: ConfidenceDist,
        #[serde(default = "default_horizon")]
        horizon: usize,
    },
    /// Every layer puts mass 1 on `transitions[last token]`.
    DeterministicToy {
        transitions: Vec<u32>,
        #[serde(default = "default_horizon")]
        horizon: usize,
    },
}

impl ModelSpec {
    pub fn agreement(profile: Profile) -> Self {
        ModelSpec::Agreement {
            base_process: BaseProcess::default(),
            agreement_profile: profile,
            confidence_match: default_match_conf(),
            confidence_mismatch: default_mismatch_conf(),
            horizon: default_horizon(),
        }
    }

    pub fn regime_switching(regimes: Vec<Regime>) -> Self {
        ModelSpec::RegimeSwitching {
            base_process: BaseProcess::default(),
            regimes,
            confidence_match: default_match_conf(),
            confidence_mismatch: default_mismatch_conf(),
            horizon: default_horizon(),
        }
    }

    /// Toy chain `t -> (t + 1) mod V`.
    pub fn cycle_toy(vocab: usize) -> Self {
        ModelSpec::DeterministicToy {
            transitions: (0..vocab as u32).map(|t| (t + 1) % vocab as u32).collect(),
            horizon: default_horizon(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelSpec::Agreement { .. } => "agreement",
            ModelSpec::RegimeSwitching { .. } => "regime_switching",
            ModelSpec::DeterministicToy { .. } => "deterministic_toy",
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Layered {
        base: BaseRows,
        /// `(segment end offset within one cycle, profile)`.
        regimes: Vec<(usize, Vec<f64>)>,
        cycle: usize,
        confidence_match: ConfidenceDist,
        confidence_mismatch: ConfidenceDist,
    },
    Toy { transitions: Vec<u32> },
}

#[derive(Debug, Clone)]
enum BaseRows {
    Dirichlet(Gamma<f64>),
    Table(Vec<Vec<f64>>),
}

/// A synthetic [`LayeredModel`] built from a [`ModelSpec`].
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    num_layers: usize,
    vocab: usize,
    seed: u64,
    horizon: usize,
    kind: Kind,
}

const ROW_SALT: u64 = 0x6a09_e667_f3bc_c908;
const STEP_SALT: u64 = 0xbb67_ae85_84ca_a73b;

impl SyntheticModel {
    pub fn new(spec: &ModelSpec, num_layers: usize, vocab: usize, seed: u64) -> Result<Self, ModelError> {
        if num_layers < 2 || vocab < 2 {
            return Err(ModelError::InvalidSpec("need L >= 2 and V >= 2".into()));
        }
        let (kind, horizon) = match spec {
            ModelSpec::Agreement {
                base_process,
                agreement_profile,
                confidence_match,
                confidence_mismatch,
                horizon,
            } => {
                let profile = agreement_profile.resolve(num_layers)?;
                (
                    layered_kind(
                        base_process,
                        vec![(1, profile)],
                        confidence_match,
                        confidence_mismatch,
                        vocab,
                    )?,
                    *horizon,
                )
            }
            ModelSpec::RegimeSwitching {
                base_process,
                regimes,
                confidence_match,
                confidence_mismatch,
                horizon,
            } => {
                if regimes.is_empty() {
                    return Err(ModelError::InvalidSpec("regime list is empty".into()));
                }
                let mut resolved = Vec::with_capacity(regimes.len());
                for r in regimes {
                    if r.segment_len == 0 {
                        return Err(ModelError::InvalidSpec("regime segment_len must be >= 1".into()));
                    }
                    resolved.push((r.segment_len, r.profile.resolve(num_layers)?));
                }
                (
                    layered_kind(base_process, resolved, confidence_match, confidence_mismatch, vocab)?,
                    *horizon,
                )
            }
            ModelSpec::DeterministicToy { transitions, horizon } => {
                if transitions.len() != vocab {
                    return Err(ModelError::InvalidSpec(format!(
                        "toy transition table has {} entries, expected V={vocab}",
                        transitions.len()
                    )));
                }
                if let Some(&t) = transitions.iter().find(|&&t| t as usize >= vocab) {
                    return Err(ModelError::TokenOutOfRange { token: t, vocab });
                }
                (Kind::Toy { transitions: transitions.clone() }, *horizon)
            }
        };
        Ok(Self { num_layers, vocab, seed, horizon, kind })
    }

    /// Agreement profile in force at absolute position `position`
    /// (the index of the token about to be generated).
    pub fn profile_at(&self, position: usize) -> Option<&[f64]> {
        match &self.kind {
            Kind::Layered { regimes, cycle, .. } => {
                let p = position % cycle;
                let idx = regimes.partition_point(|(end, _)| *end <= p);
                Some(&regimes[idx].1)
            }
            Kind::Toy { .. } => None,
        }
    }

    fn base_row(&self, base: &BaseRows, last: TokenId) -> Vec<f64> {
        match base {
            BaseRows::Table(rows) => rows[last.index()].clone(),
            BaseRows::Dirichlet(gamma) => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed ^ ROW_SALT, last.0 as u64));
                let mut row: Vec<f64> = (0..self.vocab).map(|_| gamma.sample(&mut rng)).collect();
                let sum: f64 = row.iter().sum();
                if sum > 0.0 {
                    row.iter_mut().for_each(|x| *x /= sum);
                } else {
                    row.iter_mut().for_each(|x| *x = 1.0 / self.vocab as f64);
                }
                row
            }
        }
    }
}

fn layered_kind(
    base: &BaseProcess,
    segments: Vec<(usize, Vec<f64>)>,
    confidence_match: &ConfidenceDist,
    confidence_mismatch: &ConfidenceDist,
    vocab: usize,
) -> Result<Kind, ModelError> {
    confidence_match.validate()?;
    confidence_mismatch.validate()?;
    let base = match base {
        BaseProcess::Dirichlet { concentration } => BaseRows::Dirichlet(
            Gamma::new(*concentration, 1.0)
                .map_err(|e| ModelError::InvalidSpec(format!("dirichlet concentration: {e}")))?,
        ),
        BaseProcess::Table { rows } => {
            if rows.len() != vocab {
                return Err(ModelError::InvalidSpec(format!(
                    "transition table has {} rows, expected V={vocab}",
                    rows.len()
                )));
            }
            for row in rows {
                if row.len() != vocab {
                    return Err(ModelError::InvalidSpec("transition row length != V".into()));
                }
                crate::types::validate_probs(row)
                    .map_err(|e| ModelError::InvalidSpec(format!("transition row: {e}")))?;
            }
            BaseRows::Table(rows.clone())
        }
    };
    let mut end = 0;
    let regimes = segments
        .into_iter()
        .map(|(len, profile)| {
            end += len;
            (end, profile)
        })
        .collect();
    Ok(Kind::Layered {
        base,
        regimes,
        cycle: end,
        confidence_match: confidence_match.clone(),
        confidence_mismatch: confidence_mismatch.clone(),
    })
}

impl LayeredModel for SyntheticModel {
    fn num_layers(&self) -> usize {
        self.num_layers
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn step(&self, context: &[TokenId]) -> Result<LayerStep, ModelError> {
        let last = *context.last().ok_or(ModelError::EmptyContext)?;
        if context.len() > self.horizon {
            return Err(ModelError::HorizonExceeded { len: context.len(), horizon: self.horizon });
        }
        if last.index() >= self.vocab {
            return Err(ModelError::TokenOutOfRange { token: last.0, vocab: self.vocab });
        }
        let (l, v) = (self.num_layers, self.vocab);
        let mut probs = vec![0.0; l * v];
        match &self.kind {
            Kind::Toy { transitions } => {
                let next = transitions[last.index()] as usize;
                for layer in 0..l {
                    probs[layer * v + next] = 1.0;
                }
            }
            Kind::Layered { base, confidence_match, confidence_mismatch, .. } => {
                let target = self.base_row(base, last);
                let t = argmax(&target).index();
                let profile = self.profile_at(context.len()).expect("layered model has a profile");
                let mut rng = ChaCha8Rng::seed_from_u64(context_hash(self.seed ^ STEP_SALT, context));
                let floor = 1.0 / v as f64 + 1e-9;
                for layer in 0..l - 1 {
                    let agree = rng.random::<f64>() < profile[layer];
                    let top = if agree {
                        t
                    } else {
                        let k = rng.random_range(0..v - 1);
                        if k >= t {
                            k + 1
                        } else {
                            k
                        }
                    };
                    let dist = if agree { confidence_match } else { confidence_mismatch };
                    let conf = sample_confidence(dist, &mut rng).clamp(floor, 1.0);
                    let rest = (1.0 - conf) / (v - 1) as f64;
                    let row = &mut probs[layer * v..(layer + 1) * v];
                    row.iter_mut().for_each(|x| *x = rest);
                    row[top] = conf;
                }
                probs[(l - 1) * v..].copy_from_slice(&target);
            }
        }
        Ok(LayerStep::from_flat(v, probs))
    }
}

fn sample_confidence(dist: &ConfidenceDist, rng: &mut ChaCha8Rng) -> f64 {
    match *dist {
        ConfidenceDist::Beta { alpha, beta } => Beta::new(alpha, beta)
            .expect("validated at construction")
            .sample(rng),
        ConfidenceDist::Uniform { low, high } => {
            if high > low {
                rng.random_range(low..high)
            } else {
                low
            }
        }
        ConfidenceDist::Fixed { value } => value,
    }
}

/// splitmix64 finalizer applied to `state + x`.
pub(crate) fn mix(state: u64, x: u64) -> u64 {
    let mut z = state.wrapping_add(x).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn context_hash(seed: u64, context: &[TokenId]) -> u64 {
    let h = context.iter().fold(seed, |h, t| mix(h, t.0 as u64));
    mix(h, context.len() as u64)
}

/// Wraps a model and counts `step` invocations.
#[derive(Debug)]
pub struct CountingModel<M> {
    inner: M,
    calls: AtomicU64,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self { inner, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: LayeredModel> LayeredModel for CountingModel<M> {
    fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }
    fn step(&self, context: &[TokenId]) -> Result<LayerStep, ModelError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.step(context)
    }
}
