//! Experiment runner: decode loops, cost-model metrics, grid sweeps,
//! Monte-Carlo and enumeration oracles, and output files.

mod experiment;
mod oracle;
mod sweep;

pub use experiment::{
    aggregate, omega_sweep, run_experiment, Aggregate, ExperimentConfig, ExperimentParams, ExperimentResult,
    OmegaRow,
};
pub use oracle::{
    enumerate_target_sequences, mc_expected_tokens, sampling_distribution, tv_distance, McEstimate,
};
pub use sweep::{grid_sweep, segmented_sweep, SweepGrid};

use crate::engine::{CostLedger, Decoder, DraftPlan, RoundOutcome};
use crate::model::{LayeredModel, ModelError};
use crate::policy::Policy;
use crate::trace::RoundRecord;
use crate::types::{ConfigError, SessionConfig, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{0}")]
    Usage(String),
}

/// Tokens emitted per layer loaded.
pub fn compute_etpl(ledger: &CostLedger) -> Result<f64, HarnessError> {
    if ledger.layers_loaded == 0 {
        return Err(HarnessError::Usage("eTPL undefined: no layers loaded".into()));
    }
    Ok(ledger.tokens_emitted as f64 / ledger.layers_loaded as f64)
}

/// One summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: String,
    pub prompt: usize,
    pub seed: u64,
    pub num_layers: usize,
    pub tokens_emitted: u64,
    pub layers_loaded: u64,
    pub etpl: f64,
    pub sim_speedup: f64,
    pub trace: String,
}

impl RunReport {
    pub fn new(policy: String, prompt: usize, seed: u64, num_layers: usize, ledger: CostLedger, trace: String) -> Result<Self, HarnessError> {
        let etpl = compute_etpl(&ledger)?;
        Ok(Self {
            policy,
            prompt,
            seed,
            num_layers,
            tokens_emitted: ledger.tokens_emitted,
            layers_loaded: ledger.layers_loaded,
            etpl,
            sim_speedup: etpl * num_layers as f64,
            trace,
        })
    }
}

/// A finished decode session.
#[derive(Debug, Clone)]
pub struct Generation {
    pub output: Vec<TokenId>,
    pub ledger: CostLedger,
    pub records: Vec<RoundRecord>,
}

impl Generation {
    pub fn etpl(&self) -> f64 {
        compute_etpl(&self.ledger).expect("a finished generation has loaded layers")
    }
}

/// Decodes `cfg.max_new_tokens` tokens under `policy`, recording one trace
/// record per round. `visit` sees each outcome before the policy does.
pub fn decode_with(
    model: &dyn LayeredModel,
    cfg: &SessionConfig,
    prompt: &[TokenId],
    policy: &mut dyn Policy,
    rng_seed: u64,
    mut visit: impl FnMut(&RoundOutcome, &DraftPlan),
) -> Result<Generation, HarnessError> {
    let mut dec = Decoder::new(model, cfg.clone(), prompt, rng_seed)?;
    let mut plan = policy.init(model, prompt)?;
    let mut records = Vec::new();
    while !dec.is_finished() {
        let alpha_snapshot = policy.alpha_snapshot();
        let out = dec.run_round(&plan)?;
        records.push(RoundRecord {
            round: records.len(),
            exit_layer: out.exit_layer_used.get(),
            planned_len: plan.planned_len,
            g: out.drafted_len(),
            accepted: out.accepted_count,
            emitted_len: out.emitted.len(),
            layers_loaded: out.layers_loaded,
            tau: plan.threshold,
            alpha_snapshot,
            u_r: out.first_mismatch(),
        });
        visit(&out, &plan);
        plan = policy.observe(&out);
    }
    Ok(Generation { output: dec.generated().to_vec(), ledger: dec.ledger(), records })
}

pub fn decode(
    model: &dyn LayeredModel,
    cfg: &SessionConfig,
    prompt: &[TokenId],
    policy: &mut dyn Policy,
    rng_seed: u64,
) -> Result<Generation, HarnessError> {
    decode_with(model, cfg, prompt, policy, rng_seed, |_, _| {})
}

const PROMPT_SALT: u64 = 0x3c6e_f372_fe94_f82b;
const SESSION_SALT: u64 = 0xa54f_f53a_5f1d_36f1;

/// Seed for the `index`-th prompt of a run.
pub fn prompt_seed(seed: u64, index: usize) -> u64 {
    crate::model::mix(seed ^ PROMPT_SALT, index as u64)
}

/// Seed for the decode RNG of the `index`-th prompt; shared by all policies.
pub fn session_seed(seed: u64, index: usize) -> u64 {
    crate::model::mix(seed ^ SESSION_SALT, index as u64)
}

/// A prompt of `len` tokens sampled from the target chain.
pub fn synthetic_prompt(model: &dyn LayeredModel, len: usize, seed: u64) -> Result<Vec<TokenId>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = vec![TokenId(rng.random_range(0..model.vocab_size() as u32))];
    while ctx.len() < len {
        let step = model.step(&ctx)?;
        ctx.push(crate::engine::sample_index(step.target_probs(), &mut rng));
    }
    Ok(ctx)
}

pub fn synthetic_prompts(model: &dyn LayeredModel, n: usize, len: usize, seed: u64) -> Result<Vec<Vec<TokenId>>, ModelError> {
    (0..n).map(|i| synthetic_prompt(model, len, prompt_seed(seed, i))).collect()
}

/// Percentile bootstrap 95% interval of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(0.025), at(0.975))
}

/// Policy that switches between fixed plans by absolute position. Used as
/// the per-regime oracle schedule.
#[derive(Debug, Clone)]
pub struct ScheduledPolicy {
    /// `(first position, plan)` sorted by position.
    pub schedule: Vec<(usize, DraftPlan)>,
    position: usize,
}

impl ScheduledPolicy {
    pub fn new(mut schedule: Vec<(usize, DraftPlan)>) -> Self {
        schedule.sort_by_key(|(p, _)| *p);
        Self { schedule, position: 0 }
    }

    /// Schedule repeating `plans` every `cycle` positions, each active from
    /// its offset, over `[0, horizon)`.
    pub fn cyclic(plans: &[(usize, DraftPlan)], cycle: usize, horizon: usize) -> Self {
        let mut schedule = Vec::new();
        let mut base = 0;
        while base < horizon {
            schedule.extend(plans.iter().map(|(off, p)| (base + off, *p)));
            base += cycle;
        }
        Self::new(schedule)
    }

    fn current(&self) -> DraftPlan {
        let idx = self.schedule.partition_point(|(p, _)| *p <= self.position);
        self.schedule[idx.saturating_sub(1)].1
    }
}

impl Policy for ScheduledPolicy {
    fn id(&self) -> String {
        "schedule".into()
    }
    fn init(&mut self, _: &dyn LayeredModel, prompt: &[TokenId]) -> Result<DraftPlan, ModelError> {
        self.position = prompt.len();
        Ok(self.current())
    }
    fn observe(&mut self, outcome: &RoundOutcome) -> DraftPlan {
        self.position += outcome.emitted.len();
        self.current()
    }
}
