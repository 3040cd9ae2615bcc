//! Independent oracles: Monte-Carlo round lengths under i.i.d. acceptance and
//! exhaustive enumeration of the target chain.

use super::{decode, HarnessError};
use crate::model::LayeredModel;
use crate::policy::PolicySpec;
use crate::types::{DecodeMode, SessionConfig, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Mean tokens per round when each of `d` drafts is accepted independently
/// with probability `alpha` and the round always adds one extra token.
pub fn mc_expected_tokens(alpha: f64, d: usize, trials: u64, seed: u64) -> Result<McEstimate, HarnessError> {
    if trials == 0 {
        return Err(HarnessError::Usage("trials must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(HarnessError::Usage(format!("alpha {alpha} outside [0,1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..trials {
        let mut tokens = 1u32;
        for _ in 0..d {
            if rng.random::<f64>() < alpha {
                tokens += 1;
            } else {
                break;
            }
        }
        let t = tokens as f64;
        sum += t;
        sum_sq += t * t;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok(McEstimate { mean, std_err: (var / n).sqrt() })
}

/// Every length-`horizon` continuation of `prompt` with its probability
/// under the target distributions, by direct enumeration.
pub fn enumerate_target_sequences(
    model: &dyn LayeredModel,
    prompt: &[TokenId],
    horizon: usize,
) -> Result<Vec<(Vec<TokenId>, f64)>, HarnessError> {
    let mut out = Vec::new();
    let mut ctx = prompt.to_vec();
    enumerate_rec(model, &mut ctx, prompt.len(), horizon, 1.0, &mut out)?;
    Ok(out)
}

fn enumerate_rec(
    model: &dyn LayeredModel,
    ctx: &mut Vec<TokenId>,
    prompt_len: usize,
    horizon: usize,
    prob: f64,
    out: &mut Vec<(Vec<TokenId>, f64)>,
) -> Result<(), HarnessError> {
    if ctx.len() - prompt_len == horizon {
        out.push((ctx[prompt_len..].to_vec(), prob));
        return Ok(());
    }
    let step = model.step(ctx)?;
    for (t, &p) in step.target_probs().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        ctx.push(TokenId(t as u32));
        enumerate_rec(model, ctx, prompt_len, horizon, prob * p, out)?;
        ctx.pop();
    }
    Ok(())
}

/// Empirical distribution of `horizon`-token outputs from speculative
/// sampling under `policy`, one fresh session per trial.
pub fn sampling_distribution(
    model: &dyn LayeredModel,
    cfg: &SessionConfig,
    prompt: &[TokenId],
    horizon: usize,
    policy: &PolicySpec,
    trials: u64,
    seed: u64,
) -> Result<BTreeMap<Vec<TokenId>, f64>, HarnessError> {
    if trials == 0 {
        return Err(HarnessError::Usage("trials must be >= 1".into()));
    }
    let mut cfg = cfg.clone();
    cfg.decode_mode = DecodeMode::Sampling;
    cfg.max_new_tokens = horizon;
    let mut counts: BTreeMap<Vec<TokenId>, u64> = BTreeMap::new();
    for trial in 0..trials {
        let mut p = policy.build(&cfg)?;
        let gen = decode(model, &cfg, prompt, p.as_mut(), crate::model::mix(seed, trial))?;
        *counts.entry(gen.output).or_default() += 1;
    }
    Ok(counts.into_iter().map(|(k, c)| (k, c as f64 / trials as f64)).collect())
}

/// Total variation distance between an enumerated law and an empirical one.
pub fn tv_distance(exact: &[(Vec<TokenId>, f64)], empirical: &BTreeMap<Vec<TokenId>, f64>) -> f64 {
    let mut diff = 0.0;
    let mut seen = 0.0;
    for (seq, p) in exact {
        let q = empirical.get(seq).copied().unwrap_or(0.0);
        seen += q;
        diff += (p - q).abs();
    }
    // Mass on sequences the enumeration gave zero probability.
    diff += (1.0 - seen).max(0.0);
    0.5 * diff
}
