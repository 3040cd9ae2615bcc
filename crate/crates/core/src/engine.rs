//! Speculative decoding rounds: draft at an exit layer, verify with the full
//! model, accept (greedy or speculative sampling), then emit the correction
//! or bonus token. The engine is policy-agnostic; a [`DraftPlan`] tells it
//! where to exit and when to stop.

use crate::model::{LayerStep, LayeredModel, ModelError};
use crate::types::{argmax, DecodeMode, DraftCapMode, LayerIndex, SessionConfig, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One round's drafting instructions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DraftPlan {
    pub exit_layer: LayerIndex,
    /// Drafting stops before a token whose exit-layer confidence is below this.
    pub threshold: f64,
    pub planned_len: usize,
    pub cap_mode: DraftCapMode,
}

impl DraftPlan {
    /// Plan that never drafts: every round is one target step.
    pub fn vanilla() -> Self {
        Self {
            exit_layer: LayerIndex(1),
            threshold: 0.0,
            planned_len: 0,
            cap_mode: DraftCapMode::PlanCapped,
        }
    }

    /// Upper bound on drafted tokens this round.
    pub fn draft_cap(&self, d_max: usize) -> usize {
        match self.cap_mode {
            DraftCapMode::Algorithm1 => d_max,
            DraftCapMode::PlanCapped => self.planned_len.min(d_max),
        }
    }
}

/// Cumulative cost accounting in layer loads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub tokens_emitted: u64,
    pub layers_loaded: u64,
}

impl CostLedger {
    pub fn charge(&mut self, tokens: u64, layers: u64) {
        self.tokens_emitted += tokens;
        self.layers_loaded += layers;
    }
}

/// Output of the draft loop.
#[derive(Debug, Clone)]
pub struct Draft {
    pub tokens: Vec<TokenId>,
    /// Steps for every examined position. When the threshold stopped the
    /// loop this includes the stopping position, so `steps.len() == g + 1`;
    /// when the cap was reached `steps.len() == g`.
    pub steps: Vec<LayerStep>,
    /// Exit-layer top-1 probability at each examined position.
    pub confidences: Vec<f64>,
}

/// Everything one round produced.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub drafted: Vec<TokenId>,
    pub emitted: Vec<TokenId>,
    pub accepted_count: usize,
    /// Layer steps for positions `0..=g`; position `g` is the bonus position.
    pub steps: Vec<LayerStep>,
    pub exit_layer_used: LayerIndex,
    pub layers_loaded: u64,
    /// Exit-layer top-1 probabilities at positions `0..=g`.
    pub confidences: Vec<f64>,
    pub plan: DraftPlan,
}

impl RoundOutcome {
    pub fn drafted_len(&self) -> usize {
        self.drafted.len()
    }

    /// First position where the exit layer's argmax differs from the
    /// target's, or `g` when none does.
    pub fn first_mismatch(&self) -> usize {
        let e = self.exit_layer_used.get();
        self.steps
            .iter()
            .position(|s| s.top1(e).0 != s.target_top1().0)
            .unwrap_or(self.drafted.len())
    }
}

/// Draws an index from `probs` by inverse CDF.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return TokenId(i as u32);
            }
        }
    }
    TokenId(last_positive as u32)
}

/// Auto-regressive drafting from the exit layer.
///
/// Before appending token `i` the exit distribution's top-1 probability is
/// compared with the plan threshold; a lower value ends the draft.
pub fn draft<R: Rng + ?Sized>(
    model: &dyn LayeredModel,
    context: &[TokenId],
    plan: &DraftPlan,
    d_max: usize,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<Draft, ModelError> {
    let cap = plan.draft_cap(d_max);
    let exit = plan.exit_layer;
    let mut buf = Vec::with_capacity(context.len() + cap + 1);
    buf.extend_from_slice(context);
    let mut out = Draft { tokens: Vec::new(), steps: Vec::new(), confidences: Vec::new() };
    for _ in 0..cap {
        let step = model.step(&buf)?;
        let q = step.exit_probs(exit)?;
        let (top, conf) = step.top1(exit.get());
        out.confidences.push(conf);
        if conf < plan.threshold {
            out.steps.push(step);
            break;
        }
        let token = match mode {
            DecodeMode::Greedy => top,
            DecodeMode::Sampling => sample_index(q, rng),
        };
        out.steps.push(step);
        out.tokens.push(token);
        buf.push(token);
    }
    Ok(out)
}

/// Greedy verification result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GreedyVerdict {
    pub accepted: usize,
    pub emitted: Vec<TokenId>,
}

/// Accepts the longest drafted prefix that matches the target argmax, then
/// emits the target token at the first mismatch (or the bonus token).
///
/// `target_tokens` holds the target argmax at positions `0..=g`.
pub fn verify_greedy(target_tokens: &[TokenId], drafted: &[TokenId]) -> GreedyVerdict {
    assert_eq!(target_tokens.len(), drafted.len() + 1, "need a target token at the bonus position");
    let accepted = drafted.iter().zip(target_tokens).take_while(|(d, t)| d == t).count();
    let mut emitted = drafted[..accepted].to_vec();
    emitted.push(target_tokens[accepted]);
    GreedyVerdict { accepted, emitted }
}

/// Speculative sampling. `q[i]` and `p[i]` are the draft and target
/// distributions at position `i`; `p` has one extra entry for the bonus
/// position. Returns the number of accepted drafts and the extra token
/// (residual resample or bonus).
pub fn verify_sampling<R: Rng + ?Sized>(
    drafted: &[TokenId],
    q: &[&[f64]],
    p: &[&[f64]],
    rng: &mut R,
) -> (usize, TokenId) {
    assert_eq!(q.len(), drafted.len());
    assert_eq!(p.len(), drafted.len() + 1);
    for (i, &x) in drafted.iter().enumerate() {
        let (px, qx) = (p[i][x.index()], q[i][x.index()]);
        let ratio = if qx > 0.0 { (px / qx).min(1.0) } else { 1.0 };
        let u: f64 = rng.random();
        if u < ratio {
            continue;
        }
        let residual: Vec<f64> = p[i].iter().zip(q[i]).map(|(a, b)| (a - b).max(0.0)).collect();
        let total: f64 = residual.iter().sum();
        assert!(total > 0.0, "rejection with an empty residual (p == q) is unreachable");
        let normalized: Vec<f64> = residual.iter().map(|r| r / total).collect();
        return (i, sample_index(&normalized, rng));
    }
    let g = drafted.len();
    (g, sample_index(p[g], rng))
}

/// Runs one full round against `context`, appending the emitted tokens and
/// charging `ledger` with `g·E + L` layer loads. At most `remaining` tokens
/// are emitted; the full layer cost is charged regardless.
#[allow(clippy::too_many_arguments)]
pub fn run_round<R: Rng + ?Sized>(
    model: &dyn LayeredModel,
    context: &mut Vec<TokenId>,
    plan: &DraftPlan,
    cfg: &SessionConfig,
    rng: &mut R,
    ledger: &mut CostLedger,
    remaining: usize,
) -> Result<RoundOutcome, ModelError> {
    let l = model.num_layers();
    let Draft { tokens: drafted, mut steps, mut confidences } =
        draft(model, context, plan, cfg.d_max, cfg.decode_mode, rng)?;
    let g = drafted.len();
    if steps.len() == g {
        let mut buf = Vec::with_capacity(context.len() + g);
        buf.extend_from_slice(context);
        buf.extend_from_slice(&drafted);
        let step = model.step(&buf)?;
        confidences.push(step.top1(plan.exit_layer.get()).1);
        steps.push(step);
    }
    debug_assert_eq!(steps.len(), g + 1);

    let (accepted_count, mut emitted) = match cfg.decode_mode {
        DecodeMode::Greedy => {
            let targets: Vec<TokenId> = steps.iter().map(|s| argmax(s.target_probs())).collect();
            let v = verify_greedy(&targets, &drafted);
            (v.accepted, v.emitted)
        }
        DecodeMode::Sampling => {
            let q: Vec<&[f64]> = steps[..g].iter().map(|s| s.layer_probs(plan.exit_layer.get())).collect();
            let p: Vec<&[f64]> = steps.iter().map(|s| s.target_probs()).collect();
            let (acc, extra) = verify_sampling(&drafted, &q, &p, rng);
            let mut emitted = drafted[..acc].to_vec();
            emitted.push(extra);
            (acc, emitted)
        }
    };
    emitted.truncate(remaining);

    let layers_loaded = (g * plan.exit_layer.get() + l) as u64;
    ledger.charge(emitted.len() as u64, layers_loaded);
    context.extend_from_slice(&emitted);
    Ok(RoundOutcome {
        drafted,
        emitted,
        accepted_count,
        steps,
        exit_layer_used: plan.exit_layer,
        layers_loaded,
        confidences,
        plan: *plan,
    })
}

/// One decode session: context, ledger and RNG, advanced a round at a time.
pub struct Decoder<'m> {
    model: &'m dyn LayeredModel,
    cfg: SessionConfig,
    context: Vec<TokenId>,
    prompt_len: usize,
    ledger: CostLedger,
    rng: ChaCha8Rng,
    rounds: usize,
}

impl<'m> Decoder<'m> {
    pub fn new(
        model: &'m dyn LayeredModel,
        cfg: SessionConfig,
        prompt: &[TokenId],
        rng_seed: u64,
    ) -> Result<Self, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        Ok(Self {
            model,
            cfg,
            context: prompt.to_vec(),
            prompt_len: prompt.len(),
            ledger: CostLedger::default(),
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            rounds: 0,
        })
    }

    pub fn remaining(&self) -> usize {
        self.cfg.max_new_tokens.saturating_sub(self.generated().len())
    }

    pub fn is_finished(&self) -> bool {
        self.remaining() == 0
    }

    pub fn run_round(&mut self, plan: &DraftPlan) -> Result<RoundOutcome, ModelError> {
        let remaining = self.remaining();
        let out = run_round(
            self.model,
            &mut self.context,
            plan,
            &self.cfg,
            &mut self.rng,
            &mut self.ledger,
            remaining,
        )?;
        self.rounds += 1;
        Ok(out)
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.context[self.prompt_len..]
    }

    pub fn context(&self) -> &[TokenId] {
        &self.context
    }

    pub fn ledger(&self) -> CostLedger {
        self.ledger
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }
}

/// Plain target-only greedy decoding of `n` tokens.
pub fn target_greedy(model: &dyn LayeredModel, prompt: &[TokenId], n: usize) -> Result<Vec<TokenId>, ModelError> {
    let mut ctx = prompt.to_vec();
    for _ in 0..n {
        let step = model.step(&ctx)?;
        ctx.push(step.target_top1().0);
    }
    Ok(ctx.split_off(prompt.len()))
}
