//! Dynamic exit-layer controller.
//!
//! After every round the controller reads the LM-head output of every layer
//! at the verified positions (the "shadow tokens"), compares each layer's
//! argmax with the full model's, and keeps exponentially decayed sums of
//! match counts, window sizes and confidence scores. From those it
//!
//! * estimates a per-layer acceptance rate `α_ℓ`,
//! * picks the exit layer and speculation length maximizing expected
//!   tokens per loaded layer, `Σ_{i≤d} α^i / (dℓ + L)`,
//! * sets a confidence threshold per layer at the midpoint of the decayed
//!   mean confidence of matched and mismatched shadow tokens.
//!
//! None of this touches the model: the layer steps come with the round.

use crate::engine::{DraftPlan, RoundOutcome};
use crate::model::{LayerStep, LayeredModel, ModelError};
use crate::policy::Policy;
use crate::types::{AlphaDenominator, LayerIndex, SessionConfig, ShadowWindow, TokenId};

/// Per-layer argmax tokens and their probabilities at each position.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowMatrix {
    /// `tokens[ℓ-1][i]` for exit-capable layers `ℓ ∈ [1, L)`.
    pub tokens: Vec<Vec<TokenId>>,
    pub target_tokens: Vec<TokenId>,
    pub confidences: Vec<Vec<f64>>,
}

impl ShadowMatrix {
    pub fn positions(&self) -> usize {
        self.target_tokens.len()
    }

    pub fn exit_layers(&self) -> usize {
        self.tokens.len()
    }
}

pub fn shadow_tokens(steps: &[LayerStep]) -> ShadowMatrix {
    assert!(!steps.is_empty(), "shadow tokens need at least one position");
    let l = steps[0].num_layers();
    let mut tokens = vec![Vec::with_capacity(steps.len()); l - 1];
    let mut confidences = vec![Vec::with_capacity(steps.len()); l - 1];
    let mut target_tokens = Vec::with_capacity(steps.len());
    for s in steps {
        for layer in 1..l {
            let (t, c) = s.top1(layer);
            tokens[layer - 1].push(t);
            confidences[layer - 1].push(c);
        }
        target_tokens.push(s.target_top1().0);
    }
    ShadowMatrix { tokens, target_tokens, confidences }
}

/// One round's contribution to the decayed statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundStats {
    /// First mismatch of the exit layer, or the last position when none.
    pub u_r: usize,
    /// Inclusive end of each layer's window. Equal to `u_r` everywhere
    /// unless per-layer windows are configured.
    pub window_ends: Vec<usize>,
    pub c: Vec<usize>,
    pub tcs: Vec<f64>,
    pub fcs: Vec<f64>,
}

fn first_mismatch(row: &[TokenId], target: &[TokenId]) -> usize {
    row.iter().zip(target).position(|(a, b)| a != b).unwrap_or(target.len() - 1)
}

/// Counts matches and confidence sums over `[0, ends[ℓ]]` for each layer.
fn window_stats(sm: &ShadowMatrix, u_r: usize, window_ends: Vec<usize>) -> RoundStats {
    let n = sm.exit_layers();
    let mut c = vec![0; n];
    let mut tcs = vec![0.0; n];
    let mut fcs = vec![0.0; n];
    for layer in 0..n {
        for i in 0..=window_ends[layer] {
            let conf = sm.confidences[layer][i];
            if sm.tokens[layer][i] == sm.target_tokens[i] {
                c[layer] += 1;
                tcs[layer] += conf;
            } else {
                fcs[layer] += conf;
            }
        }
    }
    RoundStats { u_r, window_ends, c, tcs, fcs }
}

pub fn round_stats(sm: &ShadowMatrix, exit_layer: LayerIndex, window: ShadowWindow) -> RoundStats {
    assert!(exit_layer.get() >= 1 && exit_layer.get() <= sm.exit_layers(), "exit layer must be below L");
    let u_r = first_mismatch(&sm.tokens[exit_layer.offset()], &sm.target_tokens);
    let ends = match window {
        ShadowWindow::ExitLayer => vec![u_r; sm.exit_layers()],
        ShadowWindow::PerLayer => sm.tokens.iter().map(|row| first_mismatch(row, &sm.target_tokens)).collect(),
    };
    window_stats(sm, u_r, ends)
}

/// Exponentially decayed accumulators; each push is `A ← ω·A + a_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayedStats {
    pub sc: Vec<f64>,
    /// Decayed window end index `u` per layer (all equal with exit-layer windows).
    pub su: Vec<f64>,
    /// Decayed window size `u + 1` per layer.
    pub swin: Vec<f64>,
    pub stcs: Vec<f64>,
    pub sfcs: Vec<f64>,
    /// Decayed round count.
    pub scnt: f64,
}

impl DecayedStats {
    pub fn new(exit_layers: usize) -> Self {
        Self {
            sc: vec![0.0; exit_layers],
            su: vec![0.0; exit_layers],
            swin: vec![0.0; exit_layers],
            stcs: vec![0.0; exit_layers],
            sfcs: vec![0.0; exit_layers],
            scnt: 0.0,
        }
    }

    pub fn push(&mut self, rs: &RoundStats, omega: f64) {
        for l in 0..self.sc.len() {
            let end = rs.window_ends[l] as f64;
            self.sc[l] = omega * self.sc[l] + rs.c[l] as f64;
            self.su[l] = omega * self.su[l] + end;
            self.swin[l] = omega * self.swin[l] + end + 1.0;
            self.stcs[l] = omega * self.stcs[l] + rs.tcs[l];
            self.sfcs[l] = omega * self.sfcs[l] + rs.fcs[l];
        }
        self.scnt = omega * self.scnt + 1.0;
    }
}

/// Knobs of the acceptance-rate estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaParams {
    pub clamp_eps: f64,
    pub denominator: AlphaDenominator,
}

/// Per-layer acceptance estimates, clamped into `[eps, 1]`. `fallback` is
/// returned for layers with no usable denominator yet.
pub fn estimate_alpha(stats: &DecayedStats, params: AlphaParams, fallback: &[f64]) -> Vec<f64> {
    let clamp = |x: f64| x.clamp(params.clamp_eps, 1.0);
    (0..stats.sc.len())
        .map(|l| match params.denominator {
            AlphaDenominator::WindowLen if stats.swin[l] > 0.0 => clamp(stats.sc[l] / stats.swin[l]),
            AlphaDenominator::FirstMismatch if stats.su[l] > 0.0 => clamp(stats.sc[l] / stats.su[l]),
            AlphaDenominator::FirstMismatch if stats.scnt > 0.0 => clamp(stats.sc[l] / stats.scnt),
            _ => fallback.get(l).copied().unwrap_or(1.0),
        })
        .collect()
}

/// Expected tokens per loaded layer for a round drafting `d` tokens at
/// layer `ell` of an `L`-layer model with per-token acceptance `alpha`.
pub fn tpl(alpha: f64, ell: usize, d: usize, num_layers: usize) -> f64 {
    let mut sum = 0.0;
    let mut pow = 1.0;
    for _ in 0..=d {
        sum += pow;
        pow *= alpha;
    }
    sum / (d * ell + num_layers) as f64
}

/// Argmax of [`tpl`] over `ℓ ∈ [1, L)`, `d ∈ [0, d_max]`, preferring smaller
/// `ℓ` and then smaller `d` on ties. Returns `(ℓ, d, tpl)`.
pub fn best_exit_and_len(alpha: &[f64], num_layers: usize, d_max: usize) -> (LayerIndex, usize, f64) {
    let mut best = (LayerIndex(1), 0, f64::NEG_INFINITY);
    for (offset, &a) in alpha.iter().enumerate() {
        let ell = offset + 1;
        let (mut sum, mut pow) = (0.0, 1.0);
        for d in 0..=d_max {
            sum += pow;
            pow *= a;
            let value = sum / (d * ell + num_layers) as f64;
            if value > best.2 {
                best = (LayerIndex(ell), d, value);
            }
        }
    }
    best
}

pub fn select_plan(alpha: &[f64], thresholds: &[f64], cfg: &SessionConfig) -> DraftPlan {
    let (exit_layer, planned_len, _) = best_exit_and_len(alpha, cfg.num_layers, cfg.d_max);
    DraftPlan {
        exit_layer,
        threshold: thresholds[exit_layer.offset()],
        planned_len,
        cap_mode: cfg.draft_cap_mode,
    }
}

const DEGENERATE_MASS: f64 = 1e-12;

/// Midpoint of the decayed mean confidences of matched and mismatched
/// shadow tokens, per layer. A side with no mass drops out; with neither,
/// `cfg.default_threshold` is used.
pub fn update_threshold(stats: &DecayedStats, cfg: &SessionConfig) -> Vec<f64> {
    (0..stats.sc.len())
        .map(|l| {
            let matched = stats.sc[l];
            let mismatched = stats.swin[l] - stats.sc[l];
            let tau = match (matched > DEGENERATE_MASS, mismatched > DEGENERATE_MASS) {
                (true, true) => 0.5 * (stats.stcs[l] / matched + stats.sfcs[l] / mismatched),
                (true, false) => stats.stcs[l] / matched,
                (false, true) => stats.sfcs[l] / mismatched,
                (false, false) => cfg.default_threshold,
            };
            tau.clamp(0.0, 1.0)
        })
        .collect()
}

/// State seeded from the prompt before the first round.
#[derive(Debug, Clone)]
pub struct Prefill {
    pub stats: DecayedStats,
    pub alpha: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub plan: DraftPlan,
    pub window: usize,
}

fn alpha_params(cfg: &SessionConfig) -> AlphaParams {
    AlphaParams { clamp_eps: cfg.alpha_clamp_eps, denominator: cfg.alpha_denominator }
}

/// Runs the model over the last `prefill_window` prompt positions and folds
/// them in as one pseudo-round with window `[0, w-1]`. Not charged to any
/// ledger.
pub fn prefill_init(model: &dyn LayeredModel, prompt: &[TokenId], cfg: &SessionConfig) -> Result<Prefill, ModelError> {
    if prompt.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    let n = prompt.len();
    let w = cfg.prefill_window.min(n);
    let steps = (n - w + 1..=n).map(|k| model.step(&prompt[..k])).collect::<Result<Vec<_>, _>>()?;
    let sm = shadow_tokens(&steps);
    let rs = window_stats(&sm, w - 1, vec![w - 1; sm.exit_layers()]);
    let mut stats = DecayedStats::new(cfg.num_layers - 1);
    stats.push(&rs, cfg.omega);
    let seed = vec![1.0; cfg.num_layers - 1];
    let alpha = estimate_alpha(&stats, alpha_params(cfg), &seed);
    let thresholds = update_threshold(&stats, cfg);
    let plan = select_plan(&alpha, &thresholds, cfg);
    Ok(Prefill { stats, alpha, thresholds, plan, window: w })
}

/// The dynamic controller as a [`Policy`].
#[derive(Debug, Clone)]
pub struct DelController {
    cfg: SessionConfig,
    stats: DecayedStats,
    prefill_alpha: Vec<f64>,
    alpha: Vec<f64>,
    thresholds: Vec<f64>,
    plan: DraftPlan,
    last: Option<RoundStats>,
}

impl DelController {
    pub fn new(cfg: SessionConfig) -> Self {
        let n = cfg.num_layers - 1;
        let thresholds = vec![cfg.default_threshold; n];
        let alpha = vec![1.0; n];
        let plan = select_plan(&alpha, &thresholds, &cfg);
        Self {
            stats: DecayedStats::new(n),
            prefill_alpha: alpha.clone(),
            alpha,
            thresholds,
            plan,
            last: None,
            cfg,
        }
    }

    /// Folds one finished round into the statistics and returns the next plan.
    pub fn del_update(&mut self, outcome: &RoundOutcome) -> DraftPlan {
        let sm = shadow_tokens(&outcome.steps);
        let rs = round_stats(&sm, outcome.exit_layer_used, self.cfg.shadow_window);
        self.stats.push(&rs, self.cfg.omega);
        self.alpha = estimate_alpha(&self.stats, alpha_params(&self.cfg), &self.prefill_alpha);
        let (exit_layer, planned_len, _) = best_exit_and_len(&self.alpha, self.cfg.num_layers, self.cfg.d_max);
        self.thresholds = update_threshold(&self.stats, &self.cfg);
        self.plan = DraftPlan {
            exit_layer,
            threshold: self.thresholds[exit_layer.offset()],
            planned_len,
            cap_mode: self.cfg.draft_cap_mode,
        };
        self.last = Some(rs);
        self.plan
    }

    pub fn stats(&self) -> &DecayedStats {
        &self.stats
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn plan(&self) -> DraftPlan {
        self.plan
    }

    pub fn last_round(&self) -> Option<&RoundStats> {
        self.last.as_ref()
    }
}

impl Policy for DelController {
    fn id(&self) -> String {
        "del".into()
    }

    fn init(&mut self, model: &dyn LayeredModel, prompt: &[TokenId]) -> Result<DraftPlan, ModelError> {
        let p = prefill_init(model, prompt, &self.cfg)?;
        self.stats = p.stats;
        self.prefill_alpha = p.alpha.clone();
        self.alpha = p.alpha;
        self.thresholds = p.thresholds;
        self.plan = p.plan;
        Ok(self.plan)
    }

    fn observe(&mut self, outcome: &RoundOutcome) -> DraftPlan {
        self.del_update(outcome)
    }

    fn alpha_snapshot(&self) -> Option<Vec<f64>> {
        Some(self.alpha.clone())
    }
}
