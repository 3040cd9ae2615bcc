//! Comparison policies: vanilla decoding, static early-exit speculation,
//! a finite-state speculation-length controller, and a confidence-threshold
//! controller that tracks a target acceptance rate.

use crate::engine::{DraftPlan, RoundOutcome};
use crate::model::{LayeredModel, ModelError};
use crate::policy::Policy;
use crate::types::{ConfigError, DraftCapMode, LayerIndex, SessionConfig, TokenId};

pub fn vanilla_plan() -> DraftPlan {
    DraftPlan::vanilla()
}

/// Fixed exit layer and fixed speculation length, no early stop.
pub fn ls_plan(exit_layer: usize, gamma: usize, cfg: &SessionConfig) -> Result<DraftPlan, ConfigError> {
    let exit_layer = LayerIndex::exit(exit_layer, cfg.num_layers)?;
    if gamma > cfg.d_max {
        return Err(ConfigError::OutOfRange { field: "gamma", bound: "[0, d_max]" });
    }
    Ok(DraftPlan { exit_layer, threshold: 0.0, planned_len: gamma, cap_mode: DraftCapMode::PlanCapped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VanillaPolicy;

impl Policy for VanillaPolicy {
    fn id(&self) -> String {
        "vanilla".into()
    }
    fn init(&mut self, _: &dyn LayeredModel, _: &[TokenId]) -> Result<DraftPlan, ModelError> {
        Ok(vanilla_plan())
    }
    fn observe(&mut self, _: &RoundOutcome) -> DraftPlan {
        vanilla_plan()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsPolicy {
    plan: DraftPlan,
}

impl LsPolicy {
    pub fn new(exit_layer: usize, gamma: usize, cfg: &SessionConfig) -> Result<Self, ConfigError> {
        Ok(Self { plan: ls_plan(exit_layer, gamma, cfg)? })
    }
}

impl Policy for LsPolicy {
    fn id(&self) -> String {
        format!("ls-e{}-g{}", self.plan.exit_layer, self.plan.planned_len)
    }
    fn init(&mut self, _: &dyn LayeredModel, _: &[TokenId]) -> Result<DraftPlan, ModelError> {
        Ok(self.plan)
    }
    fn observe(&mut self, _: &RoundOutcome) -> DraftPlan {
        self.plan
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FsState {
    pub gamma_current: usize,
}

/// +1 after a fully accepted round (up to `d_max`), -1 after any rejection
/// (down to 1).
pub fn fs_update(state: FsState, outcome: &RoundOutcome, d_max: usize) -> FsState {
    let gamma = if outcome.accepted_count == outcome.drafted_len() {
        (state.gamma_current + 1).min(d_max)
    } else {
        state.gamma_current.saturating_sub(1).max(1)
    };
    FsState { gamma_current: gamma }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FsPolicy {
    exit_layer: LayerIndex,
    initial: usize,
    state: FsState,
    d_max: usize,
}

impl FsPolicy {
    pub fn new(exit_layer: usize, gamma: usize, cfg: &SessionConfig) -> Result<Self, ConfigError> {
        let exit_layer = LayerIndex::exit(exit_layer, cfg.num_layers)?;
        if gamma < 1 || gamma > cfg.d_max {
            return Err(ConfigError::OutOfRange { field: "gamma", bound: "[1, d_max]" });
        }
        Ok(Self { exit_layer, initial: gamma, state: FsState { gamma_current: gamma }, d_max: cfg.d_max })
    }

    pub fn state(&self) -> FsState {
        self.state
    }

    fn plan(&self) -> DraftPlan {
        DraftPlan {
            exit_layer: self.exit_layer,
            threshold: 0.0,
            planned_len: self.state.gamma_current,
            cap_mode: DraftCapMode::PlanCapped,
        }
    }
}

impl Policy for FsPolicy {
    fn id(&self) -> String {
        format!("fs-e{}-g{}", self.exit_layer, self.initial)
    }
    fn init(&mut self, _: &dyn LayeredModel, _: &[TokenId]) -> Result<DraftPlan, ModelError> {
        self.state = FsState { gamma_current: self.initial };
        Ok(self.plan())
    }
    fn observe(&mut self, outcome: &RoundOutcome) -> DraftPlan {
        self.state = fs_update(self.state, outcome, self.d_max);
        self.plan()
    }
}

/// Threshold feedback law of the confidence-threshold controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DvRule {
    /// Move by `step·(target − rate)/(1 − target)`: exactly `step` down on a
    /// fully accepted round, and zero drift when the mean rate hits the target.
    #[default]
    Proportional,
    /// Move by `±step` on the sign of `rate − target`. Settles where half the
    /// rounds beat the target, not where the mean does.
    Sign,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DvState {
    pub threshold: f64,
    pub target_rate: f64,
    pub step: f64,
    pub rule: DvRule,
}

impl DvState {
    pub fn new(threshold: f64, target_rate: f64, step: f64) -> Result<Self, ConfigError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(ConfigError::OutOfRange { field: "dv.init_threshold", bound: "[0,1]" });
        }
        if !(0.0..1.0).contains(&target_rate) {
            return Err(ConfigError::OutOfRange { field: "dv.target_rate", bound: "[0,1)" });
        }
        if step.is_nan() || step <= 0.0 {
            return Err(ConfigError::OutOfRange { field: "dv.step", bound: "(0, inf)" });
        }
        Ok(Self { threshold, target_rate, step, rule: DvRule::default() })
    }

    pub fn with_rule(self, rule: DvRule) -> Self {
        Self { rule, ..self }
    }
}

/// Lowers the threshold after a round whose acceptance rate beat the target,
/// raises it otherwise. Rounds with no drafts leave it unchanged.
pub fn dv_update(state: DvState, outcome: &RoundOutcome) -> DvState {
    let g = outcome.drafted_len();
    if g == 0 {
        return state;
    }
    let rate = outcome.accepted_count as f64 / g as f64;
    let delta = match state.rule {
        DvRule::Proportional => state.step * (state.target_rate - rate) / (1.0 - state.target_rate),
        DvRule::Sign if rate > state.target_rate => -state.step,
        DvRule::Sign => state.step,
    };
    DvState { threshold: (state.threshold + delta).clamp(0.0, 1.0), ..state }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DvPolicy {
    exit_layer: LayerIndex,
    initial: DvState,
    state: DvState,
    d_max: usize,
}

impl DvPolicy {
    pub fn new(exit_layer: usize, state: DvState, cfg: &SessionConfig) -> Result<Self, ConfigError> {
        let exit_layer = LayerIndex::exit(exit_layer, cfg.num_layers)?;
        Ok(Self { exit_layer, initial: state, state, d_max: cfg.d_max })
    }

    pub fn state(&self) -> DvState {
        self.state
    }

    fn plan(&self) -> DraftPlan {
        DraftPlan {
            exit_layer: self.exit_layer,
            threshold: self.state.threshold,
            planned_len: self.d_max,
            cap_mode: DraftCapMode::Algorithm1,
        }
    }
}

impl Policy for DvPolicy {
    fn id(&self) -> String {
        format!("dv-e{}", self.exit_layer)
    }
    fn init(&mut self, _: &dyn LayeredModel, _: &[TokenId]) -> Result<DraftPlan, ModelError> {
        self.state = self.initial;
        Ok(self.plan())
    }
    fn observe(&mut self, outcome: &RoundOutcome) -> DraftPlan {
        self.state = dv_update(self.state, outcome);
        self.plan()
    }
}
