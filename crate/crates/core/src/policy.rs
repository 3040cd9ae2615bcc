//! The policy interface shared by the dynamic controller and the baselines,
//! plus a serializable selector used by configs and the CLI.

use crate::baselines::{DvPolicy, DvRule, DvState, FsPolicy, LsPolicy, VanillaPolicy};
use crate::del::DelController;
use crate::engine::{DraftPlan, RoundOutcome};
use crate::model::{LayeredModel, ModelError};
use crate::types::{ConfigError, SessionConfig, TokenId};
use serde::{Deserialize, Serialize};

/// Chooses the plan for every round of a decode session.
///
/// `init` may run the model over the prompt (pre-fill). `observe` receives
/// the finished round and must decide the next plan from it alone.
pub trait Policy {
    fn id(&self) -> String;
    fn init(&mut self, model: &dyn LayeredModel, prompt: &[TokenId]) -> Result<DraftPlan, ModelError>;
    fn observe(&mut self, outcome: &RoundOutcome) -> DraftPlan;

    /// Current per-layer acceptance estimates, for policies that keep them.
    fn alpha_snapshot(&self) -> Option<Vec<f64>> {
        None
    }
}

fn default_dv_target() -> f64 {
    0.9
}
fn default_dv_step() -> f64 {
    0.01
}
fn default_dv_threshold() -> f64 {
    0.6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Vanilla,
    Ls {
        exit_layer: usize,
        gamma: usize,
    },
    Fs {
        exit_layer: usize,
        gamma: usize,
    },
    Dv {
        exit_layer: usize,
        #[serde(default = "default_dv_target")]
        target_rate: f64,
        #[serde(default = "default_dv_step")]
        step: f64,
        #[serde(default = "default_dv_threshold")]
        init_threshold: f64,
        #[serde(default)]
        rule: DvRule,
    },
    Del,
}

impl PolicySpec {
    pub fn dv(exit_layer: usize) -> Self {
        PolicySpec::Dv {
            exit_layer,
            target_rate: default_dv_target(),
            step: default_dv_step(),
            init_threshold: default_dv_threshold(),
            rule: DvRule::default(),
        }
    }

    /// Short identifier used in file names and tables.
    pub fn id(&self) -> String {
        match self {
            PolicySpec::Vanilla => "vanilla".into(),
            PolicySpec::Ls { exit_layer, gamma } => format!("ls-e{exit_layer}-g{gamma}"),
            PolicySpec::Fs { exit_layer, gamma } => format!("fs-e{exit_layer}-g{gamma}"),
            PolicySpec::Dv { exit_layer, .. } => format!("dv-e{exit_layer}"),
            PolicySpec::Del => "del".into(),
        }
    }

    pub fn build(&self, cfg: &SessionConfig) -> Result<Box<dyn Policy>, ConfigError> {
        Ok(match *self {
            PolicySpec::Vanilla => Box::new(VanillaPolicy),
            PolicySpec::Ls { exit_layer, gamma } => Box::new(LsPolicy::new(exit_layer, gamma, cfg)?),
            PolicySpec::Fs { exit_layer, gamma } => Box::new(FsPolicy::new(exit_layer, gamma, cfg)?),
            PolicySpec::Dv { exit_layer, target_rate, step, init_threshold, rule } => Box::new(DvPolicy::new(
                exit_layer,
                DvState::new(init_threshold, target_rate, step)?.with_rule(rule),
                cfg,
            )?),
            PolicySpec::Del => Box::new(DelController::new(cfg.clone())),
        })
    }
}
