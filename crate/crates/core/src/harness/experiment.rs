use super::{bootstrap_ci, decode, decode_with, session_seed, synthetic_prompts, HarnessError, RunReport};
use crate::del::DelController;
use crate::engine::target_greedy;
use crate::model::{LayeredModel, ModelSpec, SyntheticModel};
use crate::policy::PolicySpec;
use crate::trace::write_trace;
use crate::types::{ConfigError, DecodeMode, SessionConfig, TokenId};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_policies() -> Vec<PolicySpec> {
    vec![PolicySpec::Del]
}
fn default_prompts() -> usize {
    50
}
fn default_prompt_len() -> usize {
    16
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentParams {
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicySpec>,
    #[serde(default = "default_prompts")]
    pub prompts: usize,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    /// In greedy mode, compare every output with target-only decoding.
    #[serde(default = "default_true")]
    pub check_lossless: bool,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            policies: default_policies(),
            prompts: default_prompts(),
            prompt_len: default_prompt_len(),
            check_lossless: true,
        }
    }
}

/// Contents of an experiment config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub session: SessionConfig,
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub experiment: ExperimentParams,
}

impl ExperimentConfig {
    pub fn build_model(&self) -> Result<SyntheticModel, HarnessError> {
        let spec = self.model.as_ref().ok_or(ConfigError::Missing("model"))?;
        Ok(SyntheticModel::new(spec, self.session.num_layers, self.session.vocab_size, self.session.seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub policy: String,
    pub runs: usize,
    pub mean_etpl: f64,
    pub etpl_ci_low: f64,
    pub etpl_ci_high: f64,
    pub mean_sim_speedup: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub reports: Vec<RunReport>,
    pub aggregates: Vec<Aggregate>,
}

/// Mean and bootstrap interval of eTPL per policy, in first-seen order.
pub fn aggregate(reports: &[RunReport], seed: u64) -> Vec<Aggregate> {
    let mut order: Vec<&str> = Vec::new();
    for r in reports {
        if !order.contains(&r.policy.as_str()) {
            order.push(&r.policy);
        }
    }
    order
        .into_iter()
        .map(|policy| {
            let etpl: Vec<f64> = reports.iter().filter(|r| r.policy == policy).map(|r| r.etpl).collect();
            let speed: Vec<f64> = reports.iter().filter(|r| r.policy == policy).map(|r| r.sim_speedup).collect();
            let (lo, hi) = bootstrap_ci(&etpl, 1000, seed);
            Aggregate {
                policy: policy.to_string(),
                runs: etpl.len(),
                mean_etpl: etpl.iter().sum::<f64>() / etpl.len() as f64,
                etpl_ci_low: lo,
                etpl_ci_high: hi,
                mean_sim_speedup: speed.iter().sum::<f64>() / speed.len() as f64,
            }
        })
        .collect()
}

/// Runs every policy on every prompt. With `out`, writes
/// `summary.csv`, `aggregate.csv`, `config.toml` and `traces/<policy>-<prompt>.jsonl`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentResult, HarnessError> {
    let session = cfg.session.clone().validate()?;
    let model = cfg.build_model()?;
    let params = &cfg.experiment;
    if params.prompts == 0 || params.prompt_len == 0 {
        return Err(HarnessError::Usage("prompts and prompt_len must be >= 1".into()));
    }
    if params.policies.is_empty() {
        return Err(ConfigError::Missing("experiment.policies").into());
    }
    let prompts = synthetic_prompts(&model, params.prompts, params.prompt_len, session.seed)?;
    let reference: Option<Vec<Vec<TokenId>>> = if session.decode_mode == DecodeMode::Greedy && params.check_lossless {
        Some(
            prompts
                .iter()
                .map(|p| target_greedy(&model, p, session.max_new_tokens))
                .collect::<Result<_, _>>()?,
        )
    } else {
        None
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir.join("traces"))?;
        let echo = toml::to_string(cfg).map_err(|e| HarnessError::Usage(format!("config echo: {e}")))?;
        std::fs::write(dir.join("config.toml"), echo)?;
    }

    let mut reports = Vec::new();
    for spec in &params.policies {
        for (i, prompt) in prompts.iter().enumerate() {
            let mut policy = spec.build(&session)?;
            let gen = decode(&model, &session, prompt, policy.as_mut(), session_seed(session.seed, i))?;
            if let Some(reference) = &reference {
                if gen.output != reference[i] {
                    return Err(HarnessError::Invariant(format!(
                        "{} prompt {i}: greedy output differs from target-only decoding",
                        spec.id()
                    )));
                }
            }
            let trace = format!("traces/{}-{}.jsonl", spec.id(), i);
            if let Some(dir) = out {
                write_trace(&dir.join(&trace), &gen.records)?;
            }
            reports.push(RunReport::new(spec.id(), i, session.seed, session.num_layers, gen.ledger, trace)?);
        }
    }
    let aggregates = aggregate(&reports, session.seed);
    if let Some(dir) = out {
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        for r in &reports {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("aggregate.csv"))?;
        for a in &aggregates {
            w.serialize(a)?;
        }
        w.flush()?;
    }
    Ok(ExperimentResult { reports, aggregates })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaRow {
    pub omega: f64,
    pub etpl: f64,
    pub sim_speedup: f64,
    /// Mean number of rounds whose exit layer differs from the previous round's.
    pub exit_switches: f64,
}

/// One dynamic-controller run per `ω` over shared prompts and seeds.
pub fn omega_sweep(
    model: &dyn LayeredModel,
    cfg: &SessionConfig,
    omegas: &[f64],
    prompts: &[Vec<TokenId>],
    seed: u64,
) -> Result<Vec<OmegaRow>, HarnessError> {
    if prompts.is_empty() {
        return Err(HarnessError::Usage("omega sweep needs at least one prompt".into()));
    }
    omegas
        .iter()
        .map(|&omega| {
            let mut c = cfg.clone();
            c.omega = omega;
            let c = c.validate()?;
            let (mut etpl, mut switches) = (0.0, 0.0);
            for (i, prompt) in prompts.iter().enumerate() {
                let mut del = DelController::new(c.clone());
                let mut last_exit = None;
                let mut n_switch = 0usize;
                let gen = decode_with(model, &c, prompt, &mut del, session_seed(seed, i), |out, _| {
                    if last_exit.is_some_and(|e| e != out.exit_layer_used) {
                        n_switch += 1;
                    }
                    last_exit = Some(out.exit_layer_used);
                })?;
                etpl += gen.etpl();
                switches += n_switch as f64;
            }
            let n = prompts.len() as f64;
            let etpl = etpl / n;
            Ok(OmegaRow { omega, etpl, sim_speedup: etpl * cfg.num_layers as f64, exit_switches: switches / n })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Profile, ProfileShape};

    fn small_config() -> ExperimentConfig {
        let mut session = SessionConfig::new(8, 16);
        session.max_new_tokens = 48;
        session.seed = 5;
        ExperimentConfig {
            session,
            model: Some(ModelSpec::agreement(Profile::Shape(ProfileShape::Linear { first: 0.4, last: 0.95 }))),
            experiment: ExperimentParams {
                policies: vec![
                    PolicySpec::Vanilla,
                    PolicySpec::Ls { exit_layer: 3, gamma: 4 },
                    PolicySpec::Fs { exit_layer: 3, gamma: 2 },
                    PolicySpec::dv(3),
                    PolicySpec::Del,
                ],
                prompts: 3,
                prompt_len: 8,
                check_lossless: true,
            },
        }
    }

    #[test]
    fn writes_layout_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let res = run_experiment(&small_config(), Some(dir.path())).unwrap();
        assert_eq!(res.reports.len(), 15);
        assert_eq!(res.aggregates.len(), 5);
        assert!(dir.path().join("summary.csv").exists());
        assert!(dir.path().join("traces/del-2.jsonl").exists());
        assert!(dir.path().join("traces/ls-e3-g4-0.jsonl").exists());
        for r in &res.reports {
            assert_eq!(r.etpl, r.tokens_emitted as f64 / r.layers_loaded as f64);
            assert_eq!(r.sim_speedup, r.etpl * 8.0);
        }
        assert_eq!(res.aggregates[0].mean_etpl, 1.0 / 8.0);
        let back: ExperimentConfig = toml::from_str(&std::fs::read_to_string(dir.path().join("config.toml")).unwrap()).unwrap();
        assert_eq!(back, small_config());
    }

    #[test]
    fn missing_model_is_reported() {
        let mut cfg = small_config();
        cfg.model = None;
        let err = run_experiment(&cfg, None).unwrap_err();
        assert_eq!(err.to_string(), "missing field: model");
    }

    #[test]
    fn omega_rows_are_per_omega() {
        let cfg = small_config();
        let model = cfg.build_model().unwrap();
        let prompts = synthetic_prompts(&model, 2, 8, 0).unwrap();
        let rows = omega_sweep(&model, &cfg.session, &[0.5, 1.0], &prompts, 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].omega, 1.0);
        assert!(rows.iter().all(|r| r.sim_speedup == r.etpl * 8.0));
        assert!(omega_sweep(&model, &cfg.session, &[1.5], &prompts, 0).is_err());
    }
}
