//! Command-line front end. Exit codes: 0 ok, 1 usage or config error,
//! 2 invariant violation or failed oracle check.

use crate::baselines::DvRule;
use crate::harness::{
    enumerate_target_sequences, grid_sweep, mc_expected_tokens, omega_sweep, run_experiment, sampling_distribution,
    segmented_sweep, synthetic_prompts, tv_distance, ExperimentConfig, HarnessError,
};
use crate::model::{BaseProcess, ModelSpec, Profile, ProfileShape, Regime, SyntheticModel};
use crate::policy::PolicySpec;
use crate::trace::replay_dir;
use crate::types::{SessionConfig, TokenId};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use toml::{Table, Value};

/// Relative tolerance for the Monte-Carlo round-length check.
pub const MC_REL_TOL: f64 = 0.01;
/// Total-variation bound for the sampling distribution check.
pub const TV_TOL: f64 = 0.02;

#[derive(Debug, Parser)]
#[command(name = "del-sim", version, about = "Early-exit speculative decoding simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode synthetic prompts under one or more policies.
    Run(RunArgs),
    /// Grid-search static (exit layer, speculation length) cells.
    Sweep(SweepArgs),
    /// Check simulated quantities against closed forms and enumeration.
    Oracle(OracleArgs),
    /// Run the dynamic controller for several decay factors.
    #[command(name = "omega-sweep")]
    OmegaSweep(OmegaArgs),
    /// Recompute ledgers from traces and compare with summary.csv.
    Replay(ReplayArgs),
}

/// Overrides for every session field. Unset flags keep the file value.
#[derive(Debug, Clone, Default, Args)]
pub struct SessionArgs {
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long, alias = "vocab")]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub d_max: Option<usize>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub prefill_window: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// greedy | sampling
    #[arg(long)]
    pub decode_mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// algorithm1 | plan_capped
    #[arg(long)]
    pub draft_cap_mode: Option<String>,
    #[arg(long)]
    pub alpha_clamp_eps: Option<f64>,
    #[arg(long)]
    pub default_threshold: Option<f64>,
    /// window_len | first_mismatch
    #[arg(long)]
    pub alpha_denominator: Option<String>,
    /// exit_layer | per_layer
    #[arg(long)]
    pub shadow_window: Option<String>,
}

impl SessionArgs {
    fn apply(&self, t: &mut Table) {
        fn put<T: Into<Value>>(t: &mut Table, key: &str, v: Option<T>) {
            if let Some(v) = v {
                t.insert(key.into(), v.into());
            }
        }
        let int = |v: Option<usize>| v.map(|v| v as i64);
        put(t, "num_layers", int(self.num_layers));
        put(t, "vocab_size", int(self.vocab_size));
        put(t, "d_max", int(self.d_max));
        put(t, "omega", self.omega);
        put(t, "prefill_window", int(self.prefill_window));
        put(t, "max_new_tokens", int(self.max_new_tokens));
        put(t, "decode_mode", self.decode_mode.clone());
        put(t, "draft_cap_mode", self.draft_cap_mode.clone());
        put(t, "alpha_clamp_eps", self.alpha_clamp_eps);
        put(t, "default_threshold", self.default_threshold);
        put(t, "alpha_denominator", self.alpha_denominator.clone());
        put(t, "shadow_window", self.shadow_window.clone());
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ExperimentArgs {
    /// TOML file with [session], [model] and [experiment] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub session: SessionArgs,
    /// Built-in model: toy | linear | step | regime
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    /// Output directory.
    #[arg(long, env = "DELSIM_OUT_DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PolicyArgs {
    /// vanilla | ls | fs | dv | del
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub exit_layer: Option<usize>,
    #[arg(long)]
    pub gamma: Option<usize>,
    #[arg(long)]
    pub target_rate: Option<f64>,
    #[arg(long)]
    pub dv_step: Option<f64>,
    #[arg(long)]
    pub init_threshold: Option<f64>,
    /// proportional | sign
    #[arg(long)]
    pub dv_rule: Option<String>,
}

impl PolicyArgs {
    pub fn spec(&self) -> Result<Option<PolicySpec>, HarnessError> {
        let Some(name) = self.policy.as_deref() else { return Ok(None) };
        let need = |v: Option<usize>, flag: &str| {
            v.ok_or_else(|| HarnessError::Usage(format!("--policy {name} needs --{flag}")))
        };
        Ok(Some(match name {
            "vanilla" => PolicySpec::Vanilla,
            "del" => PolicySpec::Del,
            "ls" => PolicySpec::Ls { exit_layer: need(self.exit_layer, "exit-layer")?, gamma: need(self.gamma, "gamma")? },
            "fs" => PolicySpec::Fs { exit_layer: need(self.exit_layer, "exit-layer")?, gamma: need(self.gamma, "gamma")? },
            "dv" => {
                let PolicySpec::Dv { exit_layer, target_rate, step, init_threshold, rule } =
                    PolicySpec::dv(need(self.exit_layer, "exit-layer")?)
                else {
                    unreachable!()
                };
                let rule = match self.dv_rule.as_deref() {
                    None => rule,
                    Some("proportional") => DvRule::Proportional,
                    Some("sign") => DvRule::Sign,
                    Some(other) => return Err(HarnessError::Usage(format!("unknown dv rule {other:?}"))),
                };
                PolicySpec::Dv {
                    exit_layer,
                    target_rate: self.target_rate.unwrap_or(target_rate),
                    step: self.dv_step.unwrap_or(step),
                    init_threshold: self.init_threshold.unwrap_or(init_threshold),
                    rule,
                }
            }
            other => return Err(HarnessError::Usage(format!("unknown policy {other:?}"))),
        }))
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Exit layers, `a..b` (inclusive) or a comma list. Default 1..L-1.
    #[arg(long)]
    pub ell: Option<String>,
    /// Speculation lengths. Default 0..d_max.
    #[arg(long)]
    pub d: Option<String>,
    /// Also write one grid per segment of this many generated tokens.
    #[arg(long)]
    pub segment_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Acceptance rate; without it every alpha in 0.1..0.9 is checked.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Speculation length; without it every d in 1..8 is checked.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub trials: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Compare speculative sampling with the enumerated target law.
    #[arg(long)]
    pub distribution_check: bool,
    #[arg(long, alias = "vocab", default_value_t = 3)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 4)]
    pub num_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub horizon: usize,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Debug, Args)]
pub struct OmegaArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Comma-separated decay factors.
    #[arg(long, default_value = "0.5,0.6,0.7,0.8,0.9,0.95,1.0")]
    pub omegas: String,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Directory holding summary.csv and traces/.
    #[arg(env = "DELSIM_OUT_DIR")]
    pub dir: PathBuf,
    /// Second run directory whose traces must match byte for byte.
    #[arg(long)]
    pub compare: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &HarnessError) -> i32 {
    match e {
        HarnessError::Invariant(_) => 2,
        _ => 1,
    }
}

pub fn execute(cmd: Command) -> Result<i32, HarnessError> {
    match cmd {
        Command::Run(a) => cmd_run(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Oracle(a) => cmd_oracle(&a),
        Command::OmegaSweep(a) => cmd_omega(&a),
        Command::Replay(a) => cmd_replay(&a),
    }
}

/// Built-in model families, sized to `num_layers`.
pub fn preset_model(name: &str, num_layers: usize, vocab: usize) -> Result<ModelSpec, HarnessError> {
    let step = |at: usize| Profile::Shape(ProfileShape::Step { at: at.clamp(1, num_layers - 1), low: 0.1, high: 0.95 });
    Ok(match name {
        "toy" => ModelSpec::cycle_toy(vocab),
        "linear" => ModelSpec::agreement(Profile::Shape(ProfileShape::Linear { first: 0.3, last: 0.95 })),
        "step" => ModelSpec::agreement(step(num_layers / 4)),
        "regime" => ModelSpec::regime_switching(vec![
            Regime { segment_len: 64, profile: step(2) },
            Regime { segment_len: 64, profile: step(num_layers / 2) },
        ]),
        other => return Err(HarnessError::Usage(format!("unknown model preset {other:?}"))),
    })
}

/// Merges the config file with flag overrides. Precedence: flag, file, default.
pub fn load_config(a: &ExperimentArgs) -> Result<ExperimentConfig, HarnessError> {
    let mut root: Table = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
            text.parse().map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    let session = table_mut(&mut root, "session")?;
    a.session.apply(session);
    let dims = (
        session.get("num_layers").and_then(Value::as_integer),
        session.get("vocab_size").and_then(Value::as_integer),
    );
    if let (Some(name), (Some(l), Some(v))) = (&a.model, dims) {
        let spec = preset_model(name, (l as usize).max(2), v.max(0) as usize)?;
        let value = Value::try_from(spec).map_err(|e| HarnessError::Usage(format!("model preset: {e}")))?;
        root.insert("model".into(), value);
    }
    let exp = table_mut(&mut root, "experiment")?;
    if let Some(n) = a.prompts {
        exp.insert("prompts".into(), Value::Integer(n as i64));
    }
    if let Some(n) = a.prompt_len {
        exp.insert("prompt_len".into(), Value::Integer(n as i64));
    }
    let mut cfg: ExperimentConfig =
        Value::Table(root).try_into().map_err(|e| HarnessError::Usage(format!("config: {e}")))?;
    // Seeds go past the range of TOML integers, so this one is applied after parsing.
    if let Some(seed) = a.session.seed {
        cfg.session.seed = seed;
    }
    cfg.session = cfg.session.validate()?;
    Ok(cfg)
}

fn table_mut<'t>(root: &'t mut Table, key: &str) -> Result<&'t mut Table, HarnessError> {
    root.entry(key)
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or_else(|| HarnessError::Usage(format!("`{key}` must be a table")))
}

/// `a..b` (inclusive), `a` or `a,b,c`.
pub fn parse_range(s: &str) -> Result<Vec<usize>, HarnessError> {
    let bad = || HarnessError::Usage(format!("bad range {s:?}"));
    let num = |x: &str| x.trim().parse::<usize>().map_err(|_| bad());
    let out: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        (num(a)?..=num(b)?).collect()
    } else {
        s.split(',').map(num).collect::<Result<_, _>>()?
    };
    if out.is_empty() {
        return Err(HarnessError::Usage(format!("empty range {s:?}")));
    }
    Ok(out)
}

fn cmd_run(a: &RunArgs) -> Result<i32, HarnessError> {
    let mut cfg = load_config(&a.exp)?;
    if let Some(spec) = a.policy.spec()? {
        cfg.experiment.policies = vec![spec];
    }
    let res = run_experiment(&cfg, a.exp.out.as_deref())?;
    println!("{:<16} {:>5} {:>10} {:>22} {:>12}", "policy", "runs", "eTPL", "95% CI", "sim_speedup");
    for g in &res.aggregates {
        println!(
            "{:<16} {:>5} {:>10.6} {:>10.6}..{:<10.6} {:>12.4}",
            g.policy, g.runs, g.mean_etpl, g.etpl_ci_low, g.etpl_ci_high, g.mean_sim_speedup
        );
    }
    if let Some(out) = &a.exp.out {
        println!("wrote {}", out.join("summary.csv").display());
    }
    Ok(0)
}

fn cmd_sweep(a: &SweepArgs) -> Result<i32, HarnessError> {
    let cfg = load_config(&a.exp)?;
    let s = &cfg.session;
    let ells = match &a.ell {
        Some(r) => parse_range(r)?,
        None => (1..s.num_layers).collect(),
    };
    let ds = match &a.d {
        Some(r) => parse_range(r)?,
        None => (0..=s.d_max).collect(),
    };
    let model = cfg.build_model()?;
    let prompts = synthetic_prompts(&model, cfg.experiment.prompts, cfg.experiment.prompt_len, s.seed)?;
    let (grid, segments) = match a.segment_len {
        Some(len) => segmented_sweep(&model, s, &ells, &ds, &prompts, s.seed, len)?,
        None => (grid_sweep(&model, s, &ells, &ds, &prompts, s.seed)?, Vec::new()),
    };
    if let Some(out) = &a.exp.out {
        std::fs::create_dir_all(out)?;
        grid.save(&out.join("grid.csv"))?;
        if !segments.is_empty() {
            std::fs::create_dir_all(out.join("segments"))?;
            for (k, g) in segments.iter().enumerate() {
                g.save(&out.join("segments").join(format!("grid-{k}.csv")))?;
            }
        }
    } else {
        grid.write_csv(std::io::stdout())?;
    }
    let (ell, d, v) = grid.argmax();
    println!("best cell: ell={ell} d={d} eTPL={v:.6} sim_speedup={:.4}", v * s.num_layers as f64);
    for (k, g) in segments.iter().enumerate() {
        let (ell, d, v) = g.argmax();
        println!("segment {k}: ell={ell} d={d} eTPL={v:.6}");
    }
    Ok(0)
}

fn geometric_sum(alpha: f64, d: usize) -> f64 {
    (0..=d).map(|i| alpha.powi(i as i32)).sum()
}

fn cmd_oracle(a: &OracleArgs) -> Result<i32, HarnessError> {
    if a.distribution_check {
        return oracle_distribution(a);
    }
    let trials = a.trials.unwrap_or(1_000_000);
    let alphas: Vec<f64> = match a.alpha {
        Some(x) => vec![x],
        None => (1..=9).map(|i| i as f64 / 10.0).collect(),
    };
    let ds: Vec<usize> = match a.d {
        Some(d) => vec![d],
        None => (1..=8).collect(),
    };
    let mut failed = 0;
    println!("{:>6} {:>3} {:>10} {:>10} {:>10} result", "alpha", "d", "mc", "closed", "rel_err");
    for &alpha in &alphas {
        for &d in &ds {
            let est = mc_expected_tokens(alpha, d, trials, crate::model::mix(a.seed, d as u64 * 1000 + (alpha * 100.0) as u64))?;
            let closed = geometric_sum(alpha, d);
            let rel = (est.mean - closed).abs() / closed;
            let ok = rel < MC_REL_TOL;
            failed += usize::from(!ok);
            println!("{alpha:>6.2} {d:>3} {:>10.5} {closed:>10.5} {rel:>10.2e} {}", est.mean, verdict(ok));
        }
    }
    Ok(if failed == 0 { 0 } else { 2 })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Agreement model used by the distribution check.
pub fn distribution_check_model(num_layers: usize, vocab: usize, seed: u64) -> Result<SyntheticModel, HarnessError> {
    let spec = ModelSpec::Agreement {
        base_process: BaseProcess::Dirichlet { concentration: 1.0 },
        agreement_profile: Profile::Shape(ProfileShape::Linear { first: 0.3, last: 0.9 }),
        confidence_match: crate::model::ConfidenceDist::Beta { alpha: 8.0, beta: 2.0 },
        confidence_mismatch: crate::model::ConfidenceDist::Beta { alpha: 2.0, beta: 8.0 },
        horizon: 1 << 20,
    };
    Ok(SyntheticModel::new(&spec, num_layers, vocab, seed)?)
}

fn oracle_distribution(a: &OracleArgs) -> Result<i32, HarnessError> {
    let trials = a.trials.unwrap_or(100_000);
    let mut cfg = SessionConfig::new(a.num_layers, a.vocab_size);
    cfg.seed = a.seed;
    let cfg = cfg.validate()?;
    if a.horizon == 0 {
        return Err(HarnessError::Usage("horizon must be >= 1".into()));
    }
    let spec = a.policy.spec()?.unwrap_or(PolicySpec::Ls { exit_layer: 1, gamma: a.horizon.min(cfg.d_max) });
    let model = distribution_check_model(a.num_layers, a.vocab_size, a.seed)?;
    let prompt = [TokenId(0)];
    let exact = enumerate_target_sequences(&model, &prompt, a.horizon)?;
    let emp = sampling_distribution(&model, &cfg, &prompt, a.horizon, &spec, trials, a.seed)?;
    let tv = tv_distance(&exact, &emp);
    let ok = tv < TV_TOL;
    println!("policy={} sequences={} trials={trials} tv={tv:.5} bound={TV_TOL} {}", spec.id(), exact.len(), verdict(ok));
    Ok(if ok { 0 } else { 2 })
}

fn cmd_omega(a: &OmegaArgs) -> Result<i32, HarnessError> {
    let cfg = load_config(&a.exp)?;
    let omegas: Vec<f64> = a
        .omegas
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| HarnessError::Usage(format!("bad omega {x:?}"))))
        .collect::<Result<_, _>>()?;
    if omegas.is_empty() {
        return Err(HarnessError::Usage("no omegas".into()));
    }
    let model = cfg.build_model()?;
    let s = &cfg.session;
    let prompts = synthetic_prompts(&model, cfg.experiment.prompts, cfg.experiment.prompt_len, s.seed)?;
    let rows = omega_sweep(&model, s, &omegas, &prompts, s.seed)?;
    if let Some(out) = &a.exp.out {
        std::fs::create_dir_all(out)?;
        let mut w = csv::Writer::from_path(out.join("omega.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    println!("{:>6} {:>10} {:>12} {:>10}", "omega", "eTPL", "sim_speedup", "switches");
    for r in &rows {
        println!("{:>6.2} {:>10.6} {:>12.4} {:>10.2}", r.omega, r.etpl, r.sim_speedup, r.exit_switches);
    }
    let max = rows.iter().map(|r| r.sim_speedup).fold(f64::MIN, f64::max);
    let min = rows.iter().map(|r| r.sim_speedup).fold(f64::MAX, f64::min);
    println!("spread: {:.2}% of max", 100.0 * (max - min) / max);
    Ok(0)
}

fn cmd_replay(a: &ReplayArgs) -> Result<i32, HarnessError> {
    let rows = replay_dir(&a.dir)?;
    for r in &rows {
        println!("{} prompt {}: eTPL {} PASS", r.policy, r.prompt, r.recomputed.etpl);
    }
    if let Some(other) = &a.compare {
        let theirs = replay_dir(other)?;
        if theirs.len() != rows.len() {
            return Err(HarnessError::Invariant(format!("{} runs vs {}", rows.len(), theirs.len())));
        }
        for (x, y) in rows.iter().zip(&theirs) {
            if x.recomputed != y.recomputed || !same_bytes(&x.trace, &y.trace)? {
                return Err(HarnessError::Invariant(format!(
                    "{} differs from {}",
                    x.trace.display(),
                    y.trace.display()
                )));
            }
        }
        println!("{} traces identical", rows.len());
    }
    Ok(0)
}

fn same_bytes(a: &Path, b: &Path) -> Result<bool, HarnessError> {
    Ok(std::fs::read(a)? == std::fs::read(b)?)
}
