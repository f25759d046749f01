//! Command-line front end: `simulate`, `sweep`, `stream` and `validate`.
//!
//! Flags given on the command line take precedence over values in the
//! config file, which take precedence over built-in defaults.

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::harness::{emit_results, run_sweep, write_results, SweepSpec};
use crate::model::{DecisionRecord, GroupId, HypothesisEvent};
use crate::procedures::{
    validate_policy, BetaFamily, BetaSequence, LayerConfig, LevelRule, Method, PolicyReport, Procedure,
    ProcedureConfig, RewardRule, RulePolicy, SpendRule, UntestedPolicy,
};
use crate::simgen::{Pattern, ScenarioSpec, Strength, Structure};

#[derive(Debug, Parser)]
#[command(name = "mlfdr", version, about = "Online multi-layer FDR control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Replicate one scenario for one method and print one row per layer.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the rows to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a (method × β) grid and write results.csv plus six panel files.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated method names.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Test a newline-delimited JSON event stream, one decision per line.
    Stream {
        #[arg(long)]
        config: PathBuf,
        /// Input file; standard input when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Check a spending policy against the admissible reward range.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        horizon: Option<u64>,
    },
}

/// Failure with its exit code: 1 for runtime failures, 2 for usage or config errors.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::Scenario(_)
            | Error::UnknownMethod(_)
            | Error::NoReplicates
            | Error::InvalidPowerBound { .. }
            | Error::InvalidLevel { .. } => CliError::usage(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// Scenario and sweep keys. `G`, `n` and `N` keep their conventional names.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub structure: Option<Structure>,
    pub pattern: Option<Pattern>,
    pub strength: Option<Strength>,
    #[serde(rename = "G")]
    pub groups: Option<u64>,
    pub n: Option<u64>,
    #[serde(rename = "N")]
    pub total: Option<u64>,
    pub s: Option<f64>,
    pub k: Option<f64>,
    pub beta: Option<f64>,
    pub alpha: Option<f64>,
    pub eta: Option<f64>,
    pub p1: Option<f64>,
    #[serde(alias = "master_seed")]
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub methods: Option<Vec<String>>,
    pub replicates: Option<usize>,
    pub beta_grid: Option<Vec<f64>>,
}

impl ScenarioFile {
    pub fn scenario(&self) -> ScenarioSpec {
        let d = ScenarioSpec::default();
        ScenarioSpec {
            structure: self.structure.unwrap_or(d.structure),
            pattern: self.pattern.unwrap_or(d.pattern),
            strength: self.strength.unwrap_or(d.strength),
            groups: self.groups.unwrap_or(d.groups),
            per_group: self.n.unwrap_or(d.per_group),
            total: self.total.or(d.total),
            s: self.s.unwrap_or(d.s),
            k: self.k.unwrap_or(d.k),
            beta: self.beta.unwrap_or(d.beta),
            alpha: self.alpha.unwrap_or(d.alpha),
            eta: self.eta.unwrap_or(d.eta),
            seed: self.seed.unwrap_or(d.seed),
            p1: self.p1.unwrap_or(d.p1),
        }
    }
}

const DEFAULT_REPLICATES: usize = 100;

fn parse_methods(names: &[String]) -> Result<Vec<Method>, CliError> {
    let mut methods = Vec::new();
    for name in names {
        let m: Method = name.parse()?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    Ok(methods)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BetaFile {
    family: Option<String>,
    ratio: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum RuleValue {
    Number(f64),
    Name(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    /// `"alpha"` or a number.
    level: Option<RuleValue>,
    /// `"simple"` or a number.
    spend: Option<RuleValue>,
    /// φ_t = fraction · W(t − 1); excludes `spend`.
    spend_fraction: Option<f64>,
    /// `"simple"`, `"max"` or a number.
    reward: Option<RuleValue>,
    reward_offset: Option<f64>,
    power_bound: Option<f64>,
}

impl PolicyFile {
    fn build(&self) -> Result<RulePolicy, CliError> {
        let bad = |key: &str, v: &RuleValue| CliError::usage(format!("policy.{key}: unsupported value {v:?}"));
        let level = match &self.level {
            None => LevelRule::Alpha,
            Some(RuleValue::Name(s)) if s == "alpha" => LevelRule::Alpha,
            Some(RuleValue::Number(v)) => LevelRule::Constant(*v),
            Some(v) => return Err(bad("level", v)),
        };
        let spend = match (&self.spend, self.spend_fraction) {
            (Some(_), Some(_)) => return Err(CliError::usage("policy: set `spend` or `spend_fraction`, not both")),
            (None, Some(f)) => SpendRule::WealthFraction(f),
            (None, None) => SpendRule::Simple,
            (Some(RuleValue::Name(s)), None) if s == "simple" => SpendRule::Simple,
            (Some(RuleValue::Number(v)), None) => SpendRule::Constant(*v),
            (Some(v), None) => return Err(bad("spend", v)),
        };
        let reward = match &self.reward {
            None => RewardRule::Simple,
            Some(RuleValue::Name(s)) if s == "simple" => RewardRule::Simple,
            Some(RuleValue::Name(s)) if s == "max" => RewardRule::Max,
            Some(RuleValue::Number(v)) => RewardRule::Constant(*v),
            Some(v) => return Err(bad("reward", v)),
        };
        Ok(RulePolicy {
            level,
            spend,
            reward,
            reward_offset: self.reward_offset.unwrap_or(0.0),
            power_bound: self.power_bound.unwrap_or(1.0),
        })
    }
}

/// Procedure keys shared by `stream` and `validate`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcedureFile {
    method: Option<String>,
    alpha: Option<f64>,
    eta: Option<f64>,
    /// Number of group indices per input record.
    layers: Option<usize>,
    /// Prepend a singleton layer (group id = t) to the configured layers.
    individual_layer: Option<bool>,
    untested: Option<String>,
    horizon: Option<u64>,
    #[serde(default)]
    beta_sequence: BetaFile,
    #[serde(default)]
    policy: PolicyFile,
}

impl ProcedureFile {
    fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(0.1)
    }

    fn build(&self) -> Result<Procedure, CliError> {
        let method: Method = self.method.as_deref().unwrap_or("ml-LORD").parse()?;
        let alpha = self.alpha();
        let family = match self.beta_sequence.family.as_deref() {
            None | Some("inverse-square") => BetaFamily::InverseSquare,
            Some("geometric") => BetaFamily::Geometric {
                ratio: self.beta_sequence.ratio.unwrap_or(0.5),
            },
            Some(other) => return Err(CliError::usage(format!("beta_sequence.family: unknown family `{other}`"))),
        };
        let layer = LayerConfig {
            beta: BetaSequence::new(alpha, family)?,
            policy: Arc::new(self.policy.build()?),
        };
        let count = self.layers.unwrap_or(1) + self.individual_layer.unwrap_or(false) as usize;
        let untested: UntestedPolicy = self.untested.as_deref().unwrap_or("literal").parse()?;
        let config = ProcedureConfig {
            layers: vec![layer; count],
            ..ProcedureConfig::new(method.kind(), alpha, count)
                .with_eta(self.eta.unwrap_or(1.0))
                .with_untested(untested)
        };
        Ok(Procedure::new(config)?)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamInput {
    p: f64,
    groups: Vec<GroupId>,
}

/// One stream-mode decision line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDecision {
    pub t: u64,
    pub reject: bool,
    pub tested_layers: Vec<usize>,
    pub thresholds: Vec<Option<f64>>,
    pub halted: bool,
}

impl From<&DecisionRecord> for StreamDecision {
    fn from(r: &DecisionRecord) -> Self {
        Self {
            t: r.t,
            reject: r.delta,
            tested_layers: r.tested_layers(),
            thresholds: r.thresholds(),
            halted: r.halted,
        }
    }
}

#[derive(Debug, Serialize)]
struct StreamError {
    line: usize,
    error: String,
}

/// Processes newline-delimited events. Bad lines produce an error record and
/// do not advance time.
pub fn run_stream(
    procedure: &mut Procedure,
    individual_layer: bool,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let expected = procedure.layer_count() - individual_layer as usize;
    for (index, line) in input.lines().enumerate() {
        let line = line?;
        let number = index + 1;
        let result = serde_json::from_str::<StreamInput>(&line)
            .map_err(|e| e.to_string())
            .and_then(|rec| {
                if rec.groups.len() != expected {
                    return Err(Error::LayerCount {
                        expected,
                        got: rec.groups.len(),
                    }
                    .to_string());
                }
                let t = procedure.time() + 1;
                let mut groups = Vec::with_capacity(procedure.layer_count());
                if individual_layer {
                    groups.push(t);
                }
                groups.extend(rec.groups);
                procedure
                    .step_or_pass(&HypothesisEvent::new(t, rec.p, groups))
                    .map_err(|e| e.to_string())
            });
        let text = match result {
            Ok(record) => serde_json::to_string(&StreamDecision::from(&record)),
            Err(error) => serde_json::to_string(&StreamError { line: number, error }),
        }
        .map_err(|e| CliError::runtime(e.to_string()))?;
        writeln!(out, "{text}")?;
    }
    out.flush()?;
    Ok(())
}

fn simulate(
    config: &Path,
    method: Option<String>,
    beta: Option<f64>,
    replicates: Option<usize>,
    seed: Option<u64>,
    out_path: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let file: ScenarioFile = read_config(config)?;
    let mut scenario = file.scenario();
    if let Some(b) = beta {
        scenario.beta = b;
    }
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let name = method
        .or(file.method.clone())
        .or_else(|| file.methods.as_ref().and_then(|m| m.first().cloned()))
        .ok_or_else(|| CliError::usage("no method given (use --method or `method` in the config)"))?;
    let sweep = SweepSpec {
        beta_grid: vec![scenario.beta],
        methods: vec![name.parse()?],
        replicates: replicates.or(file.replicates).unwrap_or(DEFAULT_REPLICATES),
        master_seed: scenario.seed,
        scenario,
    };
    let table = run_sweep(&sweep)?;
    let mut buf = Vec::new();
    write_results(&table, &mut buf)?;
    out.write_all(&buf)?;
    if let Some(path) = out_path {
        fs::write(&path, &buf)?;
    }
    Ok(())
}

fn sweep(
    config: &Path,
    out_dir: &Path,
    methods: Option<Vec<String>>,
    replicates: Option<usize>,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let file: ScenarioFile = read_config(config)?;
    let mut scenario = file.scenario();
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let mut spec = SweepSpec::new(scenario, replicates.or(file.replicates).unwrap_or(DEFAULT_REPLICATES));
    if let Some(grid) = &file.beta_grid {
        spec.beta_grid = grid.clone();
    }
    if let Some(names) = methods.or(file.methods.clone()) {
        spec.methods = parse_methods(&names)?;
    }
    let table = run_sweep(&spec)?;
    for path in emit_results(&table, out_dir)? {
        writeln!(out, "{}", path.display())?;
    }
    Ok(())
}

fn validate(config: &Path, horizon: Option<u64>, out: &mut dyn Write) -> Result<(), CliError> {
    let file: ProcedureFile = read_config(config)?;
    let policy = file.policy.build()?;
    let horizon = horizon.or(file.horizon).unwrap_or(1000);
    match validate_policy(&policy, file.alpha(), horizon)? {
        PolicyReport::Admissible { horizon } => {
            writeln!(out, "ok: admissible for t = 1..{horizon}")?;
            Ok(())
        }
        PolicyReport::Violation(v) => Err(CliError::runtime(format!("violation: {v}"))),
    }
}

fn dispatch(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            config,
            method,
            beta,
            replicates,
            seed,
            out: path,
        } => simulate(&config, method, beta, replicates, seed, path, out),
        Command::Sweep {
            config,
            out: dir,
            methods,
            replicates,
            seed,
        } => sweep(&config, &dir, methods, replicates, seed, out),
        Command::Stream { config, input: path } => {
            let file: ProcedureFile = read_config(&config)?;
            let mut procedure = file.build()?;
            let individual = file.individual_layer.unwrap_or(false);
            match path {
                Some(path) => {
                    let f = fs::File::open(&path)
                        .map_err(|e| CliError::usage(format!("cannot open input {}: {e}", path.display())))?;
                    run_stream(&mut procedure, individual, &mut std::io::BufReader::new(f), out)
                }
                None => run_stream(&mut procedure, individual, input, out),
            }
        }
        Command::Validate { config, horizon } => validate(&config, horizon, out),
    }
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return if code == 0 { 0 } else { 2 };
        }
    };
    match dispatch(cli, input, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}
