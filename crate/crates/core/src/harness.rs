//! Replicated simulation sweeps over methods and effect sizes, and CSV output.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{aggregate, AggregateResult, Bootstrap, LayerTally, TallyTracker};
use crate::model::{DecisionRecord, HypothesisEvent};
use crate::procedures::{Method, Procedure, ProcedureConfig};
use crate::simgen::{generate, Pattern, ScenarioSpec, Strength, Structure};

/// Stable 64-bit seed from a master seed and a list of tags.
///
/// Every part is length-prefixed so distinct tuples never collide by
/// concatenation.
pub fn derive_seed(master: u64, parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Data seed of replicate `r` at effect size `beta`. The method is not part
/// of the key, so all methods see the same streams.
pub fn replicate_seed(master: u64, beta: f64, r: u64) -> u64 {
    derive_seed(master, &[b"replicate", &beta.to_bits().to_le_bytes(), &r.to_le_bytes()])
}

fn bootstrap_seed(master: u64, method: Method, beta: f64, layer: LayerKind) -> u64 {
    derive_seed(
        master,
        &[
            b"bootstrap",
            method.name().as_bytes(),
            &beta.to_bits().to_le_bytes(),
            layer.name().as_bytes(),
        ],
    )
}

/// The two layers reported by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Individual,
    Group,
}

impl LayerKind {
    pub const BOTH: [LayerKind; 2] = [LayerKind::Individual, LayerKind::Group];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Individual => "individual",
            LayerKind::Group => "group",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One simulated stream pushed through one method.
#[derive(Debug, Clone)]
pub struct ReplicateOutcome {
    pub events: Vec<HypothesisEvent>,
    pub records: Vec<DecisionRecord>,
    /// Individual and group tallies, in [`LayerKind`] order.
    pub tallies: [LayerTally; 2],
}

impl ReplicateOutcome {
    pub fn deltas(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.delta).collect()
    }
}

/// Runs `method` on the stream generated from `seed`.
///
/// Multi-layer methods see `[t, group]`; the classic methods only see `[t]`
/// and their group-layer results are derived from the individual decisions.
pub fn run_replicate(scenario: &ScenarioSpec, method: Method, seed: u64) -> Result<ReplicateOutcome> {
    let events = generate(scenario, seed)?.events();
    let layers = if method.is_multi_layer() { 2 } else { 1 };
    let config = ProcedureConfig::new(method.kind(), scenario.alpha, layers).with_eta(scenario.eta);
    let mut procedure = Procedure::new(config)?;
    let mut tracker = TallyTracker::new(2);
    let mut records = Vec::with_capacity(events.len());
    for event in &events {
        let record = if layers == 2 {
            procedure.step_or_pass(event)?
        } else {
            procedure.step_or_pass(&HypothesisEvent::new(event.t, event.p, vec![event.t]))?
        };
        tracker.observe(event, record.delta)?;
        records.push(record);
    }
    let tallies = [tracker.tallies()[0], tracker.tallies()[1]];
    Ok(ReplicateOutcome {
        events,
        records,
        tallies,
    })
}

/// A grid of (method, β) cells, each replicated `replicates` times.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub scenario: ScenarioSpec,
    pub beta_grid: Vec<f64>,
    pub methods: Vec<Method>,
    pub replicates: usize,
    pub master_seed: u64,
}

impl SweepSpec {
    /// β ∈ {0.5, 1.0, …, 5.0}.
    pub fn default_beta_grid() -> Vec<f64> {
        (1..=10).map(|i| i as f64 * 0.5).collect()
    }

    pub fn new(scenario: ScenarioSpec, replicates: usize) -> Self {
        let master_seed = scenario.seed;
        Self {
            scenario,
            beta_grid: Self::default_beta_grid(),
            methods: Method::ALL.to_vec(),
            replicates,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::NoReplicates);
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.beta_grid.is_empty() {
            return Err(Error::Config("beta grid is empty".into()));
        }
        if let Some(b) = self.beta_grid.iter().find(|b| !b.is_finite()) {
            return Err(Error::NonFinite(*b));
        }
        self.scenario.validate()
    }
}

/// One aggregated output row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub beta: f64,
    pub layer: LayerKind,
    pub result: AggregateResult,
}

/// Aggregated sweep results, sorted by method, β and layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<ResultRow>,
}

impl SweepTable {
    pub fn get(&self, method: Method, beta: f64, layer: LayerKind) -> Option<&AggregateResult> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.beta == beta && r.layer == layer)
            .map(|r| &r.result)
    }

    fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            a.method
                .cmp(&b.method)
                .then(a.beta.total_cmp(&b.beta))
                .then(a.layer.cmp(&b.layer))
        });
    }
}

/// Tallies of every replicate of one cell, in replicate order.
pub fn run_cell(sweep: &SweepSpec, method: Method, beta: f64) -> Result<Vec<[LayerTally; 2]>> {
    let scenario = ScenarioSpec {
        beta,
        ..sweep.scenario.clone()
    };
    (0..sweep.replicates as u64)
        .into_par_iter()
        .map(|r| run_replicate(&scenario, method, replicate_seed(sweep.master_seed, beta, r)).map(|o| o.tallies))
        .collect()
}

/// Runs every cell of the sweep. Results do not depend on thread count or
/// on the order of `methods` and `beta_grid`.
pub fn run_sweep(sweep: &SweepSpec) -> Result<SweepTable> {
    sweep.validate()?;
    let mut table = SweepTable::default();
    for &method in &sweep.methods {
        for &beta in &sweep.beta_grid {
            let tallies = run_cell(sweep, method, beta)?;
            for layer in LayerKind::BOTH {
                let column: Vec<LayerTally> = tallies.iter().map(|t| t[layer.index()]).collect();
                let bootstrap = Bootstrap::new(bootstrap_seed(sweep.master_seed, method, beta, layer));
                table.rows.push(ResultRow {
                    method,
                    beta,
                    layer,
                    result: aggregate(&column, sweep.scenario.eta, &bootstrap)?,
                });
            }
        }
    }
    table.sort();
    Ok(table)
}

/// `%g`-style rendering with six significant digits.
pub fn format_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        format!("{}e{}", trim_zeros(mantissa), exp)
    } else {
        trim_zeros(&format!("{:.*}", (5 - exp) as usize, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const RESULTS_HEADER: [&str; 10] = [
    "method", "beta", "layer", "fdr", "fdr_se", "mfdr", "mfdr_se", "power", "power_se", "replicates",
];

/// Writes the long-format results table.
pub fn write_results<W: Write>(table: &SweepTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    for row in &table.rows {
        let a = &row.result;
        w.write_record([
            row.method.name().to_string(),
            format_sig(row.beta),
            row.layer.name().to_string(),
            format_sig(a.fdr),
            format_sig(a.fdr_se),
            format_sig(a.mfdr),
            format_sig(a.mfdr_se),
            format_sig(a.power),
            format_sig(a.power_se),
            a.replicates.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a table written by [`write_results`].
pub fn read_results<R: Read>(input: R) -> Result<SweepTable> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().ne(RESULTS_HEADER) {
        return Err(Error::Config(format!("unexpected results header: {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Config(format!("bad number `{s}`"))) };
    let mut table = SweepTable::default();
    for record in r.records() {
        let record = record?;
        let layer = match &record[2] {
            "individual" => LayerKind::Individual,
            "group" => LayerKind::Group,
            other => return Err(Error::Config(format!("unknown layer `{other}`"))),
        };
        table.rows.push(ResultRow {
            method: record[0].parse()?,
            beta: num(&record[1])?,
            layer,
            result: AggregateResult {
                fdr: num(&record[3])?,
                fdr_se: num(&record[4])?,
                mfdr: num(&record[5])?,
                mfdr_se: num(&record[6])?,
                power: num(&record[7])?,
                power_se: num(&record[8])?,
                replicates: record[9]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad replicate count `{}`", &record[9])))?,
            },
        });
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Power,
    Fdr,
    Mfdr,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Power, Metric::Fdr, Metric::Mfdr];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Power => "power",
            Metric::Fdr => "fdr",
            Metric::Mfdr => "mfdr",
        }
    }

    fn pick(self, a: &AggregateResult) -> (f64, f64) {
        match self {
            Metric::Power => (a.power, a.power_se),
            Metric::Fdr => (a.fdr, a.fdr_se),
            Metric::Mfdr => (a.mfdr, a.mfdr_se),
        }
    }
}

/// Wide panel for one metric and layer: `beta,<method>,<method>_se,…`.
pub fn write_panel<W: Write>(table: &SweepTable, metric: Metric, layer: LayerKind, out: W) -> Result<()> {
    let mut methods: Vec<Method> = table.rows.iter().map(|r| r.method).collect();
    methods.dedup();
    let mut betas: Vec<f64> = table.rows.iter().map(|r| r.beta).collect();
    betas.sort_by(f64::total_cmp);
    betas.dedup();

    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["beta".to_string()];
    for m in &methods {
        header.push(m.name().to_string());
        header.push(format!("{}_se", m.name()));
    }
    w.write_record(&header)?;
    for &beta in &betas {
        let mut line = vec![format_sig(beta)];
        for &m in &methods {
            match table.get(m, beta, layer) {
                Some(a) => {
                    let (v, se) = metric.pick(a);
                    line.push(format_sig(v));
                    line.push(format_sig(se));
                }
                None => line.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&line)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `results.csv` and the six `{metric}_{layer}.csv` panels into `dir`.
pub fn emit_results(table: &SweepTable, dir: &Path) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        return Err(Error::EmptyTable("sweep produced no rows"));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let path = dir.join("results.csv");
    write_results(table, fs::File::create(&path)?)?;
    written.push(path);
    for metric in Metric::ALL {
        for layer in LayerKind::BOTH {
            let path = dir.join(format!("{}_{}.csv", metric.name(), layer.name()));
            write_panel(table, metric, layer, fs::File::create(&path)?)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// A named simulation setting from the standard figure grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FigureSetting {
    pub name: &'static str,
    pub scenario: ScenarioSpec,
}

/// The twelve standard settings `fig1a` … `fig4c`.
pub fn figure_settings() -> Vec<FigureSetting> {
    let base = ScenarioSpec::default();
    let with = |name, structure, pattern, strength, k| FigureSetting {
        name,
        scenario: ScenarioSpec {
            structure,
            pattern,
            strength,
            k,
            ..base.clone()
        },
    };
    use Pattern::*;
    use Strength::*;
    use Structure::*;
    vec![
        with("fig1a", Block, Fixed, Constant, 100.0),
        with("fig1b", Interleaved, Fixed, Constant, 100.0),
        with("fig1c", Unbalanced, Fixed, Constant, 100.0),
        with("fig2a", Interleaved, Fixed, Constant, 100.0),
        with("fig2b", Interleaved, Random, Constant, 100.0),
        with("fig2c", Interleaved, Markov, Constant, 100.0),
        with("fig3a", Block, Fixed, Constant, 100.0),
        with("fig3b", Block, Fixed, Increasing, 100.0),
        with("fig3c", Block, Fixed, Decreasing, 100.0),
        with("fig4a", Interleaved, Random, Constant, 50.0),
        with("fig4b", Interleaved, Random, Increasing, 50.0),
        with("fig4c", Interleaved, Random, Decreasing, 50.0),
    ]
}
