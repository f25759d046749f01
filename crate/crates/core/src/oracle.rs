//! Independent reference computations used to cross-check the procedures.
//!
//! The single-layer references are written out longhand from the classic
//! per-step rules and share no code with [`crate::procedures`]; agreement
//! between the two is therefore evidence rather than a tautology.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::harness::derive_seed;
use crate::metrics::{mean_se, TallyTracker};
use crate::model::{DecisionRecord, GroupId, HypothesisEvent};
use crate::procedures::{Procedure, ProcedureConfig, ProcedureKind};
use crate::simgen::{generate, ScenarioSpec};

/// One step of a single-layer reference run. `threshold` is `None` when the
/// hypothesis was not tested (alpha-investing after wealth exhaustion).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceStep {
    pub reject: bool,
    pub threshold: Option<f64>,
}

fn basel_term(alpha: f64, j: u64) -> f64 {
    let j = j as f64;
    6.0 * alpha / (PI * PI * j * j)
}

/// Classic alpha-investing with α_t = α, φ = α/(1−α), ψ = φ + α.
pub fn single_layer_gai_reference(p: &[f64], alpha: f64, eta: f64) -> Vec<ReferenceStep> {
    let spend = alpha / (1.0 - alpha);
    let reward = spend + alpha;
    let mut wealth = alpha * eta;
    let mut out = Vec::with_capacity(p.len());
    for &pi in p {
        if wealth <= 0.0 {
            out.push(ReferenceStep {
                reject: false,
                threshold: None,
            });
            continue;
        }
        let reject = pi < alpha;
        wealth += if reject { reward - spend } else { -spend };
        out.push(ReferenceStep {
            reject,
            threshold: Some(alpha),
        });
    }
    out
}

/// Classic LOND: level β_i · (D + 1), D the discoveries so far.
pub fn single_layer_lond_reference(p: &[f64], alpha: f64) -> Vec<ReferenceStep> {
    let mut discoveries = 0u64;
    p.iter()
        .enumerate()
        .map(|(i, &pi)| {
            let level = (basel_term(alpha, i as u64 + 1) * (discoveries + 1) as f64).min(1.0);
            let reject = pi < level;
            discoveries += reject as u64;
            ReferenceStep {
                reject,
                threshold: Some(level),
            }
        })
        .collect()
}

/// Classic LORD: level β_ζ, ζ − 1 the tests since the last discovery.
pub fn single_layer_lord_reference(p: &[f64], alpha: f64) -> Vec<ReferenceStep> {
    let mut last_discovery = 0usize;
    p.iter()
        .enumerate()
        .map(|(i, &pi)| {
            let since = (i + 1 - last_discovery) as u64;
            let level = basel_term(alpha, since);
            let reject = pi < level;
            if reject {
                last_discovery = i + 1;
            }
            ReferenceStep {
                reject,
                threshold: Some(level),
            }
        })
        .collect()
}

/// κ_i^m = i − Σ_{j≤i} δ_{g_j^m}^m(i) + Σ_g δ_g^m(i), evaluated directly from
/// the first `i` records.
pub fn kappa_direct(log: &[DecisionRecord], layer: usize, i: usize) -> Result<u64> {
    if i > log.len() {
        return Err(Error::LogIndex { index: i, len: log.len() });
    }
    let prefix = &log[..i];
    let rejected: BTreeSet<GroupId> = prefix.iter().filter(|r| r.delta).map(|r| r.groups[layer]).collect();
    let in_rejected = prefix.iter().filter(|r| rejected.contains(&r.groups[layer])).count();
    Ok((i - in_rejected + rejected.len()) as u64)
}

/// FDP^m(d_k^m) for every discovery index k of layer `layer`, judged against
/// group truths as of the discovery time.
pub fn per_discovery_fdp(events: &[HypothesisEvent], deltas: &[bool], layer: usize) -> Result<Vec<f64>> {
    let mut truth: BTreeMap<GroupId, bool> = BTreeMap::new();
    let mut rejected: Vec<GroupId> = Vec::new();
    let mut out = Vec::new();
    for (event, &delta) in events.iter().zip(deltas) {
        let label = event.truth.ok_or(Error::TruthRequired { t: event.t })?;
        let g = event.groups[layer];
        *truth.entry(g).or_insert(false) |= label;
        if delta && !rejected.contains(&g) {
            rejected.push(g);
            let false_discoveries = rejected.iter().filter(|g| !truth[g]).count();
            out.push(false_discoveries as f64 / rejected.len() as f64);
        }
    }
    Ok(out)
}

/// A^m(j) = αR^m(j) − V^m(j) + αη − W^m(j) for `j = 0..=N`, one series per layer.
///
/// Runs multi-layer alpha-investing with the default policy over labelled
/// events; after wealth exhaustion the process stays frozen.
pub fn wealth_process(events: &[HypothesisEvent], layers: usize, alpha: f64, eta: f64) -> Result<Vec<Vec<f64>>> {
    let mut procedure = Procedure::new(ProcedureConfig::new(ProcedureKind::AlphaInvesting, alpha, layers).with_eta(eta))?;
    let mut tracker = TallyTracker::new(layers);
    let mut series = vec![vec![0.0]; layers];
    for event in events {
        let record = procedure.step_or_pass(event)?;
        tracker.observe(event, record.delta)?;
        for (m, s) in series.iter_mut().enumerate() {
            let tally = tracker.tallies()[m];
            let wealth = procedure.layers()[m].wealth();
            s.push(alpha * tally.r as f64 - tally.v as f64 + alpha * eta - wealth);
        }
    }
    Ok(series)
}

/// Monte Carlo mean and standard error of A^m(j) per layer and step.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub mean: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub replicates: usize,
}

impl ProbeResult {
    /// Steps where the mean falls below `−sigmas · SE`, as `(layer, j)`.
    pub fn violations(&self, sigmas: f64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (m, (mean, se)) in self.mean.iter().zip(&self.se).enumerate() {
            for (j, (mu, s)) in mean.iter().zip(se).enumerate() {
                if *mu < -sigmas * s {
                    out.push((m, j));
                }
            }
        }
        out
    }
}

/// Simulates `replicates` two-layer ml-GAI streams and summarises A^m(j).
pub fn submartingale_probe(spec: &ScenarioSpec, replicates: usize, seed: u64) -> Result<ProbeResult> {
    if replicates == 0 {
        return Err(Error::NoReplicates);
    }
    let mut runs = Vec::with_capacity(replicates);
    for r in 0..replicates {
        let realization = generate(spec, derive_seed(seed, &[b"probe", &(r as u64).to_le_bytes()]))?;
        runs.push(wealth_process(&realization.events(), 2, spec.alpha, spec.eta)?);
    }
    let steps = runs[0][0].len();
    let mut mean = vec![vec![0.0; steps]; 2];
    let mut se = vec![vec![0.0; steps]; 2];
    let mut column = vec![0.0; replicates];
    for m in 0..2 {
        for j in 0..steps {
            for (slot, run) in column.iter_mut().zip(&runs) {
                *slot = run[m][j];
            }
            (mean[m][j], se[m][j]) = mean_se(&column);
        }
    }
    Ok(ProbeResult { mean, se, replicates })
}
