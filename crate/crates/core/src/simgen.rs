//! Seeded generators for two-layer simulation streams.
//!
//! A scenario produces, for every hypothesis `t = 1..=N`, its group id in the
//! structured layer, its truth label and its p-value. The individual layer is
//! implicit: hypothesis `t` is alone in group `t`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GroupId, HypothesisEvent};

/// Order in which group members arrive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    /// All of group 1, then all of group 2, ...
    Block,
    /// 1, 2, ..., G, 1, 2, ..., G, ...
    Interleaved,
    /// Markov chain over groups: stay with probability `1 − p1`, otherwise
    /// jump uniformly to one of the other `G − 1` groups.
    Unbalanced,
}

/// Which hypotheses carry a true signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Fixed,
    Random,
    Markov,
}

/// Effect size of the true signals over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    /// z ~ N(1.5β, 1).
    Constant,
    /// z ~ N(β(1 + c/c_total), 1), `c` the running count of true signals.
    Increasing,
    /// z ~ N(β(2 − c/c_total), 1).
    Decreasing,
}

macro_rules! lowercase_names {
    ($ty:ty { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $(<$ty>::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(<$ty>::$variant),)+
                    other => Err(Error::Scenario(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

lowercase_names!(Structure { Block => "block", Interleaved => "interleaved", Unbalanced => "unbalanced" });
lowercase_names!(Pattern { Fixed => "fixed", Random => "random", Markov => "markov" });
lowercase_names!(Strength { Constant => "constant", Increasing => "increasing", Decreasing => "decreasing" });

/// Complete generative description of one simulated stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub structure: Structure,
    pub pattern: Pattern,
    pub strength: Strength,
    /// Number of groups G.
    pub groups: u64,
    /// Hypotheses per group n (balanced structures).
    pub per_group: u64,
    /// Total hypotheses N; `None` means `n · G`.
    pub total: Option<u64>,
    /// Percent of groups that are true groups.
    pub s: f64,
    /// Percent of true features within a true group.
    pub k: f64,
    /// Effect size β.
    pub beta: f64,
    pub alpha: f64,
    pub eta: f64,
    pub seed: u64,
    /// Switching probability of the unbalanced structure.
    pub p1: f64,
}

impl Default for ScenarioSpec {
    /// Block structure, fixed pattern, constant strength, s = 20, k = 100,
    /// G = 20, n = 10, α = 0.1, η = 1.
    fn default() -> Self {
        Self {
            structure: Structure::Block,
            pattern: Pattern::Fixed,
            strength: Strength::Constant,
            groups: 20,
            per_group: 10,
            total: None,
            s: 20.0,
            k: 100.0,
            beta: 2.0,
            alpha: 0.1,
            eta: 1.0,
            seed: 1,
            p1: 0.5,
        }
    }
}

impl ScenarioSpec {
    pub fn total_len(&self) -> u64 {
        self.total.unwrap_or(self.per_group * self.groups)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Scenario(msg));
        if self.groups == 0 || self.per_group == 0 {
            return fail("G and n must be >= 1".into());
        }
        if let (Some(total), Structure::Block | Structure::Interleaved) = (self.total, self.structure) {
            if total != self.per_group * self.groups {
                return fail(format!(
                    "balanced structures need N = n·G = {}, got N = {total}",
                    self.per_group * self.groups
                ));
            }
        }
        if self.structure == Structure::Unbalanced && self.groups < 2 {
            return fail("unbalanced structure needs G >= 2".into());
        }
        if !(0.0..=100.0).contains(&self.s) || !(0.0..=100.0).contains(&self.k) {
            return fail(format!("s and k are percentages, got s = {}, k = {}", self.s, self.k));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return fail(format!("eta must be positive, got {}", self.eta));
        }
        if !(0.0..=1.0).contains(&self.p1) {
            return fail(format!("p1 must lie in [0, 1], got {}", self.p1));
        }
        Ok(())
    }
}

/// `⌈percent · count / 100⌉`, robust to representation error in the product.
fn percent_ceil(percent: f64, count: usize) -> usize {
    let exact = percent * count as f64 / 100.0;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(count)
}

/// Layer-2 group id of every hypothesis, ids starting at 1.
pub fn gen_structure<R: Rng>(spec: &ScenarioSpec, rng: &mut R) -> Result<Vec<GroupId>> {
    let (g, n, total) = (spec.groups, spec.per_group, spec.total_len());
    match spec.structure {
        Structure::Block => Ok((1..=g).flat_map(|id| std::iter::repeat_n(id, n as usize)).collect()),
        Structure::Interleaved => Ok((0..n).flat_map(|_| 1..=g).collect()),
        Structure::Unbalanced => {
            if g < 2 {
                return Err(Error::Scenario("unbalanced structure needs G >= 2".into()));
            }
            let mut current = 1;
            let mut out = Vec::with_capacity(total as usize);
            for t in 0..total {
                if t > 0 && rng.random_bool(spec.p1) {
                    // Uniform over the G − 1 other groups.
                    let jump = rng.random_range(1..g);
                    current = if jump >= current { jump + 1 } else { jump };
                }
                out.push(current);
            }
            Ok(out)
        }
    }
}

/// Positions of each group's members in stream order, groups in first-appearance order.
fn members_by_appearance(structure: &[GroupId]) -> Vec<(GroupId, Vec<usize>)> {
    let mut index: BTreeMap<GroupId, usize> = BTreeMap::new();
    let mut groups: Vec<(GroupId, Vec<usize>)> = Vec::new();
    for (i, &g) in structure.iter().enumerate() {
        let slot = *index.entry(g).or_insert_with(|| {
            groups.push((g, Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(i);
    }
    groups
}

const MARKOV_STAY: f64 = 0.9;
const ERUPTION_REPEAT: f64 = 0.9;

/// Truth label of every hypothesis.
pub fn gen_truth<R: Rng>(spec: &ScenarioSpec, structure: &[GroupId], rng: &mut R) -> Vec<bool> {
    let mut truth = vec![false; structure.len()];
    match spec.pattern {
        Pattern::Fixed => {
            let members = members_by_appearance(structure);
            let true_groups = percent_ceil(spec.s, spec.groups as usize).min(members.len());
            for (_, positions) in members.iter().take(true_groups) {
                let n_true = percent_ceil(spec.k, positions.len());
                for &i in &positions[..n_true] {
                    truth[i] = true;
                }
            }
        }
        Pattern::Random => {
            let by_id: BTreeMap<GroupId, Vec<usize>> = members_by_appearance(structure).into_iter().collect();
            let g = spec.groups as usize;
            let mut chosen: Vec<usize> = sample(rng, g, percent_ceil(spec.s, g)).into_vec();
            chosen.sort_unstable();
            for id in chosen {
                let Some(positions) = by_id.get(&(id as GroupId + 1)) else {
                    continue;
                };
                let n_true = percent_ceil(spec.k, positions.len());
                for j in sample(rng, positions.len(), n_true) {
                    truth[positions[j]] = true;
                }
            }
        }
        Pattern::Markov => {
            let mut erupting = false;
            for i in 0..truth.len() {
                if i > 0 && !rng.random_bool(MARKOV_STAY) {
                    erupting = !erupting;
                }
                truth[i] = if erupting && i > 0 {
                    let repeat = rng.random_bool(ERUPTION_REPEAT);
                    if repeat {
                        truth[i - 1]
                    } else {
                        !truth[i - 1]
                    }
                } else {
                    rng.random_bool(0.5)
                };
            }
        }
    }
    truth
}

/// Two-sided p-value `2 (1 − Φ(|z|))` of a standard normal statistic.
pub fn two_sided_p(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::NonFinite(z));
    }
    Ok(libm::erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0))
}

/// Mean of the z statistic of the `count`-th true signal (1-based) out of `total`.
pub fn signal_mean(strength: Strength, beta: f64, count: u64, total: u64) -> f64 {
    let frac = count as f64 / total as f64;
    match strength {
        Strength::Constant => 1.5 * beta,
        Strength::Increasing => beta * (1.0 + frac),
        Strength::Decreasing => beta * (2.0 - frac),
    }
}

/// p-value of every hypothesis; nulls get z ~ N(0, 1).
pub fn gen_pvalues<R: Rng>(truth: &[bool], strength: Strength, beta: f64, rng: &mut R) -> Vec<f64> {
    let total = truth.iter().filter(|&&t| t).count() as u64;
    let mut count = 0;
    truth
        .iter()
        .map(|&is_true| {
            let noise: f64 = rng.sample(StandardNormal);
            let mean = if is_true {
                count += 1;
                signal_mean(strength, beta, count, total)
            } else {
                0.0
            };
            two_sided_p(mean + noise).expect("finite statistic")
        })
        .collect()
}

/// One generated stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub structure: Vec<GroupId>,
    pub truth: Vec<bool>,
    pub p: Vec<f64>,
}

impl Realization {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Two-layer events: `[t, group]` with truth labels attached.
    pub fn events(&self) -> Vec<HypothesisEvent> {
        (0..self.len())
            .map(|i| {
                let t = i as u64 + 1;
                HypothesisEvent::new(t, self.p[i], vec![t, self.structure[i]]).with_truth(self.truth[i])
            })
            .collect()
    }
}

/// Generates structure, truth and p-values from one seeded stream, in that order.
pub fn generate(spec: &ScenarioSpec, seed: u64) -> Result<Realization> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let structure = gen_structure(spec, &mut rng)?;
    let truth = gen_truth(spec, &structure, &mut rng);
    let p = gen_pvalues(&truth, spec.strength, spec.beta, &mut rng);
    Ok(Realization { structure, truth, p })
}
