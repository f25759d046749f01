//! Stream elements, per-layer state and the group-level view of decisions.
//!
//! A layer is a partition of the hypothesis stream into groups. A group is
//! rejected the first time any hypothesis inside it is rejected, and stays
//! rejected. The individual level is an ordinary layer whose groups are
//! singletons, so events simply carry `t` as their group id for that layer.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Group identifier inside one layer. Ids need not be contiguous.
pub type GroupId = u64;

/// One element of the hypothesis stream.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisEvent {
    /// Arrival index, starting at 1. Only used for audit output.
    pub t: u64,
    pub p: f64,
    /// Group of this hypothesis in each layer, in layer order.
    pub groups: Vec<GroupId>,
    /// Whether the hypothesis is a true signal. Present in simulation/replay only.
    pub truth: Option<bool>,
    /// Optional per-layer statistics replacing `p` in the corresponding layer,
    /// for callers that combine p-values within a group.
    pub layer_p: Option<Vec<f64>>,
}

impl HypothesisEvent {
    pub fn new(t: u64, p: f64, groups: Vec<GroupId>) -> Self {
        Self {
            t,
            p,
            groups,
            truth: None,
            layer_p: None,
        }
    }

    pub fn with_truth(mut self, truth: bool) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn with_layer_p(mut self, layer_p: Vec<f64>) -> Self {
        self.layer_p = Some(layer_p);
        self
    }

    /// Statistic compared against layer `m`'s threshold.
    pub fn layer_statistic(&self, m: usize) -> f64 {
        match &self.layer_p {
            Some(ps) => ps[m],
            None => self.p,
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidPValue(self.p));
        }
        if self.groups.len() != layers {
            return Err(Error::LayerCount {
                expected: layers,
                got: self.groups.len(),
            });
        }
        if let Some(ps) = &self.layer_p {
            if ps.len() != layers {
                return Err(Error::LayerCount {
                    expected: layers,
                    got: ps.len(),
                });
            }
            if let Some(&bad) = ps.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::InvalidPValue(bad));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct GroupStatus {
    rejected: bool,
    tests: u64,
}

/// Mutable state of one layer of a multi-layer procedure.
///
/// Only tested (pending) hypotheses touch this state. The effective test
/// count is kept as `tests_done - tests_in_rejected + rejections`, which
/// equals `i - #{j <= i in rejected groups} + #rejected groups` because
/// hypotheses arriving in an already rejected group cancel out of both sums.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    groups: BTreeMap<GroupId, GroupStatus>,
    pub(crate) wealth: f64,
    rejections: u64,
    tests_done: u64,
    tests_in_rejected: u64,
    pub(crate) zeta: u64,
    last_discovery: Option<u64>,
}

impl LayerState {
    pub fn new(initial_wealth: f64) -> Self {
        Self {
            groups: BTreeMap::new(),
            wealth: initial_wealth,
            rejections: 0,
            tests_done: 0,
            tests_in_rejected: 0,
            zeta: 1,
            last_discovery: None,
        }
    }

    pub fn is_rejected(&self, group: GroupId) -> bool {
        self.groups.get(&group).is_some_and(|g| g.rejected)
    }

    pub fn wealth(&self) -> f64 {
        self.wealth
    }

    /// R^m: number of rejected groups.
    pub fn rejections(&self) -> u64 {
        self.rejections
    }

    pub fn tests_done(&self) -> u64 {
        self.tests_done
    }

    /// Tests since the most recent discovery, counting the upcoming one.
    pub fn zeta(&self) -> u64 {
        self.zeta
    }

    pub fn last_discovery(&self) -> Option<u64> {
        self.last_discovery
    }

    /// Effective number of tests with every rejected group collapsed to one.
    pub fn kappa(&self) -> u64 {
        self.tests_done - self.tests_in_rejected + self.rejections
    }

    pub fn rejected_groups(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.groups
            .iter()
            .filter(|(_, s)| s.rejected)
            .map(|(&g, _)| g)
    }

    pub fn snapshot(&self) -> LayerSnapshot {
        LayerSnapshot {
            wealth: self.wealth,
            rejections: self.rejections,
            tests_done: self.tests_done,
        }
    }

    /// Books one test of a pending hypothesis in `group` at time `t`.
    pub(crate) fn record_test(&mut self, group: GroupId, rejected: bool, t: u64) {
        let status = self.groups.entry(group).or_default();
        debug_assert!(!status.rejected, "tested a group that is already rejected");
        status.tests += 1;
        self.tests_done += 1;
        if rejected {
            status.rejected = true;
            self.tests_in_rejected += status.tests;
            self.rejections += 1;
            self.last_discovery = Some(t);
        }
    }
}

/// The part of a layer's state a spending policy may look at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSnapshot {
    pub wealth: f64,
    pub rejections: u64,
    pub tests_done: u64,
}

/// Per-layer part of a [`DecisionRecord`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutcome {
    /// The layer's group was still pending, so the hypothesis was tested here.
    pub tested: bool,
    /// Threshold the layer's statistic had to fall strictly below.
    pub threshold: Option<f64>,
    pub newly_rejected: bool,
    /// Wealth after the step (alpha-investing layers only).
    pub wealth: Option<f64>,
    pub rejections: u64,
    pub kappa: u64,
    pub zeta: u64,
}

/// Outcome of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub t: u64,
    pub delta: bool,
    pub groups: Vec<GroupId>,
    pub layers: Vec<LayerOutcome>,
    /// Alpha-investing wealth is exhausted after this step.
    pub halted: bool,
}

impl DecisionRecord {
    pub fn tested_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.tested)
            .map(|(m, _)| m)
            .collect()
    }

    pub fn thresholds(&self) -> Vec<Option<f64>> {
        self.layers.iter().map(|l| l.threshold).collect()
    }
}

/// Group-level truth θ_g^m(t) for every layer, built from labelled events.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthState {
    layers: Vec<BTreeMap<GroupId, bool>>,
    individuals: Vec<bool>,
}

impl TruthState {
    pub fn new(layers: usize) -> Self {
        Self {
            layers: vec![BTreeMap::new(); layers],
            individuals: Vec::new(),
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Folds one labelled event into the group truths.
    pub fn observe(&mut self, event: &HypothesisEvent) -> Result<()> {
        let truth = event.truth.ok_or(Error::TruthRequired { t: event.t })?;
        if event.groups.len() != self.layers.len() {
            return Err(Error::LayerCount {
                expected: self.layers.len(),
                got: event.groups.len(),
            });
        }
        for (layer, &g) in self.layers.iter_mut().zip(&event.groups) {
            let entry = layer.entry(g).or_insert(false);
            *entry |= truth;
        }
        self.individuals.push(truth);
        Ok(())
    }

    pub fn is_true(&self, layer: usize, group: GroupId) -> bool {
        self.layers[layer].get(&group).copied().unwrap_or(false)
    }

    /// S^m(t): groups holding at least one true hypothesis seen so far.
    pub fn true_groups(&self, layer: usize) -> BTreeSet<GroupId> {
        self.layers[layer]
            .iter()
            .filter(|(_, &v)| v)
            .map(|(&g, _)| g)
            .collect()
    }

    pub fn individuals(&self) -> &[bool] {
        &self.individuals
    }
}

/// Ŝ^m(t) for every layer: groups holding at least one rejected hypothesis.
///
/// `decisions` yields each hypothesis's group indices together with its
/// individual decision δ_i.
pub fn group_selection_sets<'a, I>(decisions: I, layers: usize) -> Vec<BTreeSet<GroupId>>
where
    I: IntoIterator<Item = (&'a [GroupId], bool)>,
{
    let mut sets = vec![BTreeSet::new(); layers];
    for (groups, delta) in decisions {
        if delta {
            for (set, &g) in sets.iter_mut().zip(groups) {
                set.insert(g);
            }
        }
    }
    sets
}

/// [`group_selection_sets`] over a procedure's own decision log.
pub fn selection_sets_from_records(records: &[DecisionRecord], layers: usize) -> Vec<BTreeSet<GroupId>> {
    group_selection_sets(records.iter().map(|r| (r.groups.as_slice(), r.delta)), layers)
}
