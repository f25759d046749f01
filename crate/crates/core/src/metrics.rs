//! Per-layer error and power accounting, and aggregation over replicates.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{group_selection_sets, GroupId, HypothesisEvent, TruthState};

/// End-of-stream group counts of one layer in one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerTally {
    /// False group discoveries.
    pub v: u64,
    /// Group discoveries.
    pub r: u64,
    /// True group discoveries.
    pub td: u64,
    /// True groups seen.
    pub t: u64,
}

impl LayerTally {
    /// V / max(R, 1).
    pub fn fdp(&self) -> f64 {
        self.v as f64 / self.r.max(1) as f64
    }

    /// TD / max(T, 1).
    pub fn power(&self) -> f64 {
        self.td as f64 / self.t.max(1) as f64
    }
}

/// Tally of layer `layer` from its selection set and the group truths.
pub fn layer_tally(selected: &BTreeSet<GroupId>, truth: &TruthState, layer: usize) -> LayerTally {
    let true_groups = truth.true_groups(layer);
    let td = selected.intersection(&true_groups).count() as u64;
    LayerTally {
        v: selected.len() as u64 - td,
        r: selected.len() as u64,
        td,
        t: true_groups.len() as u64,
    }
}

/// Recomputes every layer's tally from a labelled event log and its decisions.
pub fn tallies_from_log(events: &[HypothesisEvent], deltas: &[bool], layers: usize) -> Result<Vec<LayerTally>> {
    let mut truth = TruthState::new(layers);
    for event in events {
        truth.observe(event)?;
    }
    let sets = group_selection_sets(events.iter().map(|e| e.groups.as_slice()).zip(deltas.iter().copied()), layers);
    Ok(sets.iter().enumerate().map(|(m, s)| layer_tally(s, &truth, m)).collect())
}

#[derive(Debug, Clone, Copy, Default)]
struct GroupFlags {
    rejected: bool,
    truth: bool,
}

/// Incrementally maintained tallies, one update per (event, decision).
#[derive(Debug, Clone)]
pub struct TallyTracker {
    groups: Vec<BTreeMap<GroupId, GroupFlags>>,
    tallies: Vec<LayerTally>,
}

impl TallyTracker {
    pub fn new(layers: usize) -> Self {
        Self {
            groups: vec![BTreeMap::new(); layers],
            tallies: vec![LayerTally::default(); layers],
        }
    }

    pub fn observe(&mut self, event: &HypothesisEvent, delta: bool) -> Result<()> {
        let truth = event.truth.ok_or(Error::TruthRequired { t: event.t })?;
        if event.groups.len() != self.groups.len() {
            return Err(Error::LayerCount {
                expected: self.groups.len(),
                got: event.groups.len(),
            });
        }
        for ((groups, tally), &g) in self.groups.iter_mut().zip(&mut self.tallies).zip(&event.groups) {
            let flags = groups.entry(g).or_default();
            if truth && !flags.truth {
                flags.truth = true;
                tally.t += 1;
                if flags.rejected {
                    // A false discovery turns true once a signal shows up in its group.
                    tally.v -= 1;
                    tally.td += 1;
                }
            }
            if delta && !flags.rejected {
                flags.rejected = true;
                tally.r += 1;
                if flags.truth {
                    tally.td += 1;
                } else {
                    tally.v += 1;
                }
            }
        }
        Ok(())
    }

    pub fn tallies(&self) -> &[LayerTally] {
        &self.tallies
    }
}

/// Replicate-level estimates for one (method, β, layer) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateResult {
    pub fdr: f64,
    pub fdr_se: f64,
    pub mfdr: f64,
    pub mfdr_se: f64,
    pub power: f64,
    pub power_se: f64,
    pub replicates: usize,
}

/// Nonparametric bootstrap settings for the mFDR standard error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bootstrap {
    pub resamples: usize,
    pub seed: u64,
}

impl Bootstrap {
    pub const DEFAULT_RESAMPLES: usize = 1000;

    pub fn new(seed: u64) -> Self {
        Self {
            resamples: Self::DEFAULT_RESAMPLES,
            seed,
        }
    }
}

/// Mean and standard error (sample sd / √n; zero for a single value).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn mfdr_of<'a>(tallies: impl Iterator<Item = &'a LayerTally>, eta: f64) -> f64 {
    let (mut v, mut r, mut n) = (0u64, 0u64, 0u64);
    for tally in tallies {
        v += tally.v;
        r += tally.r;
        n += 1;
    }
    let n = n as f64;
    (v as f64 / n) / (r as f64 / n + eta)
}

/// FDR, mFDR_η and power estimates with standard errors.
pub fn aggregate(tallies: &[LayerTally], eta: f64, bootstrap: &Bootstrap) -> Result<AggregateResult> {
    if tallies.is_empty() {
        return Err(Error::NoReplicates);
    }
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::Config(format!("eta must be positive, got {eta}")));
    }
    let fdp: Vec<f64> = tallies.iter().map(LayerTally::fdp).collect();
    let power: Vec<f64> = tallies.iter().map(LayerTally::power).collect();
    let (fdr, fdr_se) = mean_se(&fdp);
    let (power, power_se) = mean_se(&power);
    let mfdr = mfdr_of(tallies.iter(), eta);

    let n = tallies.len();
    let mfdr_se = if n < 2 || bootstrap.resamples < 2 {
        0.0
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(bootstrap.seed);
        let draws: Vec<f64> = (0..bootstrap.resamples)
            .map(|_| mfdr_of((0..n).map(|_| &tallies[rng.random_range(0..n)]), eta))
            .collect();
        let (m, _) = mean_se(&draws);
        let var = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        var.sqrt()
    };

    Ok(AggregateResult {
        fdr,
        fdr_se,
        mfdr,
        mfdr_se,
        power,
        power_se,
        replicates: n,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    fn tally(v: u64, r: u64, td: u64, t: u64) -> LayerTally {
        LayerTally { v, r, td, t }
    }

    #[test]
    fn fdp_guards_empty_selection() {
        assert_eq!(tally(0, 0, 0, 3).fdp(), 0.0);
    }

    #[test]
    fn layer_tally_counts_false_groups() {
        let mut truth = TruthState::new(1);
        for (t, g, th) in [(1, 1, false), (2, 2, true), (3, 3, true), (4, 4, true), (5, 5, true)] {
            truth
                .observe(&HypothesisEvent::new(t, 0.5, vec![g]).with_truth(th))
                .unwrap();
        }
        let selected = BTreeSet::from([1, 2, 3, 4]);
        let tally = layer_tally(&selected, &truth, 0);
        assert_eq!(tally, LayerTally { v: 1, r: 4, td: 3, t: 4 });
        assert_eq!(tally.fdp(), 0.25);
    }

    #[test]
    fn all_null_discoveries_are_all_false() {
        let mut truth = TruthState::new(1);
        truth.observe(&HypothesisEvent::new(1, 0.5, vec![1]).with_truth(false)).unwrap();
        let tally = layer_tally(&BTreeSet::from([1]), &truth, 0);
        assert_eq!(tally.fdp(), 1.0);
    }

    #[test]
    fn perfect_single_replicate() {
        let agg = aggregate(&[tally(0, 5, 5, 5)], 1.0, &Bootstrap::new(0)).unwrap();
        assert_eq!((agg.fdr, agg.mfdr, agg.power), (0.0, 0.0, 1.0));
        assert_eq!((agg.fdr_se, agg.mfdr_se, agg.power_se), (0.0, 0.0, 0.0));
    }

    #[test]
    fn fdr_is_mean_fdp() {
        let agg = aggregate(&[tally(0, 2, 2, 2), tally(1, 2, 1, 2)], 1.0, &Bootstrap::new(0)).unwrap();
        assert_abs_diff_eq!(agg.fdr, 0.25);
        // sd of (0, 0.5) is 0.353553..., over √2
        assert_abs_diff_eq!(agg.fdr_se, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn mfdr_is_ratio_of_means() {
        let agg = aggregate(&[tally(1, 2, 1, 1), tally(0, 0, 0, 1)], 1.0, &Bootstrap::new(3)).unwrap();
        assert_abs_diff_eq!(agg.mfdr, 0.25);
        assert!(agg.mfdr_se > 0.0);
    }

    #[test]
    fn zero_replicates_is_an_error() {
        assert!(matches!(aggregate(&[], 1.0, &Bootstrap::new(0)), Err(Error::NoReplicates)));
    }

    #[test]
    fn bootstrap_is_seeded() {
        let t = [tally(1, 3, 2, 2), tally(0, 1, 1, 2), tally(2, 2, 0, 2)];
        let a = aggregate(&t, 1.0, &Bootstrap::new(9)).unwrap();
        let b = aggregate(&t, 1.0, &Bootstrap::new(9)).unwrap();
        assert_eq!(a, b);
    }

    fn arb_log() -> impl Strategy<Value = Vec<(u64, bool, bool)>> {
        prop::collection::vec((0..5u64, any::<bool>(), prop::bool::weighted(0.3)), 0..60)
    }

    proptest! {
        #[test]
        fn tracker_matches_recomputation(log in arb_log()) {
            let events: Vec<HypothesisEvent> = log
                .iter()
                .enumerate()
                .map(|(i, &(g, truth, _))| {
                    let t = i as u64 + 1;
                    HypothesisEvent::new(t, 0.5, vec![t, g]).with_truth(truth)
                })
                .collect();
            let deltas: Vec<bool> = log.iter().map(|&(_, _, d)| d).collect();
            let mut tracker = TallyTracker::new(2);
            for (e, &d) in events.iter().zip(&deltas) {
                tracker.observe(e, d).unwrap();
            }
            let recomputed = tallies_from_log(&events, &deltas, 2).unwrap();
            prop_assert_eq!(tracker.tallies(), recomputed.as_slice());
            for t in tracker.tallies() {
                prop_assert_eq!(t.v + t.td, t.r);
                prop_assert!(t.td <= t.t);
            }
        }

        #[test]
        fn estimates_stay_in_unit_interval(
            raw in prop::collection::vec((0u64..10, 0u64..10, 0u64..10), 1..30),
            eta in 0.1f64..5.0,
        ) {
            let tallies: Vec<LayerTally> = raw
                .iter()
                .map(|&(v, td, extra)| tally(v, v + td, td, td + extra))
                .collect();
            let agg = aggregate(&tallies, eta, &Bootstrap { resamples: 50, seed: 1 }).unwrap();
            for x in [agg.fdr, agg.mfdr, agg.power] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            let mean_v = tallies.iter().map(|t| t.v as f64).sum::<f64>() / tallies.len() as f64;
            prop_assert!(agg.fdr <= mean_v + 1e-12);
        }

        #[test]
        fn single_replicate_fdp_dominates_mfdr(v in 0u64..10, td in 0u64..10) {
            prop_assume!(v + td >= 1);
            let t = tally(v, v + td, td, td);
            let agg = aggregate(&[t], 1.0, &Bootstrap::new(0)).unwrap();
            prop_assert!(agg.fdr >= agg.mfdr);
        }
    }
}
