//! Multi-layer online testing procedures.
//!
//! All four procedures share one skeleton. A layer is *pending* for the
//! current hypothesis when the hypothesis's group in that layer has not been
//! rejected yet. The hypothesis is rejected iff its statistic falls strictly
//! below the threshold of every pending layer, and only pending layers are
//! charged or updated. Thresholds per procedure:
//!
//! * alpha-investing: the policy's level α_t^m; wealth moves by ψ − φ on a
//!   rejection and by −φ otherwise, and the stream halts once any layer's
//!   wealth reaches zero.
//! * LOND: `min(1, β_t · (R^m + 1))`; the modified variant indexes β by the
//!   effective test count κ instead of `t`.
//! * LORD: `β_ζ`, where ζ counts tests since the layer's last discovery.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{DecisionRecord, GroupId, HypothesisEvent, LayerOutcome, LayerSnapshot, LayerState};

const SIX_OVER_PI_SQUARED: f64 = 6.0 / (PI * PI);

/// Family of a nonnegative sequence summing to α.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaFamily {
    /// β_j = α · 6 / (π² j²).
    InverseSquare,
    /// β_j = α (1 − r) r^(j−1). Terms underflow to zero for very large `j`.
    Geometric { ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSequence {
    alpha: f64,
    family: BetaFamily,
}

impl BetaSequence {
    pub fn new(alpha: f64, family: BetaFamily) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if let BetaFamily::Geometric { ratio } = family {
            if !(ratio > 0.0 && ratio < 1.0) {
                return Err(Error::Config(format!("geometric ratio must lie in (0, 1), got {ratio}")));
            }
        }
        Ok(Self { alpha, family })
    }

    pub fn inverse_square(alpha: f64) -> Self {
        Self {
            alpha,
            family: BetaFamily::InverseSquare,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn family(&self) -> BetaFamily {
        self.family
    }

    /// β_j for `j >= 1`.
    pub fn eval(&self, j: u64) -> Result<f64> {
        if j == 0 {
            return Err(Error::BetaIndex(j));
        }
        Ok(self.term(j))
    }

    fn term(&self, j: u64) -> f64 {
        debug_assert!(j >= 1);
        match self.family {
            BetaFamily::InverseSquare => {
                let j = j as f64;
                self.alpha * SIX_OVER_PI_SQUARED / (j * j)
            }
            BetaFamily::Geometric { ratio } => self.alpha * (1.0 - ratio) * ratio.powf((j - 1) as f64),
        }
    }
}

/// Values of a spending policy at one step of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyValues {
    /// Significance level α_t^m.
    pub level: f64,
    /// Spend φ_t^m charged whenever the layer is tested.
    pub spend: f64,
    /// Reward ψ_t^m earned on a discovery.
    pub reward: f64,
    /// Power bound ρ_t^m.
    pub power_bound: f64,
}

impl PolicyValues {
    /// Upper end of the admissible reward range, `min(φ/ρ + α, φ/α_t + α + 1)`.
    pub fn reward_limit(&self, alpha: f64) -> f64 {
        self.power_limit(alpha).min(self.level_limit(alpha))
    }

    pub fn power_limit(&self, alpha: f64) -> f64 {
        self.spend / self.power_bound + alpha
    }

    pub fn level_limit(&self, alpha: f64) -> f64 {
        self.spend / self.level + alpha + 1.0
    }
}

/// Level, spend, reward and power-bound rules of an alpha-investing layer.
///
/// Rules may depend on time and on the layer's state before the step.
pub trait SpendingPolicy: fmt::Debug + Send + Sync {
    fn evaluate(&self, t: u64, alpha: f64, layer: &LayerSnapshot) -> PolicyValues;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LevelRule {
    /// α_t = α.
    Alpha,
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpendRule {
    /// φ_t = α / (1 − α).
    Simple,
    Constant(f64),
    /// φ_t = fraction · W(t − 1).
    WealthFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewardRule {
    /// ψ_t = φ_t + α.
    Simple,
    Constant(f64),
    /// ψ_t = min(φ/ρ + α, φ/α_t + α + 1), the largest admissible reward.
    Max,
}

/// Spending policy assembled from simple rules. The default is classic
/// alpha-investing: α_t = α, φ = α/(1−α), ψ = φ + α, ρ = 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RulePolicy {
    pub level: LevelRule,
    pub spend: SpendRule,
    pub reward: RewardRule,
    /// Added to the reward after the rule is applied.
    pub reward_offset: f64,
    pub power_bound: f64,
}

impl Default for RulePolicy {
    fn default() -> Self {
        Self {
            level: LevelRule::Alpha,
            spend: SpendRule::Simple,
            reward: RewardRule::Simple,
            reward_offset: 0.0,
            power_bound: 1.0,
        }
    }
}

impl SpendingPolicy for RulePolicy {
    fn evaluate(&self, _t: u64, alpha: f64, layer: &LayerSnapshot) -> PolicyValues {
        let level = match self.level {
            LevelRule::Alpha => alpha,
            LevelRule::Constant(v) => v,
        };
        let spend = match self.spend {
            SpendRule::Simple => alpha / (1.0 - alpha),
            SpendRule::Constant(v) => v,
            SpendRule::WealthFraction(f) => f * layer.wealth.max(0.0),
        };
        let mut values = PolicyValues {
            level,
            spend,
            reward: 0.0,
            power_bound: self.power_bound,
        };
        values.reward = match self.reward {
            RewardRule::Simple => spend + alpha,
            RewardRule::Constant(v) => v,
            RewardRule::Max => values.reward_limit(alpha),
        } + self.reward_offset;
        values
    }
}

/// First step at which a policy leaves the admissible reward range.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyViolation {
    pub t: u64,
    pub snapshot: LayerSnapshot,
    pub values: PolicyValues,
    /// φ/ρ + α
    pub power_limit: f64,
    /// φ/α_t + α + 1
    pub level_limit: f64,
}

impl fmt::Display for PolicyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t={}: reward {} outside [0, min({}, {})] (spend {}, level {}, power bound {}, wealth {})",
            self.t,
            self.values.reward,
            self.power_limit,
            self.level_limit,
            self.values.spend,
            self.values.level,
            self.values.power_bound,
            self.snapshot.wealth
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyReport {
    Admissible { horizon: u64 },
    Violation(PolicyViolation),
}

impl PolicyReport {
    pub fn is_admissible(&self) -> bool {
        matches!(self, PolicyReport::Admissible { .. })
    }
}

const PROBE_WEALTH: [f64; 4] = [1e-12, 0.1, 1.0, 1e3];
const BOUND_TOLERANCE: f64 = 1e-12;

/// Checks `0 <= ψ_t <= min(φ_t/ρ_t + α, φ_t/α_t + α + 1)` for `t = 1..=horizon`.
///
/// State-dependent rules are probed on a fixed set of snapshots per step:
/// wealth in {1e-12, 0.1, 1, 1000} crossed with `R = 0` and `R = t − 1`.
pub fn validate_policy(policy: &dyn SpendingPolicy, alpha: f64, horizon: u64) -> Result<PolicyReport> {
    if horizon == 0 {
        return Err(Error::Config("validation horizon must be >= 1".into()));
    }
    for t in 1..=horizon {
        for &wealth in &PROBE_WEALTH {
            for rejections in [0, t - 1] {
                let snapshot = LayerSnapshot {
                    wealth,
                    rejections,
                    tests_done: t - 1,
                };
                let values = policy.evaluate(t, alpha, &snapshot);
                if !(values.power_bound > 0.0 && values.power_bound <= 1.0) {
                    return Err(Error::InvalidPowerBound {
                        t,
                        value: values.power_bound,
                    });
                }
                if !(values.level > 0.0 && values.level <= 1.0) {
                    return Err(Error::InvalidLevel { t, value: values.level });
                }
                let power_limit = values.power_limit(alpha);
                let level_limit = values.level_limit(alpha);
                let limit = power_limit.min(level_limit);
                let slack = BOUND_TOLERANCE * limit.abs().max(1.0);
                if values.reward < 0.0 || values.reward > limit + slack || values.spend < 0.0 {
                    return Ok(PolicyReport::Violation(PolicyViolation {
                        t,
                        snapshot,
                        values,
                        power_limit,
                        level_limit,
                    }));
                }
            }
        }
    }
    Ok(PolicyReport::Admissible { horizon })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProcedureKind {
    AlphaInvesting,
    Lond,
    /// LOND with β indexed by the effective test count κ.
    LondModified,
    Lord,
}

/// What to report when every layer's group is already rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UntestedPolicy {
    /// Leave δ_i = 1: no layer objected.
    #[default]
    Literal,
    /// Report δ_i = 0.
    Accept,
}

impl FromStr for UntestedPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(UntestedPolicy::Literal),
            "accept" => Ok(UntestedPolicy::Accept),
            other => Err(Error::Config(format!(
                "untested policy must be `literal` or `accept`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerConfig {
    pub beta: BetaSequence,
    pub policy: Arc<dyn SpendingPolicy>,
}

impl LayerConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            beta: BetaSequence::inverse_square(alpha),
            policy: Arc::new(RulePolicy::default()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProcedureConfig {
    pub kind: ProcedureKind,
    pub alpha: f64,
    /// mFDR offset; alpha-investing wealth starts at α·η.
    pub eta: f64,
    pub layers: Vec<LayerConfig>,
    pub untested: UntestedPolicy,
}

impl ProcedureConfig {
    /// `layers` layers, each with the default β sequence and spending policy.
    pub fn new(kind: ProcedureKind, alpha: f64, layers: usize) -> Self {
        Self {
            kind,
            alpha,
            eta: 1.0,
            layers: vec![LayerConfig::new(alpha); layers],
            untested: UntestedPolicy::Literal,
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_untested(mut self, untested: UntestedPolicy) -> Self {
        self.untested = untested;
        self
    }
}

/// A configured multi-layer procedure driving one stream.
#[derive(Debug, Clone)]
pub struct Procedure {
    config: ProcedureConfig,
    layers: Vec<LayerState>,
    t: u64,
    halted: bool,
}

impl Procedure {
    pub fn new(config: ProcedureConfig) -> Result<Self> {
        if !(config.alpha > 0.0 && config.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", config.alpha)));
        }
        if !(config.eta > 0.0 && config.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", config.eta)));
        }
        if config.layers.is_empty() {
            return Err(Error::Config("at least one layer is required".into()));
        }
        let wealth = match config.kind {
            ProcedureKind::AlphaInvesting => config.alpha * config.eta,
            _ => 0.0,
        };
        let layers = vec![LayerState::new(wealth); config.layers.len()];
        Ok(Self {
            config,
            layers,
            t: 0,
            halted: false,
        })
    }

    pub fn config(&self) -> &ProcedureConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerState] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Number of events consumed so far.
    pub fn time(&self) -> u64 {
        self.t
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    /// Tests one hypothesis. Fails if alpha-investing wealth is already exhausted.
    pub fn step(&mut self, event: &HypothesisEvent) -> Result<DecisionRecord> {
        let t = self.t + 1;
        if self.halted {
            return Err(Error::WealthExhausted { t });
        }
        event.validate(self.layers.len())?;

        let pending: Vec<bool> = self
            .layers
            .iter()
            .zip(&event.groups)
            .map(|(layer, &g)| !layer.is_rejected(g))
            .collect();

        // Everything that can fail is computed before any state changes.
        let mut thresholds = vec![None; self.layers.len()];
        let mut charges = vec![None; self.layers.len()];
        for m in (0..self.layers.len()).filter(|&m| pending[m]) {
            let (threshold, charge) = self.threshold(m, t)?;
            thresholds[m] = Some(threshold);
            charges[m] = charge;
        }

        let delta = if pending.iter().any(|&p| p) {
            // Short-circuits at the first failing layer; charges below still
            // apply to every pending layer.
            (0..self.layers.len())
                .filter(|&m| pending[m])
                .all(|m| event.layer_statistic(m) < thresholds[m].unwrap_or(0.0))
        } else {
            self.config.untested == UntestedPolicy::Literal
        };

        for m in (0..self.layers.len()).filter(|&m| pending[m]) {
            self.apply(m, event.groups[m], delta, t, charges[m]);
        }
        self.t = t;
        if self.config.kind == ProcedureKind::AlphaInvesting {
            self.halted = self.layers.iter().any(|l| l.wealth <= 0.0);
        }

        Ok(self.record(t, delta, &event.groups, &pending, &thresholds))
    }

    /// Like [`Procedure::step`], but once halted the event is recorded as not
    /// tested (δ = 0) instead of failing.
    pub fn step_or_pass(&mut self, event: &HypothesisEvent) -> Result<DecisionRecord> {
        if !self.halted {
            return self.step(event);
        }
        event.validate(self.layers.len())?;
        self.t += 1;
        let none = vec![false; self.layers.len()];
        let thresholds = vec![None; self.layers.len()];
        Ok(self.record(self.t, false, &event.groups, &none, &thresholds))
    }

    fn threshold(&self, m: usize, t: u64) -> Result<(f64, Option<PolicyValues>)> {
        let layer = &self.layers[m];
        let cfg = &self.config.layers[m];
        match self.config.kind {
            ProcedureKind::AlphaInvesting => {
                let values = cfg.policy.evaluate(t, self.config.alpha, &layer.snapshot());
                if !(values.level > 0.0 && values.level <= 1.0) {
                    return Err(Error::InvalidLevel { t, value: values.level });
                }
                Ok((values.level, Some(values)))
            }
            ProcedureKind::Lond | ProcedureKind::LondModified => {
                let index = if self.config.kind == ProcedureKind::Lond {
                    t
                } else {
                    layer.kappa() + 1
                };
                let scaled = cfg.beta.term(index) * (layer.rejections() + 1) as f64;
                Ok((scaled.min(1.0), None))
            }
            ProcedureKind::Lord => Ok((cfg.beta.term(layer.zeta), None)),
        }
    }

    fn apply(&mut self, m: usize, group: GroupId, delta: bool, t: u64, charge: Option<PolicyValues>) {
        let kind = self.config.kind;
        let layer = &mut self.layers[m];
        layer.record_test(group, delta, t);
        match kind {
            ProcedureKind::AlphaInvesting => {
                let values = charge.expect("alpha-investing layers carry policy values");
                if delta {
                    layer.wealth += values.reward - values.spend;
                } else {
                    layer.wealth -= values.spend;
                }
            }
            ProcedureKind::Lord => {
                layer.zeta = if delta { 1 } else { layer.zeta + 1 };
            }
            ProcedureKind::Lond | ProcedureKind::LondModified => {}
        }
    }

    fn record(
        &self,
        t: u64,
        delta: bool,
        groups: &[GroupId],
        tested: &[bool],
        thresholds: &[Option<f64>],
    ) -> DecisionRecord {
        let is_ai = self.config.kind == ProcedureKind::AlphaInvesting;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(m, layer)| LayerOutcome {
                tested: tested[m],
                threshold: thresholds[m],
                newly_rejected: tested[m] && delta,
                wealth: is_ai.then_some(layer.wealth),
                rejections: layer.rejections(),
                kappa: layer.kappa(),
                zeta: layer.zeta,
            })
            .collect();
        DecisionRecord {
            t,
            delta,
            groups: groups.to_vec(),
            layers,
            halted: self.halted,
        }
    }
}

/// The seven methods compared by the simulation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Gai,
    Lord,
    Lond,
    MlGai,
    MlLord,
    MlLond,
    MlLondM,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Gai,
        Method::Lord,
        Method::Lond,
        Method::MlGai,
        Method::MlLord,
        Method::MlLond,
        Method::MlLondM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gai => "GAI",
            Method::Lord => "LORD",
            Method::Lond => "LOND",
            Method::MlGai => "ml-GAI",
            Method::MlLord => "ml-LORD",
            Method::MlLond => "ml-LOND",
            Method::MlLondM => "ml-LOND_m",
        }
    }

    pub fn is_multi_layer(self) -> bool {
        matches!(self, Method::MlGai | Method::MlLord | Method::MlLond | Method::MlLondM)
    }

    pub fn kind(self) -> ProcedureKind {
        match self {
            Method::Gai | Method::MlGai => ProcedureKind::AlphaInvesting,
            Method::Lond | Method::MlLond => ProcedureKind::Lond,
            Method::MlLondM => ProcedureKind::LondModified,
            Method::Lord | Method::MlLord => ProcedureKind::Lord,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// A classic single-layer procedure: one layer of singleton groups.
#[derive(Debug, Clone)]
pub struct SingleLayer {
    procedure: Procedure,
}

impl SingleLayer {
    pub fn procedure(&self) -> &Procedure {
        &self.procedure
    }

    /// Tests the next p-value in the stream.
    pub fn test(&mut self, p: f64) -> Result<DecisionRecord> {
        let t = self.procedure.time() + 1;
        self.procedure.step(&HypothesisEvent::new(t, p, vec![t]))
    }

    pub fn is_halted(&self) -> bool {
        self.procedure.is_halted()
    }
}

/// Builds GAI, LOND or LORD as a one-layer procedure over singleton groups.
pub fn make_single_layer(method: &str, alpha: f64, eta: f64) -> Result<SingleLayer> {
    let kind = match method {
        "GAI" => ProcedureKind::AlphaInvesting,
        "LOND" => ProcedureKind::Lond,
        "LORD" => ProcedureKind::Lord,
        other => return Err(Error::UnknownMethod(other.to_string())),
    };
    let procedure = Procedure::new(ProcedureConfig::new(kind, alpha, 1).with_eta(eta))?;
    Ok(SingleLayer { procedure })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    const ALPHA: f64 = 0.1;

    fn procedure(kind: ProcedureKind, layers: usize) -> Procedure {
        Procedure::new(ProcedureConfig::new(kind, ALPHA, layers)).unwrap()
    }

    fn ev(t: u64, p: f64, groups: &[GroupId]) -> HypothesisEvent {
        HypothesisEvent::new(t, p, groups.to_vec())
    }

    #[test]
    fn simple_choice_is_admissible_with_equality() {
        let policy = RulePolicy::default();
        let values = policy.evaluate(1, ALPHA, &LayerState::new(0.1).snapshot());
        assert_abs_diff_eq!(values.spend, 0.111111, epsilon = 1e-6);
        assert_abs_diff_eq!(values.reward, 0.211111, epsilon = 1e-6);
        assert_eq!(values.reward, values.power_limit(ALPHA));
        assert!(validate_policy(&policy, ALPHA, 100).unwrap().is_admissible());
    }

    #[test]
    fn reward_above_bound_violates_at_first_step() {
        let policy = RulePolicy {
            reward_offset: 0.01,
            ..RulePolicy::default()
        };
        match validate_policy(&policy, ALPHA, 10).unwrap() {
            PolicyReport::Violation(v) => {
                assert_eq!(v.t, 1);
                assert_abs_diff_eq!(v.power_limit, 0.211111, epsilon = 1e-6);
                assert_abs_diff_eq!(v.level_limit, 0.1 / 0.9 / 0.1 + 1.1, epsilon = 1e-12);
            }
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn zero_reward_is_admissible() {
        let policy = RulePolicy {
            reward: RewardRule::Constant(0.0),
            ..RulePolicy::default()
        };
        assert!(validate_policy(&policy, ALPHA, 50).unwrap().is_admissible());
    }

    #[test]
    fn invalid_power_bound_is_an_error() {
        for rho in [0.0, 1.5, -0.2] {
            let policy = RulePolicy {
                power_bound: rho,
                ..RulePolicy::default()
            };
            let err = validate_policy(&policy, ALPHA, 5).unwrap_err();
            assert!(err.to_string().contains("invalid power bound"), "{err}");
        }
    }

    #[test]
    fn wealth_fraction_spend_with_constant_reward_is_caught() {
        // With almost no wealth the spend vanishes and the reward must stay <= α.
        let policy = RulePolicy {
            spend: SpendRule::WealthFraction(0.5),
            reward: RewardRule::Constant(0.15),
            ..RulePolicy::default()
        };
        assert!(!validate_policy(&policy, ALPHA, 3).unwrap().is_admissible());
        let max = RulePolicy {
            spend: SpendRule::WealthFraction(0.5),
            reward: RewardRule::Max,
            ..RulePolicy::default()
        };
        assert!(validate_policy(&max, ALPHA, 3).unwrap().is_admissible());
    }

    #[test]
    fn beta_closed_form_values() {
        let beta = BetaSequence::inverse_square(ALPHA);
        assert_abs_diff_eq!(beta.eval(1).unwrap(), 0.6 / (PI * PI), epsilon = 1e-15);
        assert_abs_diff_eq!(beta.eval(1).unwrap(), 0.0607927, epsilon = 1e-7);
        assert_abs_diff_eq!(beta.eval(2).unwrap(), 0.0151982, epsilon = 1e-7);
        assert!(matches!(beta.eval(0), Err(Error::BetaIndex(0))));
    }

    #[test]
    fn geometric_family_sums_to_alpha() {
        let beta = BetaSequence::new(0.05, BetaFamily::Geometric { ratio: 0.5 }).unwrap();
        let sum: f64 = (1..=200).map(|j| beta.eval(j).unwrap()).sum();
        assert_abs_diff_eq!(sum, 0.05, epsilon = 1e-15);
        assert!(BetaSequence::new(0.05, BetaFamily::Geometric { ratio: 1.0 }).is_err());
    }

    #[test]
    fn gai_rejection_rewards_both_layers() {
        let mut proc = procedure(ProcedureKind::AlphaInvesting, 2);
        let rec = proc.step(&ev(1, 0.05, &[1, 1])).unwrap();
        assert!(rec.delta);
        for layer in proc.layers() {
            assert_abs_diff_eq!(layer.wealth(), 0.2, epsilon = 1e-12);
            assert_eq!(layer.rejections(), 1);
        }
        assert!(!rec.halted);

        // Layer 2's group 1 is rejected; only the singleton layer is tested.
        let rec = proc.step(&ev(2, 0.5, &[2, 1])).unwrap();
        assert!(!rec.delta);
        assert_eq!(rec.tested_layers(), vec![0]);
        assert_abs_diff_eq!(proc.layers()[0].wealth(), 0.088889, epsilon = 1e-6);
        assert_abs_diff_eq!(proc.layers()[1].wealth(), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn gai_wealth_can_cross_zero_on_terminal_step() {
        let mut proc = procedure(ProcedureKind::AlphaInvesting, 1);
        let rec = proc.step(&ev(1, 0.5, &[1])).unwrap();
        assert!(!rec.delta);
        assert_abs_diff_eq!(proc.layers()[0].wealth(), -0.011111, epsilon = 1e-6);
        assert!(rec.halted);
        let err = proc.step(&ev(2, 0.0, &[2])).unwrap_err();
        assert!(err.to_string().contains("wealth exhausted"));
        let passed = proc.step_or_pass(&ev(2, 0.0, &[2])).unwrap();
        assert!(!passed.delta && passed.tested_layers().is_empty() && passed.halted);
    }

    #[test]
    fn gai_charges_every_pending_layer_after_short_circuit() {
        let mut proc = procedure(ProcedureKind::AlphaInvesting, 2);
        proc.step(&ev(1, 0.01, &[1, 1])).unwrap();
        // Fails layer 0; layer 1 is still pending and still charged.
        let per_layer = ev(2, 0.5, &[2, 2]).with_layer_p(vec![0.5, 0.01]);
        let rec = proc.step(&per_layer).unwrap();
        assert!(!rec.delta);
        assert_eq!(rec.tested_layers(), vec![0, 1]);
        for layer in proc.layers() {
            assert_abs_diff_eq!(layer.wealth(), 0.2 - 0.1 / 0.9, epsilon = 1e-12);
        }
    }

    #[test]
    fn lond_thresholds_scale_with_discoveries() {
        let mut proc = procedure(ProcedureKind::Lond, 1);
        let rec = proc.step(&ev(1, 0.05, &[1])).unwrap();
        assert!(rec.delta);
        assert_abs_diff_eq!(rec.layers[0].threshold.unwrap(), 0.0607927, epsilon = 1e-7);
        let rec = proc.step(&ev(2, 0.05, &[2])).unwrap();
        assert!(!rec.delta);
        assert_abs_diff_eq!(rec.layers[0].threshold.unwrap(), 0.0303964, epsilon = 5e-7);
    }

    #[test]
    fn modified_lond_indexes_by_kappa() {
        let mut proc = procedure(ProcedureKind::LondModified, 1);
        let beta = BetaSequence::inverse_square(ALPHA);
        // Three hypotheses in one group, rejected on the third.
        for (t, p) in [(1, 0.9), (2, 0.9)] {
            assert!(!proc.step(&ev(t, p, &[7])).unwrap().delta);
        }
        let rec = proc.step(&ev(3, 0.0, &[7])).unwrap();
        assert!(rec.delta);
        assert_eq!(rec.layers[0].kappa, 1);
        let rec = proc.step(&ev(4, 0.9, &[8])).unwrap();
        let expected = beta.eval(2).unwrap() * 2.0;
        assert_abs_diff_eq!(rec.layers[0].threshold.unwrap(), expected, epsilon = 1e-15);
        assert_eq!(rec.layers[0].kappa, 2);
    }

    #[test]
    fn lond_threshold_never_exceeds_one() {
        let mut proc = Procedure::new(ProcedureConfig::new(ProcedureKind::LondModified, 0.9, 2)).unwrap();
        for t in 1..=40 {
            let rec = proc.step(&ev(t, 0.0, &[t, t / 4])).unwrap();
            let thr = rec.layers[0].threshold.unwrap();
            assert!(thr > 0.0 && thr <= 1.0);
        }
        let rec = proc.step(&ev(41, 1.0, &[41, 100])).unwrap();
        assert!(!rec.delta, "p = 1 never passes a threshold of at most 1");
    }

    #[test]
    fn lord_resets_on_discovery() {
        let mut proc = procedure(ProcedureKind::Lord, 1);
        let rec = proc.step(&ev(1, 0.2, &[1])).unwrap();
        assert!(!rec.delta);
        assert_eq!(proc.layers()[0].zeta(), 2);
        let rec = proc.step(&ev(2, 0.9, &[2])).unwrap();
        assert_abs_diff_eq!(rec.layers[0].threshold.unwrap(), 0.0151982, epsilon = 1e-7);
        for t in 3..=4 {
            proc.step(&ev(t, 0.9, &[t])).unwrap();
        }
        assert_eq!(proc.layers()[0].zeta(), 5);
        assert!(proc.step(&ev(5, 0.0, &[5])).unwrap().delta);
        assert_eq!(proc.layers()[0].zeta(), 1);
        let rec = proc.step(&ev(6, 0.9, &[6])).unwrap();
        assert_abs_diff_eq!(rec.layers[0].threshold.unwrap(), 0.0607927, epsilon = 1e-7);
    }

    #[test]
    fn lord_only_pending_layers_move() {
        let mut proc = procedure(ProcedureKind::Lord, 2);
        assert!(proc.step(&ev(1, 0.0, &[1, 1])).unwrap().delta);
        let frozen = proc.layers()[1].clone();
        proc.step(&ev(2, 0.9, &[2, 1])).unwrap();
        assert_eq!(proc.layers()[0].zeta(), 2);
        assert_eq!(proc.layers()[1], frozen);
    }

    #[test]
    fn untested_policy_controls_individual_decision() {
        for (policy, expected) in [(UntestedPolicy::Literal, true), (UntestedPolicy::Accept, false)] {
            let config = ProcedureConfig::new(ProcedureKind::Lord, ALPHA, 1).with_untested(policy);
            let mut proc = Procedure::new(config).unwrap();
            proc.step(&ev(1, 0.0, &[3])).unwrap();
            let before = proc.layers().to_vec();
            let rec = proc.step(&ev(2, 0.9, &[3])).unwrap();
            assert_eq!(rec.delta, expected);
            assert!(rec.tested_layers().is_empty());
            assert_eq!(proc.layers(), before.as_slice());
        }
    }

    #[test]
    fn single_layer_lond_stream() {
        let mut lond = make_single_layer("LOND", ALPHA, 1.0).unwrap();
        let recs: Vec<_> = [0.01, 0.9, 0.9].iter().map(|&p| lond.test(p).unwrap()).collect();
        assert_eq!(recs.iter().map(|r| r.delta).collect::<Vec<_>>(), vec![true, false, false]);
        let beta = BetaSequence::inverse_square(ALPHA);
        assert_abs_diff_eq!(recs[1].layers[0].threshold.unwrap(), beta.eval(2).unwrap() * 2.0);
        assert_abs_diff_eq!(recs[2].layers[0].threshold.unwrap(), beta.eval(3).unwrap() * 2.0);
        assert_abs_diff_eq!(recs[2].layers[0].threshold.unwrap(), 0.0135095, epsilon = 1e-7);
    }

    #[test]
    fn single_layer_gai_halts_on_null_stream() {
        for eta in [1.0, 5.0, 10.0] {
            let mut gai = make_single_layer("GAI", ALPHA, eta).unwrap();
            let phi = ALPHA / (1.0 - ALPHA);
            let expected_steps = (ALPHA * eta / phi).ceil() as u64;
            let mut steps = 0;
            while !gai.is_halted() {
                assert!(!gai.test(1.0).unwrap().delta);
                steps += 1;
            }
            assert_eq!(steps, expected_steps, "eta={eta}");
        }
    }

    #[test]
    fn single_layer_lord_rejects_zero_p_values() {
        let mut lord = make_single_layer("LORD", ALPHA, 1.0).unwrap();
        assert!((0..50).all(|_| lord.test(0.0).unwrap().delta));
        assert!(matches!(
            make_single_layer("BH", ALPHA, 1.0),
            Err(Error::UnknownMethod(_))
        ));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("ml-FOO".parse::<Method>().is_err());
    }

    fn arb_stream(layers: usize) -> impl Strategy<Value = Vec<(f64, Vec<GroupId>)>> {
        prop::collection::vec(
            (
                prop_oneof![0.0..0.02f64, 0.0..1.0f64],
                prop::collection::vec(0..6u64, layers),
            ),
            1..120,
        )
    }

    fn kinds() -> impl Strategy<Value = ProcedureKind> {
        prop_oneof![
            Just(ProcedureKind::AlphaInvesting),
            Just(ProcedureKind::Lond),
            Just(ProcedureKind::LondModified),
            Just(ProcedureKind::Lord),
        ]
    }

    proptest! {
        #[test]
        fn thresholds_in_unit_interval_and_pending_only(kind in kinds(), stream in arb_stream(3)) {
            let mut proc = Procedure::new(ProcedureConfig::new(kind, ALPHA, 3).with_eta(20.0)).unwrap();
            for (i, (p, groups)) in stream.iter().enumerate() {
                if proc.is_halted() { break; }
                let before = proc.layers().to_vec();
                let rec = proc.step(&ev(i as u64 + 1, *p, groups)).unwrap();
                for (m, out) in rec.layers.iter().enumerate() {
                    if out.tested {
                        let thr = out.threshold.unwrap();
                        prop_assert!(thr > 0.0 && thr <= 1.0);
                    } else {
                        prop_assert_eq!(&proc.layers()[m], &before[m]);
                        prop_assert!(!out.newly_rejected);
                    }
                    prop_assert!(proc.layers()[m].zeta() >= 1);
                    prop_assert_eq!(
                        proc.layers()[m].rejections() as usize,
                        proc.layers()[m].rejected_groups().count()
                    );
                }
                if rec.delta {
                    prop_assert!(rec.layers.iter().all(|l| !l.tested || l.newly_rejected));
                }
            }
        }

        #[test]
        fn group_decisions_are_monotone(kind in kinds(), stream in arb_stream(2)) {
            let mut proc = Procedure::new(ProcedureConfig::new(kind, ALPHA, 2).with_eta(20.0)).unwrap();
            let mut seen: Vec<std::collections::BTreeSet<GroupId>> = vec![Default::default(); 2];
            for (i, (p, groups)) in stream.iter().enumerate() {
                proc.step_or_pass(&ev(i as u64 + 1, *p, groups)).unwrap();
                for (m, layer) in proc.layers().iter().enumerate() {
                    let now: std::collections::BTreeSet<_> = layer.rejected_groups().collect();
                    prop_assert!(seen[m].is_subset(&now));
                    seen[m] = now;
                }
            }
        }

        #[test]
        fn simple_choice_wealth_identity(stream in arb_stream(2)) {
            let eta = 30.0;
            let mut proc = Procedure::new(
                ProcedureConfig::new(ProcedureKind::AlphaInvesting, ALPHA, 2).with_eta(eta)
            ).unwrap();
            let phi = ALPHA / (1.0 - ALPHA);
            for (i, (p, groups)) in stream.iter().enumerate() {
                if proc.is_halted() { break; }
                proc.step(&ev(i as u64 + 1, *p, groups)).unwrap();
                for layer in proc.layers() {
                    let expected = ALPHA * eta - phi * layer.tests_done() as f64
                        + (phi + ALPHA) * layer.rejections() as f64;
                    prop_assert!((layer.wealth() - expected).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn lond_threshold_nondecreasing_in_discoveries(j in 1u64..10_000, r in 0u64..500) {
            let beta = BetaSequence::inverse_square(ALPHA);
            let at = |r: u64| (beta.eval(j).unwrap() * (r + 1) as f64).min(1.0);
            prop_assert!(at(r) <= at(r + 1));
        }

        #[test]
        fn replay_is_deterministic(kind in kinds(), stream in arb_stream(2)) {
            let run = || {
                let mut proc = Procedure::new(ProcedureConfig::new(kind, ALPHA, 2)).unwrap();
                stream
                    .iter()
                    .enumerate()
                    .map(|(i, (p, g))| proc.step_or_pass(&ev(i as u64 + 1, *p, g)).unwrap())
                    .collect::<Vec<_>>()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
