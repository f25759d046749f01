//! Online multi-layer false discovery rate control.
//!
//! Hypotheses arrive one at a time and belong to a group in each of several
//! layers (partitions of the stream). A hypothesis is rejected only when it
//! clears the current threshold in every layer whose group is still pending,
//! which keeps FDR and mFDR under control in all layers at once.
//!
//! ```
//! use mlfdr::{HypothesisEvent, Procedure, ProcedureConfig, ProcedureKind};
//!
//! let mut lord = Procedure::new(ProcedureConfig::new(ProcedureKind::Lord, 0.1, 2)).unwrap();
//! let record = lord.step(&HypothesisEvent::new(1, 0.001, vec![1, 7])).unwrap();
//! assert!(record.delta);
//! ```

pub mod cli;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod procedures;
pub mod simgen;

pub use error::{Error, Result};
pub use harness::{run_replicate, run_sweep, LayerKind, SweepSpec, SweepTable};
pub use metrics::{aggregate, AggregateResult, LayerTally};
pub use model::{DecisionRecord, GroupId, HypothesisEvent, LayerState, TruthState};
pub use procedures::{
    make_single_layer, validate_policy, BetaSequence, Method, Procedure, ProcedureConfig, ProcedureKind, RulePolicy,
    UntestedPolicy,
};
pub use simgen::{generate, ScenarioSpec};
