//! Configuration, checkpoints, the multi-seed protocol and its reports.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod plot;
pub mod protocol;
pub mod report;

pub use checkpoint::{Binding, Checkpoint, Provenance, CHECKPOINT_VERSION};
pub use config::{EvaluationSpec, ExperimentConfig, Metric};
pub use protocol::{run_protocol, ErasureRun, ProtocolOutcome};
pub use report::{EvaluationReport, Stat, SweepRow, SweepTable};
