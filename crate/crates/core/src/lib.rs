//! Core of the next-batch evaluation harness.
//!
//! Interaction logs are partitioned along a single global timeline into a
//! background segment and a sequence of evaluation windows. A [`protocol::Run`]
//! releases that data to a model in phases (training data, masked prediction
//! requests, then ground truth plus remaining interactions) and scores the
//! submitted rankings with the [`metrics`] module.

pub mod algorithms;
pub mod driver;
pub mod interactions;
pub mod metrics;
pub mod protocol;
pub mod split;

pub use interactions::{DatasetDescriptor, Interaction, InteractionLog, Timestamp};
pub use metrics::{Metric, MetricKey, MetricReport};
pub use protocol::{EvaluationContext, ProtocolError, Run, RunEvent, RunPhase, RunRegistry};
pub use split::{EvaluationWindow, PredictionRequest, SplitConfig, WindowMaterialization};
