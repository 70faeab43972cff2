//! Decentralized, peer-to-peer steering of active measurement sessions for
//! SLA violation detection, with a deterministic network simulator to
//! evaluate the activation strategies against ground truth.

pub mod coordination;
pub mod correlation;
pub mod harness;
pub mod model;
pub mod presets;
pub mod rank;
pub mod simnet;
pub mod strategies;

pub use coordination::{Message, MessageBody, VirtualSession};
pub use correlation::{CorrelationMethod, OverlayParams, PeerLink};
pub use harness::{load_scenario, run_matrix, ConfigError, MatrixResult, ScenarioConfig};
pub use model::{
    DestinationId, DeviceId, Direction, MeasurementHistory, MeasurementSample, Origin, SessionBudget, Slo,
};
pub use rank::{ActivationSet, RankParams};
pub use simnet::{run, MetricsReport, RunOutput, Scenario, Simulation};
pub use strategies::StrategyKind;
