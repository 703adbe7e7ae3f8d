//! Secure lateral control for connected vehicles: data-driven identification, event-triggered
//! transmission under delay, attack estimation and fractional sliding-mode control.

pub mod control;
pub mod error;
pub mod observer;
pub mod plant;
pub mod sim;
pub mod synthesis;
pub mod sysid;
pub mod trigger;

pub use control::{SlidingConfig, SlidingParams, SlidingState, SurfaceInit};
pub use error::{Error, Result};
pub use observer::{AttackKind, AttackModel, EsoState};
pub use plant::{ContinuousModel, StateVector, VehicleParams};
pub use sim::{CaseId, DelayMode, MetricsReport, PlantKind, RunTrace, ScenarioConfig, StepRecord};
pub use synthesis::{Certificate, LmiBlocks, SynthesisOutcome};
pub use sysid::{DatasetMatrices, IdentifiedModel, Truncation};
pub use trigger::{DelayModel, TriggerConfig, TriggerState};
