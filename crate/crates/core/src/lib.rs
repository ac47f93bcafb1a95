//! Map-aware sensing fusion for ISAC networks.
//!
//! This crate holds the allocation-only core of the simulator:
//!
//! - [`geometry`]: axis-aligned static maps and dilated-map membership.
//! - [`measurement`]: the range/bearing model, polar to world projection and
//!   first-order covariance propagation.
//! - [`scenario`]: ground truth (targets, sensing entities, clutter) and
//!   per-step frame synthesis.
//! - [`fusion`]: the hard map mask followed by Euclidean validation gating.
//! - [`metrics`]: detection probability and false-alarm accumulation.
//! - [`sdsf`]: the sensing data storage function (STID/context indexed).
//! - [`callflow`]: SSC, SF, PCF, SDSF and SE state machines on a deterministic
//!   in-process bus.
//!
//! The crate is `no_std` when the default `std` feature is disabled. File
//! formats, configuration and the CLI live in the `isac-sim` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod callflow;
pub mod fusion;
pub mod geometry;
pub mod measurement;
pub mod metrics;
pub mod rng;
pub mod scenario;
pub mod sdsf;

/// One violated constraint, named by its configuration or record field.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FieldError {
    pub field: alloc::string::String,
    pub reason: alloc::string::String,
}

impl FieldError {
    pub fn new(field: impl Into<alloc::string::String>, reason: impl Into<alloc::string::String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl core::fmt::Display for FieldError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

pub use fusion::{FilterConfig, GateOutcome};
pub use geometry::{Point, Rect, StaticMap};
pub use measurement::{Cov2, NoiseModel, PolarMeasurement, Pose, SeId, WorldDetection};
pub use metrics::{MetricAccumulator, MetricResult};
pub use scenario::{Frame, Scenario, ScenarioConfig, TargetId};
