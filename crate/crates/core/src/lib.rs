//! Trace-driven simulation and optimization of early-exit inference with per-layer
//! CPU/GPU frequency scaling on edge devices.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix it
//! to `f64`, which is what the CLI and the reports use.

pub mod devmodel;
pub mod error;
pub mod exitnet;
pub mod profiler;
pub mod scalar;
pub mod simengine;
pub mod tracegen;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type FrequencyPair = devmodel::FrequencyPair<f64>;
pub type DeviceProfile = devmodel::DeviceProfile<f64>;
pub type LayerCost = devmodel::LayerCost<f64>;
pub type CostTable = devmodel::CostTable<f64>;
pub type CalibrationAnchor = devmodel::CalibrationAnchor<f64>;
pub type Calibration = devmodel::Calibration<f64>;
pub type ExitNetModel = exitnet::ExitNetModel<f64>;
pub type Schedule = profiler::Schedule<f64>;
pub type ScheduleEval = profiler::ScheduleEval<f64>;
pub type ProfileCache = profiler::ProfileCache<f64>;
pub type SearchOutcome = profiler::SearchOutcome<f64>;

/// Single-precision variants.
pub mod f32 {
    pub type FrequencyPair = crate::devmodel::FrequencyPair<f32>;
    pub type DeviceProfile = crate::devmodel::DeviceProfile<f32>;
    pub type CostTable = crate::devmodel::CostTable<f32>;
    pub type ExitNetModel = crate::exitnet::ExitNetModel<f32>;
    pub type Schedule = crate::profiler::Schedule<f32>;
}
