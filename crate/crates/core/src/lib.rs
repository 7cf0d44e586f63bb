//! Cooperative bistatic sensing with reused OFDM downlink symbols.
//!
//! The crate covers the whole chain: 5G NR numerology, scene geometry and
//! link budget, frequency-domain channel simulation, delay-Doppler path
//! extraction, multi-target association and localization, brute-force
//! reference solvers, and a Monte Carlo harness.

pub mod airsim;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod harness;
pub mod locator;
pub mod numerology;
pub mod oracle;
pub mod pipeline;
pub mod scenario;
pub mod scene;

pub use airsim::{GridKind, SymbolGrid};
pub use error::{Error, Result};
pub use estimator::{DelayDopplerSpectrum, ExtractionConfig, PathEstimate, RangeSet};
pub use geometry::{Vec2, SPEED_OF_LIGHT};
pub use numerology::{BandwidthConfig, CpMode, FrequencyRange, Numerology, SensingTiming};
pub use scene::{AccessPoint, ApRole, PathTruth, Scene, SyncError, SyncModel, Target};
pub use locator::{LocalizationReport, LocationEstimate, SolverConfig, TapMeasurements};
