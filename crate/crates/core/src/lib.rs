//! Asynchronous, event-by-event detection, validation and tracking of
//! multiple blob-like objects in event-camera streams.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`.

// Parameter checks are written `!(x > 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aeb_filter;
pub mod blob_model;
pub mod classifier;
pub mod config;
pub mod detector;
pub mod evaluation;
pub mod events;
pub mod flowfield;
pub mod manager;
pub mod patch;
pub mod scalar;

pub use scalar::Real;

pub type BlobState = blob_model::BlobState<f64>;
pub type FlowDirectionField = flowfield::FlowDirectionField<f64>;
pub type AebFilter = aeb_filter::AebFilter<f64>;
pub type Detection = detector::Detection<f64>;
pub type IntensityPatch = patch::IntensityPatch<f64>;
pub type Mlp = classifier::Mlp<f64>;
pub type TrackerPool = manager::TrackerPool<f64>;
pub type MetricsReport = evaluation::MetricsReport;
pub use config::RunConfig;
