//! Candidate detection from flow consistency.
//!
//! An unassociated event is a detection when its own flow direction is
//! nearly parallel to the dominant flow of its neighbourhood, i.e. when
//! `C = |⟨V(ξₖ), V̄⊥⟩| < γ`.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::events::Event;
use crate::flowfield::{
    estimate_dominant_direction, estimate_flow_direction, estimate_initial_speed,
    FlowDirectionField, FlowParams, SurfaceOfActiveEvents,
};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorParams {
    /// Correlation threshold γ.
    pub gamma: f64,
    /// Speed used when the time gradient is flat, px/s.
    pub s_default: f64,
    pub s_min: f64,
    pub s_max: f64,
    /// Detections closer than this to a live track are dropped, px.
    pub suppression_radius: f64,
    /// The radius also grows to this many major-axis lengths plus the
    /// polarity offset of each track, so large blobs suppress their own
    /// trailing edges.
    pub suppression_sigmas: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            s_default: 500.0,
            s_min: 50.0,
            s_max: 5000.0,
            suppression_radius: 10.0,
            suppression_sigmas: 4.0,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(format!("detector.gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.s_min > 0.0 && self.s_min <= self.s_max) {
            return Err("detector.s_min must be > 0 and <= detector.s_max".into());
        }
        if !(self.s_default > 0.0) {
            return Err("detector.s_default must be > 0".into());
        }
        if !(self.suppression_radius >= 0.0) {
            return Err("detector.suppression_radius must be >= 0".into());
        }
        if !(self.suppression_sigmas >= 0.0) {
            return Err("detector.suppression_sigmas must be >= 0".into());
        }
        Ok(())
    }
}

/// A new candidate: position, unit direction of motion and speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection<T: Real> {
    pub position: Vector2<T>,
    pub direction: Vector2<T>,
    pub speed: T,
    pub t: u64,
}

/// Flow direction at the event and the correlation `C`. Stores the
/// direction in the field as a side effect once it exists.
pub fn flow_correlation<T: Real>(
    event: &Event,
    surface: &SurfaceOfActiveEvents,
    field: &mut FlowDirectionField<T>,
    flow: &FlowParams,
) -> Option<(Vector2<T>, T)> {
    let direction = estimate_flow_direction::<T>(surface, event, flow)?;
    field
        .update(event.x, event.y, direction, event.t)
        .expect("event already validated against the sensor");
    let perp = estimate_dominant_direction(field, event, flow)?;
    Some((direction, direction.dot(&perp).abs()))
}

/// Runs the detection criterion on an event that no track claimed. The
/// event must already be on the surface.
pub fn process_unassociated_event<T: Real>(
    event: &Event,
    surface: &SurfaceOfActiveEvents,
    field: &mut FlowDirectionField<T>,
    flow: &FlowParams,
    params: &DetectorParams,
) -> Option<Detection<T>> {
    let (direction, c) = flow_correlation(event, surface, field, flow)?;
    if c >= T::lit(params.gamma) {
        return None;
    }
    let (direction, speed) = estimate_initial_speed(
        surface,
        event,
        direction,
        flow,
        params.s_default,
        params.s_min,
        params.s_max,
    );
    Some(Detection {
        position: event.position(),
        direction,
        speed,
        t: event.t,
    })
}
