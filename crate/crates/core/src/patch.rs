//! Per-track 28×28 intensity patch with exponential decay.
//!
//! Cells hold signed, decayed polarity sums of the events associated to a
//! track, positioned relative to the track's current position estimate.
//! Decay is applied lazily: the stored cells are scaled by a common factor
//! that is folded back in only when it gets small.

use std::io::Write;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::Event;
use crate::scalar::{us_to_s, Real};

pub const PATCH_SIZE: usize = 28;
pub const PATCH_LEN: usize = PATCH_SIZE * PATCH_SIZE;
/// Offset added to `ξ − p` before rounding to a cell index.
pub const PATCH_CENTER: f64 = 13.5;

/// Below this the lazy scale factor is folded into the cells.
const RENORMALIZE_BELOW: f64 = 1e-30;
const NORMALIZATION_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PatchError {
    #[error("event at {event} us precedes the last patch update at {last} us")]
    TimeRegression { last: u64, event: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchParams {
    /// Decay rate ρ, 1/s.
    pub decay_rate: f64,
}

impl Default for PatchParams {
    fn default() -> Self {
        Self { decay_rate: 100.0 }
    }
}

impl PatchParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.decay_rate >= 0.0 && self.decay_rate.is_finite()) {
            return Err("patch.decay_rate must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntensityPatch<T: Real> {
    cells: Vec<T>,
    scale: T,
    last_t: Option<u64>,
    decay_rate: T,
    event_count: u64,
}

/// Cell for an offset `ξ − p`, or `None` when it falls off the patch.
#[inline]
pub fn cell_index<T: Real>(offset: Vector2<T>) -> Option<(usize, usize)> {
    let c = T::lit(PATCH_CENTER + 0.5);
    let col = (offset.x + c).floor();
    let row = (offset.y + c).floor();
    let n = T::lit(PATCH_SIZE as f64);
    if col >= T::zero() && col < n && row >= T::zero() && row < n {
        Some((row.as_f64() as usize, col.as_f64() as usize))
    } else {
        None
    }
}

impl<T: Real> IntensityPatch<T> {
    pub fn new(params: &PatchParams) -> Self {
        Self {
            cells: vec![T::zero(); PATCH_LEN],
            scale: T::one(),
            last_t: None,
            decay_rate: T::lit(params.decay_rate),
            event_count: 0,
        }
    }

    pub fn event_count(&self) -> u64 {
        self.event_count
    }

    pub fn last_update(&self) -> Option<u64> {
        self.last_t
    }

    /// Decays to `event.t` and adds the event's polarity at its offset from
    /// `blob_position`. Returns whether the event landed on the patch.
    pub fn add_event(&mut self, event: &Event, blob_position: Vector2<T>) -> Result<bool, PatchError> {
        if let Some(last) = self.last_t {
            if event.t < last {
                return Err(PatchError::TimeRegression { last, event: event.t });
            }
            let dt = us_to_s::<T>((event.t - last) as i64);
            self.scale *= (-self.decay_rate * dt).exp();
            if self.scale < T::lit(RENORMALIZE_BELOW) {
                self.renormalize();
            }
        }
        self.last_t = Some(event.t);
        self.event_count += 1;
        match cell_index(event.position::<T>() - blob_position) {
            Some((row, col)) => {
                self.cells[row * PATCH_SIZE + col] += event.polarity.value::<T>() / self.scale;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    fn renormalize(&mut self) {
        let s = self.scale;
        for c in &mut self.cells {
            *c *= s;
        }
        self.scale = T::one();
    }

    /// Cell value at the last update time.
    pub fn cell(&self, row: usize, col: usize) -> T {
        self.cells[row * PATCH_SIZE + col] * self.scale
    }

    /// All cells at the last update time, row-major.
    pub fn values(&self) -> Vec<T> {
        self.cells.iter().map(|&c| c * self.scale).collect()
    }

    /// `0.5 + 0.5·clamp(c / max|c|)`, row-major.
    pub fn to_classifier_input(&self) -> Vec<T> {
        normalize_cells(&self.values())
    }

    pub fn write_pgm<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_pgm(&self.to_classifier_input(), out)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_grid_csv(&self.values(), out)
    }
}

/// Max-abs normalization of raw cells into `[0, 1]`.
pub fn normalize_cells<T: Real>(cells: &[T]) -> Vec<T> {
    let m = cells
        .iter()
        .fold(T::lit(NORMALIZATION_FLOOR), |m, c| m.max(c.abs()));
    let half = T::lit(0.5);
    cells
        .iter()
        .map(|&c| half + half * (c / m).clamp(-T::one(), T::one()))
        .collect()
}

/// 8-bit binary PGM of values in `[0, 1]`.
pub fn write_pgm<T: Real, W: Write>(values: &[T], mut out: W) -> std::io::Result<()> {
    write!(out, "P5\n{PATCH_SIZE} {PATCH_SIZE}\n255\n")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)
}

/// A 28×28 grid as 28 comma-separated rows.
pub fn write_grid_csv<T: Real, W: Write>(values: &[T], mut out: W) -> std::io::Result<()> {
    for row in values.chunks(PATCH_SIZE) {
        let line: Vec<String> = row.iter().map(|v| format!("{}", v.as_f64())).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Parses a grid written by [`write_grid_csv`].
pub fn read_grid_csv(text: &str) -> Result<Vec<f64>, String> {
    let mut values = Vec::with_capacity(PATCH_LEN);
    for (n, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let row: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| format!("row {}: {e}", n + 1))?;
        if row.len() != PATCH_SIZE {
            return Err(format!("row {} has {} values, expected {PATCH_SIZE}", n + 1, row.len()));
        }
        values.extend(row);
    }
    if values.len() != PATCH_LEN {
        return Err(format!("expected {PATCH_SIZE} rows, got {}", values.len() / PATCH_SIZE));
    }
    Ok(values)
}
