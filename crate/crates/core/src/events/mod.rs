//! Event data model, stream I/O and the synthetic labelled-scene generator.

mod generator;
mod io;
pub mod scenes;

pub use generator::{
    generate_blob_events, generate_scene, FlickerRegion, NoiseConfig, ObjectSpec, Scene,
    SceneConfig, Trajectory, TruthSample, Waypoint,
};
pub use io::{
    open_events, read_events, read_truth_csv, write_events, write_events_binary, write_events_csv,
    write_truth_csv, EventFormat, EventReader, EventStream, ReadOptions, BINARY_MAGIC,
    BINARY_VERSION,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Sign of the brightness change that triggered an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Off,
    On,
}

impl Polarity {
    pub fn from_sign(sign: i64) -> Option<Self> {
        match sign {
            1 => Some(Polarity::On),
            -1 => Some(Polarity::Off),
            _ => None,
        }
    }

    #[inline]
    pub fn sign(self) -> i8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
        }
    }

    #[inline]
    pub fn value<T: Real>(self) -> T {
        match self {
            Polarity::On => T::one(),
            Polarity::Off => -T::one(),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::On => Polarity::Off,
            Polarity::Off => Polarity::On,
        }
    }
}

/// A single camera event. `t` is in microseconds since stream start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, polarity: Polarity) -> Self {
        Self { t, x, y, polarity }
    }

    /// Pixel position as a real-valued point.
    #[inline]
    pub fn position<T: Real>(&self) -> nalgebra::Vector2<T> {
        nalgebra::Vector2::new(T::lit(self.x as f64), T::lit(self.y as f64))
    }
}

/// Label `0` is background; objects are numbered from `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabeledEvent {
    pub event: Event,
    pub label: u32,
}

impl LabeledEvent {
    pub const BACKGROUND: u32 = 0;

    pub fn new(event: Event, label: u32) -> Self {
        Self { event, label }
    }
}

impl From<Event> for LabeledEvent {
    fn from(event: Event) -> Self {
        Self {
            event,
            label: Self::BACKGROUND,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorGeometry {
    pub width: u16,
    pub height: u16,
}

impl SensorGeometry {
    pub fn new(width: u16, height: u16) -> Self {
        Self { width, height }
    }

    #[inline]
    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[derive(Debug, Error)]
pub enum EventError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: invalid polarity {value} (expected 1 or -1)")]
    InvalidPolarity { line: usize, value: String },
    #[error("record {position}: timestamp {current} precedes {previous} by more than the tolerance")]
    NonMonotonic {
        position: usize,
        previous: u64,
        current: u64,
    },
    #[error("record {position}: pixel ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds {
        position: usize,
        x: i64,
        y: i64,
        width: u16,
        height: u16,
    },
    #[error("missing or malformed geometry header")]
    MissingHeader,
    #[error("not a binary event file (bad magic)")]
    BadMagic,
    #[error("unsupported binary event format version {0}")]
    UnsupportedVersion(u16),
    #[error("binary record {index} truncated at byte offset {offset}")]
    Truncated { index: usize, offset: u64 },
    #[error("invalid scene configuration: {0}")]
    InvalidScene(String),
}
