//! Surface of Active Events and the Field of Active Flow Directions.
//!
//! Each event's local motion line is found by weighted total least squares
//! over the recently-fired pixels in a square patch: the line normal is the
//! eigenvector of `M = Σ wᵢ aᵢaᵢᵀ` with the smallest eigenvalue, where
//! `aᵢ = ξᵢ − ξₖ` and `wᵢ = exp(−2αδᵢ)`.

use std::io::Write;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{Event, Polarity, SensorGeometry};
use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("pixel ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds {
        x: i64,
        y: i64,
        width: u16,
        height: u16,
    },
    #[error("direction must be unit-norm and sign-normalized")]
    NotNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowParams {
    /// Half-width of the square neighbourhood (3 gives 7×7).
    pub patch_radius: u16,
    /// Recency rate α, in 1/s.
    pub alpha: f64,
    /// Pixels older than this (seconds) are ignored.
    pub delta_max: f64,
    pub min_neighbors: usize,
    /// Keep a separate surface per polarity.
    pub per_polarity: bool,
    /// A pixel silent for longer than this (seconds) starts a new onset.
    pub onset_gap: f64,
    /// Half-width of the neighbourhood used for the initial speed fit.
    pub speed_radius: u16,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            patch_radius: 3,
            alpha: 70.0,
            delta_max: 0.05,
            min_neighbors: 4,
            per_polarity: false,
            onset_gap: 0.03,
            speed_radius: 4,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0) {
            return Err(format!("flow.alpha must be > 0, got {}", self.alpha));
        }
        if self.patch_radius < 1 {
            return Err("flow.patch_radius must be >= 1".into());
        }
        if !(self.delta_max >= 0.0) {
            return Err("flow.delta_max must be >= 0".into());
        }
        if !(self.onset_gap > 0.0) {
            return Err("flow.onset_gap must be > 0".into());
        }
        if self.speed_radius < 1 {
            return Err("flow.speed_radius must be >= 1".into());
        }
        Ok(())
    }

    fn delta_max_us(&self) -> u64 {
        (self.delta_max * 1e6).round() as u64
    }
}

const NEVER: u64 = u64::MAX;

fn latest(a: u64, b: u64) -> u64 {
    match (a, b) {
        (NEVER, x) | (x, NEVER) => x,
        (a, b) => a.max(b),
    }
}

fn check_bounds(geometry: SensorGeometry, x: i64, y: i64) -> Result<usize, FlowError> {
    if geometry.contains(x, y) {
        Ok(y as usize * geometry.width as usize + x as usize)
    } else {
        Err(FlowError::OutOfBounds {
            x,
            y,
            width: geometry.width,
            height: geometry.height,
        })
    }
}

/// Per-pixel timestamp of the most recent event.
///
/// Alongside it each pixel keeps an onset time: the first event after the
/// pixel had been silent for longer than the onset gap. Onsets trace the
/// leading edge of a passing blob, which the most recent stamps do not.
#[derive(Debug, Clone)]
pub struct SurfaceOfActiveEvents {
    geometry: SensorGeometry,
    per_polarity: bool,
    onset_gap_us: u64,
    // One plane, or [On, Off] planes back to back.
    stamps: Vec<u64>,
    // Always a single plane.
    onsets: Vec<u64>,
}

impl SurfaceOfActiveEvents {
    pub fn new(geometry: SensorGeometry, per_polarity: bool) -> Self {
        let planes = if per_polarity { 2 } else { 1 };
        Self {
            geometry,
            per_polarity,
            onset_gap_us: 30_000,
            stamps: vec![NEVER; geometry.pixel_count() * planes],
            onsets: vec![NEVER; geometry.pixel_count()],
        }
    }

    pub fn from_params(geometry: SensorGeometry, params: &FlowParams) -> Self {
        let mut s = Self::new(geometry, params.per_polarity);
        s.onset_gap_us = (params.onset_gap * 1e6).round() as u64;
        s
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    #[inline]
    fn plane_offset(&self, polarity: Polarity) -> usize {
        if self.per_polarity && polarity == Polarity::Off {
            self.geometry.pixel_count()
        } else {
            0
        }
    }

    pub fn update(&mut self, event: &Event) -> Result<(), FlowError> {
        let i = check_bounds(self.geometry, event.x as i64, event.y as i64)?;
        let off = self.plane_offset(event.polarity);
        let last = if self.per_polarity {
            latest(self.stamps[i], self.stamps[self.geometry.pixel_count() + i])
        } else {
            self.stamps[i]
        };
        if last == NEVER || event.t.saturating_sub(last) > self.onset_gap_us {
            self.onsets[i] = event.t;
        }
        self.stamps[off + i] = event.t;
        Ok(())
    }

    /// Onset time at a pixel.
    pub fn onset(&self, x: u16, y: u16) -> Option<u64> {
        let i = check_bounds(self.geometry, x as i64, y as i64).ok()?;
        let t = self.onsets[i];
        (t != NEVER).then_some(t)
    }

    /// Timestamp at a pixel in the plane used for `polarity`.
    pub fn get(&self, x: u16, y: u16, polarity: Polarity) -> Option<u64> {
        let i = check_bounds(self.geometry, x as i64, y as i64).ok()?;
        let t = self.stamps[self.plane_offset(polarity) + i];
        (t != NEVER).then_some(t)
    }

    /// Visits every fired, non-stale pixel in the patch around `event`,
    /// excluding the event's own pixel, as `(offset, δ seconds)`.
    #[inline]
    fn for_each_neighbor<T: Real>(
        &self,
        event: &Event,
        params: &FlowParams,
        mut f: impl FnMut(Vector2<T>, T),
    ) {
        let r = params.patch_radius as i64;
        let (w, h) = (self.geometry.width as i64, self.geometry.height as i64);
        let (ex, ey) = (event.x as i64, event.y as i64);
        let off = self.plane_offset(event.polarity);
        let max_age = params.delta_max_us();
        for y in (ey - r).max(0)..=(ey + r).min(h - 1) {
            let row = off + y as usize * w as usize;
            for x in (ex - r).max(0)..=(ex + r).min(w - 1) {
                if x == ex && y == ey {
                    continue;
                }
                let t = self.stamps[row + x as usize];
                if t == NEVER || t > event.t {
                    continue;
                }
                let age = event.t - t;
                if age > max_age {
                    continue;
                }
                f(
                    Vector2::new(T::lit((x - ex) as f64), T::lit((y - ey) as f64)),
                    T::lit(age as f64 * 1e-6),
                );
            }
        }
    }

    /// Visits every pixel with a recent onset within `radius` of `event`,
    /// excluding the event's own pixel, as `(offset, onset age seconds)`.
    fn for_each_onset<T: Real>(
        &self,
        event: &Event,
        radius: u16,
        max_age: u64,
        mut f: impl FnMut(Vector2<T>, T),
    ) {
        let r = radius as i64;
        let (w, h) = (self.geometry.width as i64, self.geometry.height as i64);
        let (ex, ey) = (event.x as i64, event.y as i64);
        for y in (ey - r).max(0)..=(ey + r).min(h - 1) {
            let row = y as usize * w as usize;
            for x in (ex - r).max(0)..=(ex + r).min(w - 1) {
                if x == ex && y == ey {
                    continue;
                }
                let t = self.onsets[row + x as usize];
                if t == NEVER || t > event.t || event.t - t > max_age {
                    continue;
                }
                f(
                    Vector2::new(T::lit((x - ex) as f64), T::lit((y - ey) as f64)),
                    T::lit((event.t - t) as f64 * 1e-6),
                );
            }
        }
    }

    /// Writes the surface as an 8-bit PGM where brightness is `exp(−α δ)`.
    pub fn write_pgm<W: Write>(&self, mut w: W, t_now: u64, params: &FlowParams) -> std::io::Result<()> {
        let (width, height) = (self.geometry.width as usize, self.geometry.height as usize);
        writeln!(w, "P5\n{width} {height}\n255")?;
        let bytes: Vec<u8> = self.stamps[..width * height]
            .iter()
            .map(|&t| {
                if t == NEVER || t > t_now {
                    0
                } else {
                    let age = (t_now - t) as f64 * 1e-6;
                    (255.0 * (-params.alpha * age).exp()).round() as u8
                }
            })
            .collect();
        w.write_all(&bytes)?;
        w.flush()
    }
}

/// Symmetric 2×2 matrix `[[a, b], [b, c]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sym2<T> {
    pub a: T,
    pub b: T,
    pub c: T,
}

impl<T: Real> Sym2<T> {
    pub fn zero() -> Self {
        Self {
            a: T::zero(),
            b: T::zero(),
            c: T::zero(),
        }
    }

    /// Adds `w · u uᵀ`.
    #[inline]
    pub fn add_outer(&mut self, u: Vector2<T>, w: T) {
        self.a += w * u.x * u.x;
        self.b += w * u.x * u.y;
        self.c += w * u.y * u.y;
    }

    /// Eigenvalues in ascending order, closed form.
    pub fn eigenvalues(&self) -> (T, T) {
        let half = T::lit(0.5);
        let mean = (self.a + self.c) * half;
        let diff = (self.a - self.c) * half;
        let rad = (diff * diff + self.b * self.b).sqrt();
        (mean - rad, mean + rad)
    }

    /// Unit eigenvector of the smallest eigenvalue. When the two
    /// eigenvalues coincide the first basis vector is returned.
    pub fn smallest_eigenvector(&self) -> Vector2<T> {
        let (lo, hi) = self.eigenvalues();
        let scale = self.a.abs() + self.c.abs() + self.b.abs();
        let tiny = T::default_epsilon() * T::lit(16.0) * scale;
        if hi - lo <= tiny {
            return Vector2::new(T::one(), T::zero());
        }
        // Two candidate null vectors of (M − lo I); pick the better conditioned.
        let u = Vector2::new(self.b, lo - self.a);
        let v = Vector2::new(lo - self.c, self.b);
        let pick = if u.norm_squared() >= v.norm_squared() { u } else { v };
        pick / pick.norm()
    }

    /// Quadratic form `uᵀ M u`.
    #[inline]
    pub fn quad(&self, u: Vector2<T>) -> T {
        self.a * u.x * u.x + (self.b + self.b) * u.x * u.y + self.c * u.y * u.y
    }
}

/// Sign convention on RP¹ directions: second component positive, or zero
/// with the first positive.
#[inline]
pub fn sign_normalize<T: Real>(d: Vector2<T>) -> Vector2<T> {
    // Rounding residue in a component is snapped to zero so that a nearly
    // horizontal direction does not flip on the sign of that residue.
    let tiny = T::default_epsilon() * T::lit(16.0) * d.norm();
    let snap = |c: T| if c.abs() <= tiny { T::zero() } else { c };
    let d = Vector2::new(snap(d.x), snap(d.y));
    if d.y < T::zero() || (d.y == T::zero() && d.x < T::zero()) {
        -d
    } else {
        d
    }
}

pub fn is_normalized_direction<T: Real>(d: Vector2<T>) -> bool {
    let tol = T::lit(1e-6).max(T::default_epsilon() * T::lit(64.0));
    let unit = (d.norm() - T::one()).abs() <= tol;
    let upper = d.y > T::zero() || (d.y >= -tol && d.x > T::zero());
    unit && upper
}

/// Rotates a line normal by +90° to get the line direction.
#[inline]
pub fn normal_to_direction<T: Real>(n: Vector2<T>) -> Vector2<T> {
    Vector2::new(-n.y, n.x)
}

/// Weighted normal matrix of the patch around `event`, plus how many pixels
/// contributed.
pub fn flow_normal_matrix<T: Real>(
    surface: &SurfaceOfActiveEvents,
    event: &Event,
    params: &FlowParams,
) -> (Sym2<T>, usize) {
    let two_alpha = T::lit(2.0 * params.alpha);
    let mut m = Sym2::zero();
    let mut count = 0;
    surface.for_each_neighbor(event, params, |a: Vector2<T>, age: T| {
        m.add_outer(a, (-two_alpha * age).exp());
        count += 1;
    });
    (m, count)
}

/// Local flow direction at an event that has already been written to the
/// surface. `None` when fewer than `min_neighbors` pixels contribute.
pub fn estimate_flow_direction<T: Real>(
    surface: &SurfaceOfActiveEvents,
    event: &Event,
    params: &FlowParams,
) -> Option<Vector2<T>> {
    let (m, count) = flow_normal_matrix::<T>(surface, event, params);
    if count < params.min_neighbors {
        return None;
    }
    let normal = m.smallest_eigenvector();
    Some(sign_normalize(normal_to_direction(normal)))
}

/// Fewer onsets than this give the default speed.
pub const MIN_SPEED_SAMPLES: usize = 8;

/// Speed and signed direction of motion from onset ages around `event`.
///
/// Onset age is fitted against position along `direction`. The sign of the
/// least-squares slope picks the direction (older onsets lie behind the
/// front). The speed is the reduced-major-axis ratio
/// `sqrt(var(position) / var(age))`, which unlike `1/slope` is not inflated
/// by noise in the ages.
pub fn estimate_initial_speed<T: Real>(
    surface: &SurfaceOfActiveEvents,
    event: &Event,
    direction: Vector2<T>,
    flow: &FlowParams,
    s_default: f64,
    s_min: f64,
    s_max: f64,
) -> (Vector2<T>, T) {
    let (mut n, mut ss, mut sa, mut sss, mut saa, mut ssa) =
        (T::zero(), T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    surface.for_each_onset(event, flow.speed_radius, flow.delta_max_us(), |a: Vector2<T>, age: T| {
        let s = a.dot(&direction);
        n += T::one();
        ss += s;
        sa += age;
        sss += s * s;
        saa += age * age;
        ssa += s * age;
    });
    let fallback = (direction, T::lit(s_default));
    if n < T::lit(MIN_SPEED_SAMPLES as f64) {
        return fallback;
    }
    let var_s = sss / n - (ss / n) * (ss / n);
    let var_a = saa / n - (sa / n) * (sa / n);
    let cov = ssa / n - (ss / n) * (sa / n);
    // Ages are in seconds, so 1e-12 s² is a microsecond of spread.
    if var_a <= T::lit(1e-12) || var_s <= T::default_epsilon() || cov == T::zero() {
        return fallback;
    }
    let dir = if cov > T::zero() { -direction } else { direction };
    let speed = (var_s / var_a).sqrt().clamp(T::lit(s_min), T::lit(s_max));
    (dir, speed)
}

/// Per-pixel most recent flow direction and the time it was estimated.
#[derive(Debug, Clone)]
pub struct FlowDirectionField<T: Real> {
    geometry: SensorGeometry,
    directions: Vec<Vector2<T>>,
    stamps: Vec<u64>,
}

impl<T: Real> FlowDirectionField<T> {
    pub fn new(geometry: SensorGeometry) -> Self {
        Self {
            geometry,
            directions: vec![Vector2::zeros(); geometry.pixel_count()],
            stamps: vec![NEVER; geometry.pixel_count()],
        }
    }

    pub fn update(&mut self, x: u16, y: u16, direction: Vector2<T>, t: u64) -> Result<(), FlowError> {
        let i = check_bounds(self.geometry, x as i64, y as i64)?;
        if !is_normalized_direction(direction) {
            return Err(FlowError::NotNormalized);
        }
        self.directions[i] = direction;
        self.stamps[i] = t;
        Ok(())
    }

    pub fn get(&self, x: u16, y: u16) -> Option<(Vector2<T>, u64)> {
        let i = check_bounds(self.geometry, x as i64, y as i64).ok()?;
        (self.stamps[i] != NEVER).then(|| (self.directions[i], self.stamps[i]))
    }

    /// Weighted scatter of the stored directions around `event`, excluding
    /// the event's own pixel.
    pub fn direction_scatter(&self, event: &Event, params: &FlowParams) -> (Sym2<T>, usize) {
        let r = params.patch_radius as i64;
        let (w, h) = (self.geometry.width as i64, self.geometry.height as i64);
        let (ex, ey) = (event.x as i64, event.y as i64);
        let two_alpha = T::lit(2.0 * params.alpha);
        let max_age = params.delta_max_us();
        let mut n = Sym2::zero();
        let mut count = 0;
        for y in (ey - r).max(0)..=(ey + r).min(h - 1) {
            let row = y as usize * w as usize;
            for x in (ex - r).max(0)..=(ex + r).min(w - 1) {
                if x == ex && y == ey {
                    continue;
                }
                let i = row + x as usize;
                let t = self.stamps[i];
                if t == NEVER || t > event.t || event.t - t > max_age {
                    continue;
                }
                let age = T::lit((event.t - t) as f64 * 1e-6);
                n.add_outer(self.directions[i], (-two_alpha * age).exp());
                count += 1;
            }
        }
        (n, count)
    }

    /// Writes `x,y,t_us,dx,dy` rows for every populated pixel.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,y,t_us,dx,dy")?;
        let width = self.geometry.width as usize;
        for (i, (&t, d)) in self.stamps.iter().zip(&self.directions).enumerate() {
            if t != NEVER {
                writeln!(w, "{},{},{},{},{}", i % width, i / width, t, d.x.as_f64(), d.y.as_f64())?;
            }
        }
        w.flush()
    }
}

/// Direction orthogonal to the dominant stored flow around `event`.
pub fn estimate_dominant_direction<T: Real>(
    field: &FlowDirectionField<T>,
    event: &Event,
    params: &FlowParams,
) -> Option<Vector2<T>> {
    let (n, count) = field.direction_scatter(event, params);
    if count < params.min_neighbors {
        return None;
    }
    Some(n.smallest_eigenvector())
}
