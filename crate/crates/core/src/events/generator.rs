//! Labelled synthetic scenes sampled from the Gaussian event-blob model.
//!
//! Each object emits a Poisson process of events. Every event draws a
//! polarity uniformly, then a position from `N(p(t) + σΔ(t), Λ(t)²)`,
//! rounded to the nearest pixel. Off-sensor samples are dropped.

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Event, EventError, LabeledEvent, Polarity, SensorGeometry};
use crate::blob_model::{shape_matrix, wrap_orientation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t_s: f64,
    pub position: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<[f64; 2]>,
}

/// One blob in a scene. Without waypoints the object moves at `velocity`;
/// with waypoints it moves at constant velocity between consecutive knots
/// and keeps the last segment's velocity afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub position: [f64; 2],
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub q: f64,
    pub lambda: [f64; 2],
    #[serde(default)]
    pub delta: [f64; 2],
    #[serde(default)]
    pub waypoints: Vec<Waypoint>,
    /// Events per second.
    pub rate: f64,
    #[serde(default)]
    pub start_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_s: Option<f64>,
}

/// Rectangular clutter region: uniform flicker plus short-lived,
/// polarity-unstructured bursts that drift a few pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlickerRegion {
    pub x: u16,
    pub y: u16,
    pub width: u16,
    pub height: u16,
    /// Uniform flicker events per second over the whole region.
    #[serde(default)]
    pub rate: f64,
    /// Bursts per second.
    #[serde(default)]
    pub burst_rate: f64,
    #[serde(default = "default_burst_size")]
    pub burst_size: u32,
    #[serde(default = "default_burst_sigma")]
    pub burst_sigma: f64,
    #[serde(default = "default_burst_duration")]
    pub burst_duration_s: f64,
    #[serde(default = "default_sway_speed")]
    pub sway_speed: f64,
}

fn default_burst_size() -> u32 {
    40
}
fn default_burst_sigma() -> f64 {
    1.5
}
fn default_burst_duration() -> f64 {
    0.01
}
fn default_sway_speed() -> f64 {
    200.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Uniform spatio-temporal noise over the sensor, events per second.
    #[serde(default)]
    pub uniform_rate: f64,
    #[serde(default)]
    pub flicker: Vec<FlickerRegion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub width: u16,
    pub height: u16,
    pub duration_s: f64,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub seed: u64,
}

impl SceneConfig {
    pub fn geometry(&self) -> SensorGeometry {
        SensorGeometry::new(self.width, self.height)
    }

    pub fn validate(&self) -> Result<(), EventError> {
        let bad = |m: String| Err(EventError::InvalidScene(m));
        if self.width == 0 || self.height == 0 {
            return bad("sensor width and height must be positive".into());
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration_s must be > 0, got {}", self.duration_s));
        }
        if !(self.noise.uniform_rate >= 0.0) {
            return bad("noise.uniform_rate must be >= 0".into());
        }
        for (i, r) in self.noise.flicker.iter().enumerate() {
            if !(r.rate >= 0.0 && r.burst_rate >= 0.0) {
                return bad(format!("noise.flicker[{i}]: rates must be >= 0"));
            }
            if r.width == 0 || r.height == 0 {
                return bad(format!("noise.flicker[{i}]: empty region"));
            }
            if !(r.burst_sigma > 0.0 && r.burst_duration_s > 0.0) {
                return bad(format!("noise.flicker[{i}]: burst sigma/duration must be > 0"));
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.rate >= 0.0) {
                return bad(format!("objects[{i}].rate must be >= 0"));
            }
            if !(o.lambda[0] > 0.0 && o.lambda[1] > 0.0) {
                return bad(format!("objects[{i}].lambda components must be > 0"));
            }
            let mut prev = o.start_s;
            for (j, w) in o.waypoints.iter().enumerate() {
                if !(w.t_s > prev) {
                    return bad(format!(
                        "objects[{i}].waypoints[{j}]: times must increase past start_s"
                    ));
                }
                prev = w.t_s;
            }
            if let Some(end) = o.end_s {
                if !(end > o.start_s) {
                    return bad(format!("objects[{i}].end_s must exceed start_s"));
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth blob state of one object at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub t_us: u64,
    pub label: u32,
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub theta: f64,
    pub q: f64,
    pub lambda: [f64; 2],
    pub delta: [f64; 2],
}

#[derive(Debug, Clone, Copy)]
struct Knot {
    t: f64,
    p: Vector2<f64>,
    theta: f64,
    delta: Vector2<f64>,
}

/// Piecewise-constant-velocity trajectory built from an [`ObjectSpec`].
#[derive(Debug, Clone)]
pub struct Trajectory {
    knots: Vec<Knot>,
    tail_velocity: Vector2<f64>,
    q: f64,
    lambda: [f64; 2],
    start: f64,
    end: f64,
}

impl Trajectory {
    pub fn new(spec: &ObjectSpec, duration_s: f64) -> Self {
        let mut knots = vec![Knot {
            t: spec.start_s,
            p: Vector2::from(spec.position),
            theta: spec.theta,
            delta: Vector2::from(spec.delta),
        }];
        for w in &spec.waypoints {
            let last = *knots.last().unwrap();
            let theta_base = last.theta + spec.q * (w.t_s - last.t);
            knots.push(Knot {
                t: w.t_s,
                p: Vector2::from(w.position),
                theta: w.theta.unwrap_or(theta_base),
                delta: w.delta.map(Vector2::from).unwrap_or(last.delta),
            });
        }
        let tail_velocity = if knots.len() >= 2 {
            let a = knots[knots.len() - 2];
            let b = knots[knots.len() - 1];
            (b.p - a.p) / (b.t - a.t)
        } else {
            Vector2::from(spec.velocity)
        };
        Self {
            knots,
            tail_velocity,
            q: spec.q,
            lambda: spec.lambda,
            start: spec.start_s,
            end: spec.end_s.unwrap_or(duration_s).min(duration_s),
        }
    }

    pub fn active_interval(&self) -> (f64, f64) {
        (self.start, self.end)
    }

    pub fn is_active(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }

    /// Returns `(p, v, θ, q, λ, Δ)` at time `t` (seconds).
    pub fn state_at(&self, t: f64) -> TrajectoryState {
        let idx = self.knots.partition_point(|k| k.t <= t).max(1) - 1;
        let k = self.knots[idx];
        let v = match self.knots.get(idx + 1) {
            Some(next) => (next.p - k.p) / (next.t - k.t),
            None => self.tail_velocity,
        };
        let dt = t - k.t;
        TrajectoryState {
            p: k.p + v * dt,
            v,
            theta: wrap_orientation(k.theta + self.q * dt),
            q: self.q,
            lambda: self.lambda,
            delta: k.delta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryState {
    pub p: Vector2<f64>,
    pub v: Vector2<f64>,
    pub theta: f64,
    pub q: f64,
    pub lambda: [f64; 2],
    pub delta: Vector2<f64>,
}

impl TrajectoryState {
    pub fn shape(&self) -> Matrix2<f64> {
        shape_matrix(self.theta, Vector2::from(self.lambda)).expect("validated lambda")
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_polarity<R: Rng>(rng: &mut R) -> Polarity {
    if rng.random::<bool>() {
        Polarity::On
    } else {
        Polarity::Off
    }
}

fn to_us(t: f64) -> u64 {
    (t * 1e6).round().max(0.0) as u64
}

/// Samples one object's events over its active interval. `rate` is in
/// events per second and must be positive for any output.
pub fn generate_blob_events(
    trajectory: &Trajectory,
    rate: f64,
    label: u32,
    geometry: SensorGeometry,
    seed: u64,
) -> Vec<LabeledEvent> {
    let mut rng = rng_for(seed, label as u64 + 1);
    sample_blob(trajectory, rate, label, geometry, &mut rng)
}

fn sample_blob<R: Rng>(
    trajectory: &Trajectory,
    rate: f64,
    label: u32,
    geometry: SensorGeometry,
    rng: &mut R,
) -> Vec<LabeledEvent> {
    let mut out = Vec::new();
    if !(rate > 0.0) {
        return out;
    }
    let gaps = Exp::new(rate).expect("positive rate");
    let (start, end) = trajectory.active_interval();
    let mut t = start + gaps.sample(rng);
    while t <= end {
        let s = trajectory.state_at(t);
        let polarity = random_polarity(rng);
        let z: Vector2<f64> = Vector2::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
        let mean = s.p + s.delta * polarity.value::<f64>();
        let xi = mean + s.shape() * z;
        let (x, y) = (xi.x.round() as i64, xi.y.round() as i64);
        if geometry.contains(x, y) {
            out.push(LabeledEvent::new(
                Event::new(to_us(t), x as u16, y as u16, polarity),
                label,
            ));
        }
        t += gaps.sample(rng);
    }
    out
}

fn sample_uniform<R: Rng>(
    rng: &mut R,
    rate: f64,
    duration: f64,
    x0: u16,
    y0: u16,
    w: u16,
    h: u16,
) -> Vec<LabeledEvent> {
    let mut out = Vec::new();
    if !(rate > 0.0) {
        return out;
    }
    let gaps = Exp::new(rate).expect("positive rate");
    let mut t = gaps.sample(rng);
    while t <= duration {
        let x = x0 + rng.random_range(0..w);
        let y = y0 + rng.random_range(0..h);
        out.push(LabeledEvent::new(
            Event::new(to_us(t), x, y, random_polarity(rng)),
            LabeledEvent::BACKGROUND,
        ));
        t += gaps.sample(rng);
    }
    out
}

fn sample_bursts<R: Rng>(
    rng: &mut R,
    region: &FlickerRegion,
    duration: f64,
    geometry: SensorGeometry,
    out: &mut Vec<LabeledEvent>,
) {
    if !(region.burst_rate > 0.0) {
        return;
    }
    let gaps = Exp::new(region.burst_rate).expect("positive rate");
    let mut t0 = gaps.sample(rng);
    while t0 <= duration {
        let cx = region.x as f64 + rng.random::<f64>() * region.width as f64;
        let cy = region.y as f64 + rng.random::<f64>() * region.height as f64;
        let heading = rng.random::<f64>() * std::f64::consts::TAU;
        let speed = rng.random::<f64>() * region.sway_speed;
        let (vx, vy) = (speed * heading.cos(), speed * heading.sin());
        let mut times: Vec<f64> = (0..region.burst_size)
            .map(|_| t0 + rng.random::<f64>() * region.burst_duration_s)
            .collect();
        times.sort_by(f64::total_cmp);
        for t in times {
            if t > duration {
                break;
            }
            let dt = t - t0;
            let zx: f64 = StandardNormal.sample(rng);
            let zy: f64 = StandardNormal.sample(rng);
            let x = (cx + vx * dt + region.burst_sigma * zx).round() as i64;
            let y = (cy + vy * dt + region.burst_sigma * zy).round() as i64;
            let inside = x >= region.x as i64
                && y >= region.y as i64
                && x < region.x as i64 + region.width as i64
                && y < region.y as i64 + region.height as i64;
            if inside && geometry.contains(x, y) {
                out.push(LabeledEvent::new(
                    Event::new(to_us(t), x as u16, y as u16, random_polarity(rng)),
                    LabeledEvent::BACKGROUND,
                ));
            }
        }
        t0 += gaps.sample(rng);
    }
}

/// Output of [`generate_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub geometry: SensorGeometry,
    pub events: Vec<LabeledEvent>,
    pub truth: Vec<TruthSample>,
}

/// Generates the merged, time-sorted stream for a whole scene plus its
/// 1 kHz ground-truth table. Identical configs give identical output.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene, EventError> {
    config.validate()?;
    let geometry = config.geometry();
    let trajectories: Vec<Trajectory> = config
        .objects
        .iter()
        .map(|o| Trajectory::new(o, config.duration_s))
        .collect();

    // (t, label, source, emission index) orders ties deterministically.
    let mut keyed: Vec<(u64, u32, u32, u32, LabeledEvent)> = Vec::new();
    let mut push_source = |source: u32, events: Vec<LabeledEvent>| {
        keyed.extend(
            events
                .into_iter()
                .enumerate()
                .map(|(i, e)| (e.event.t, e.label, source, i as u32, e)),
        );
    };

    let mut source = 0u32;
    let mut rng = rng_for(config.seed, 0);
    let noise = sample_uniform(
        &mut rng,
        config.noise.uniform_rate,
        config.duration_s,
        0,
        0,
        geometry.width,
        geometry.height,
    );
    push_source(source, noise);
    for (i, region) in config.noise.flicker.iter().enumerate() {
        source += 1;
        let mut rng = rng_for(config.seed, 1 << 32 | i as u64);
        let mut events = sample_uniform(
            &mut rng,
            region.rate,
            config.duration_s,
            region.x,
            region.y,
            region.width.min(geometry.width.saturating_sub(region.x)).max(1),
            region.height.min(geometry.height.saturating_sub(region.y)).max(1),
        );
        sample_bursts(&mut rng, region, config.duration_s, geometry, &mut events);
        events.sort_by_key(|e| e.event.t);
        push_source(source, events);
    }
    for (i, (spec, traj)) in config.objects.iter().zip(&trajectories).enumerate() {
        source += 1;
        let label = i as u32 + 1;
        push_source(
            source,
            generate_blob_events(traj, spec.rate, label, geometry, config.seed),
        );
    }
    keyed.sort_unstable_by_key(|k| (k.0, k.1, k.2, k.3));
    let events = keyed.into_iter().map(|k| k.4).collect();

    let mut truth = Vec::new();
    let steps = (config.duration_s * 1000.0).floor() as u64;
    for ms in 0..=steps {
        let t = ms as f64 * 1e-3;
        for (i, traj) in trajectories.iter().enumerate() {
            if !traj.is_active(t) {
                continue;
            }
            let s = traj.state_at(t);
            truth.push(TruthSample {
                t_us: ms * 1000,
                label: i as u32 + 1,
                position: [s.p.x, s.p.y],
                velocity: [s.v.x, s.v.y],
                theta: s.theta,
                q: s.q,
                lambda: s.lambda,
                delta: [s.delta.x, s.delta.y],
            });
        }
    }
    Ok(Scene {
        geometry,
        events,
        truth,
    })
}
