//! Ready-made scene configurations used by the test suites and the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FlickerRegion, NoiseConfig, ObjectSpec, SceneConfig, Waypoint};

/// A single blob crossing the sensor in a straight line.
pub fn translating_blob(
    heading_deg: f64,
    speed: f64,
    lambda: [f64; 2],
    rate: f64,
    duration_s: f64,
    seed: u64,
) -> SceneConfig {
    let (w, h) = (320u16, 240u16);
    let heading = heading_deg.to_radians();
    let dir = [heading.cos(), heading.sin()];
    let half = 0.5 * speed * duration_s;
    let centre = [w as f64 / 2.0, h as f64 / 2.0];
    SceneConfig {
        width: w,
        height: h,
        duration_s,
        objects: vec![ObjectSpec {
            position: [centre[0] - dir[0] * half, centre[1] - dir[1] * half],
            velocity: [speed * dir[0], speed * dir[1]],
            theta: heading,
            q: 0.0,
            lambda,
            delta: [1.5 * dir[0], 1.5 * dir[1]],
            waypoints: vec![],
            rate,
            start_s: 0.0,
            end_s: None,
        }],
        noise: NoiseConfig::default(),
        seed,
    }
}

/// Clean single-blob scene: 500 px/s heading 0°, λ = (3, 1.5).
pub fn single_blob(seed: u64) -> SceneConfig {
    translating_blob(0.0, 500.0, [3.0, 1.5], 20_000.0, 0.4, seed)
}

/// Two blobs at 500 px/s whose paths cross at 90° in the sensor centre at
/// `t = 0.2 s`.
pub fn crossing(seed: u64) -> SceneConfig {
    let (w, h) = (320u16, 240u16);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let speed = 500.0;
    let t_cross = 0.2;
    let d = speed * t_cross;
    let blob = |position: [f64; 2], dir: [f64; 2]| ObjectSpec {
        position,
        velocity: [speed * dir[0], speed * dir[1]],
        theta: dir[1].atan2(dir[0]),
        q: 0.0,
        lambda: [3.0, 1.5],
        delta: [1.5 * dir[0], 1.5 * dir[1]],
        waypoints: vec![],
        rate: 20_000.0,
        start_s: 0.0,
        end_s: None,
    };
    SceneConfig {
        width: w,
        height: h,
        duration_s: 0.4,
        objects: vec![blob([cx - d, cy], [1.0, 0.0]), blob([cx, cy - d], [0.0, 1.0])],
        noise: NoiseConfig::default(),
        seed,
    }
}

#[derive(Debug, Clone)]
pub struct SwarmOptions {
    pub width: u16,
    pub height: u16,
    pub objects: usize,
    pub duration_s: f64,
    pub speed_range: [f64; 2],
    pub rate_range: [f64; 2],
    pub lambda_major: [f64; 2],
    pub aspect: [f64; 2],
    /// Mean time between random heading changes.
    pub turn_interval_s: f64,
    pub uniform_noise_rate: f64,
    pub clutter: bool,
}

impl Default for SwarmOptions {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            objects: 20,
            duration_s: 5.0,
            speed_range: [200.0, 700.0],
            rate_range: [8_000.0, 16_000.0],
            lambda_major: [2.5, 4.0],
            aspect: [0.4, 0.7],
            turn_interval_s: 1.0,
            uniform_noise_rate: 20_000.0,
            clutter: true,
        }
    }
}

/// Random blobs bouncing around the sensor, with optional clutter regions
/// standing in for swaying foliage in the lower-right quadrant.
pub fn swarm(options: &SwarmOptions, seed: u64) -> SceneConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a4a);
    let margin = 15.0;
    let (w, h) = (options.width as f64, options.height as f64);
    let clutter_box = [0.6 * w, 0.6 * h, w, h];
    let in_clutter = |p: [f64; 2]| {
        options.clutter
            && p[0] > clutter_box[0] - margin
            && p[1] > clutter_box[1] - margin
    };
    let mut objects = Vec::with_capacity(options.objects);
    for _ in 0..options.objects {
        let mut p = loop {
            let p = [
                rng.random_range(margin..w - margin),
                rng.random_range(margin..h - margin),
            ];
            if !in_clutter(p) {
                break p;
            }
        };
        let speed = rng.random_range(options.speed_range[0]..options.speed_range[1]);
        let major = rng.random_range(options.lambda_major[0]..options.lambda_major[1]);
        let minor = major * rng.random_range(options.aspect[0]..options.aspect[1]);
        let rate = rng.random_range(options.rate_range[0]..options.rate_range[1]);
        let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let start = p;
        let dir = [heading.cos(), heading.sin()];
        let first_dir = dir;
        let mut waypoints = Vec::new();
        let mut t = 0.0;
        while t < options.duration_s {
            let dir = [heading.cos(), heading.sin()];
            // Time until a wall (or the clutter box) is reached.
            let mut hit: f64 = f64::INFINITY;
            for (k, lo, hi) in [(0, margin, w - margin), (1, margin, h - margin)] {
                if dir[k] > 1e-9 {
                    hit = hit.min((hi - p[k]) / (dir[k] * speed));
                } else if dir[k] < -1e-9 {
                    hit = hit.min((lo - p[k]) / (dir[k] * speed));
                }
            }
            let turn = rng.random_range(0.5..1.5) * options.turn_interval_s;
            let mut seg = hit.min(turn).max(0.02);
            if options.clutter {
                // Stop short of the clutter quadrant.
                let steps = 50;
                for i in 1..=steps {
                    let s = seg * i as f64 / steps as f64;
                    let q = [p[0] + dir[0] * speed * s, p[1] + dir[1] * speed * s];
                    if in_clutter(q) {
                        seg = (seg * (i - 1) as f64 / steps as f64).max(0.02);
                        break;
                    }
                }
            }
            t += seg;
            p = [p[0] + dir[0] * speed * seg, p[1] + dir[1] * speed * seg];
            p[0] = p[0].clamp(margin, w - margin);
            p[1] = p[1].clamp(margin, h - margin);
            // New heading pointing back into the free area.
            heading = loop {
                let cand: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let probe = [p[0] + cand.cos() * 40.0, p[1] + cand.sin() * 40.0];
                let inside = probe[0] > margin
                    && probe[0] < w - margin
                    && probe[1] > margin
                    && probe[1] < h - margin;
                if inside && !in_clutter(probe) {
                    break cand;
                }
            };
            let nd = [heading.cos(), heading.sin()];
            waypoints.push(Waypoint {
                t_s: t,
                position: p,
                theta: Some(heading),
                delta: Some([1.5 * nd[0], 1.5 * nd[1]]),
            });
        }
        objects.push(ObjectSpec {
            position: start,
            velocity: [speed * first_dir[0], speed * first_dir[1]],
            theta: first_dir[1].atan2(first_dir[0]),
            q: 0.0,
            lambda: [major, minor],
            delta: [1.5 * first_dir[0], 1.5 * first_dir[1]],
            waypoints,
            rate,
            start_s: 0.0,
            end_s: None,
        });
    }
    let mut flicker = Vec::new();
    if options.clutter {
        let (x0, y0) = (clutter_box[0] as u16, clutter_box[1] as u16);
        let (cw, ch) = (options.width - x0, options.height - y0);
        let area = cw as f64 * ch as f64;
        flicker.push(FlickerRegion {
            x: x0,
            y: y0,
            width: cw,
            height: ch,
            rate: 5.0 * area,
            burst_rate: area / 40.0,
            burst_size: 40,
            burst_sigma: 1.5,
            burst_duration_s: 0.01,
            sway_speed: 200.0,
        });
    }
    SceneConfig {
        width: options.width,
        height: options.height,
        duration_s: options.duration_s,
        objects,
        noise: NoiseConfig {
            uniform_rate: options.uniform_noise_rate,
            flicker,
        },
        seed,
    }
}
