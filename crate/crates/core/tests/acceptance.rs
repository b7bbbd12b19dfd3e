//! Acceptance suite. Every criterion runs in sequence inside one test so the
//! timing checks get the CPU to themselves, and each prints one PASS/FAIL
//! line whatever the others do.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use blobtrack::aeb_filter::{
    g_at_state, jacobian_g, jacobian_h, measurement_g, measurement_h, BufferedEvent, BufferedPrediction,
    FilterBuffers,
};
use blobtrack::blob_model::{chi2_2_critical, gate, inverse_shape, mahalanobis_sq_at, BlobState};
use blobtrack::classifier::{train, Dataset, Mlp, TrainConfig, LAYER_DIMS};
use blobtrack::evaluation::{score, EvaluationParams, MetricsReport};
use blobtrack::events::{
    generate_blob_events, generate_scene, scenes, Event, LabeledEvent, NoiseConfig, ObjectSpec, Polarity,
    SceneConfig, SensorGeometry, Trajectory,
};
use blobtrack::flowfield::{
    estimate_flow_direction, flow_normal_matrix, FlowDirectionField, FlowParams, Sym2, SurfaceOfActiveEvents,
};
use blobtrack::manager::{run, Association, TrackRecord, TrackerConfig, TrackerPool, Validator};
use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(id: usize, name: &str, o: &Outcome) {
    // Written straight to stdout so the line shows up with or without
    // --nocapture.
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "acceptance {id:>2} {name}: {verdict} ({})", o.detail).unwrap();
}

fn normal2(rng: &mut ChaCha8Rng) -> Vector2<f64> {
    Vector2::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
}

fn random_state(rng: &mut ChaCha8Rng) -> BlobState<f64> {
    BlobState {
        p: Vector2::new(rng.random_range(20.0..100.0), rng.random_range(20.0..100.0)),
        v: Vector2::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)),
        theta: rng.random_range(-1.5..1.5),
        q: rng.random_range(-2.0..2.0),
        lambda: Vector2::new(rng.random_range(2.0..5.0), rng.random_range(0.8..2.0)),
        delta: Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
    }
}

/// One event drawn from the blob model at `state`.
fn true_sample(state: &BlobState<f64>, rng: &mut ChaCha8Rng) -> (Vector2<f64>, f64) {
    let sigma = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let shape = state.shape().unwrap();
    (state.p + state.delta * sigma + shape * normal2(rng), sigma)
}

fn true_buffers(state: &BlobState<f64>, n: usize, rng: &mut ChaCha8Rng) -> FilterBuffers<f64> {
    let mut b = FilterBuffers::new(n);
    for _ in 0..n {
        let (position, sigma) = true_sample(state, rng);
        b.push(
            BufferedPrediction {
                position: state.p,
                inverse_shape: inverse_shape(state.theta, state.lambda),
                delta: state.delta,
                covariance_norm: 0.0,
            },
            BufferedEvent { position, sigma },
        );
    }
    b
}

fn run_pool(events: &[LabeledEvent], geometry: SensorGeometry, validator: Validator<f64>) -> Vec<TrackRecord<f64>> {
    let mut pool = TrackerPool::<f64>::new(geometry, TrackerConfig::default(), validator).unwrap();
    let mut out = Vec::new();
    for e in events {
        pool.process_event(e, &mut out).unwrap();
    }
    out
}

// 1
fn generator_fidelity() -> Outcome {
    let state = BlobState {
        p: Vector2::new(100.0, 80.0),
        v: Vector2::zeros(),
        theta: 0.5,
        q: 0.0,
        lambda: Vector2::new(4.0, 2.0),
        delta: Vector2::new(1.5, -0.8),
    };
    let spec = ObjectSpec {
        position: [state.p.x, state.p.y],
        velocity: [0.0, 0.0],
        theta: state.theta,
        q: 0.0,
        lambda: [state.lambda.x, state.lambda.y],
        delta: [state.delta.x, state.delta.y],
        waypoints: vec![],
        rate: 100_000.0,
        start_s: 0.0,
        end_s: None,
    };
    let events = generate_blob_events(&Trajectory::new(&spec, 1.0), spec.rate, 1, SensorGeometry::new(200, 160), 3);
    let shape = state.shape().unwrap();
    let target = shape * shape;
    let mut worst_se: f64 = 0.0;
    let mut worst_cov: f64 = 0.0;
    for sigma in [1.0, -1.0] {
        let pts: Vec<Vector2<f64>> = events
            .iter()
            .filter(|e| e.event.polarity.value::<f64>() == sigma)
            .map(|e| e.event.position())
            .collect();
        let n = pts.len() as f64;
        let mean = pts.iter().sum::<Vector2<f64>>() / n;
        let cov = pts.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Matrix2<f64>>() / (n - 1.0);
        let expected = state.p + state.delta * sigma;
        for k in 0..2 {
            let se = (cov[(k, k)] / n).sqrt();
            worst_se = worst_se.max((mean[k] - expected[k]).abs() / se);
        }
        worst_cov = worst_cov.max((cov - target).norm() / target.norm());
    }
    outcome(
        worst_se <= 3.0 && worst_cov <= 0.05,
        format!("{} events, worst mean error {worst_se:.2} SE, worst covariance error {:.2}%", events.len(), 100.0 * worst_cov),
    )
}

/// Axial angle (mod 180°) between a unit vector and an angle.
fn axial_gap_deg(u: Vector2<f64>, angle: f64) -> f64 {
    let d = (u.y.atan2(u.x) - angle).rem_euclid(std::f64::consts::PI);
    d.min(std::f64::consts::PI - d).to_degrees()
}

fn brute_force_min_angle(m: &Sym2<f64>) -> f64 {
    (0..3600)
        .map(|k| k as f64 * std::f64::consts::PI / 3600.0)
        .min_by(|a, b| {
            m.quad(Vector2::new(a.cos(), a.sin()))
                .total_cmp(&m.quad(Vector2::new(b.cos(), b.sin())))
        })
        .unwrap()
}

/// None when the scatter is isotropic and has no preferred direction.
fn gap_to_brute_force(m: &Sym2<f64>) -> Option<f64> {
    let (lo, hi) = m.eigenvalues();
    if hi - lo < 1e-3 * hi {
        return None;
    }
    Some(axial_gap_deg(m.smallest_eigenvector(), brute_force_min_angle(m)))
}

// 2
fn eigen_regression() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = FlowParams::default();
    let g = SensorGeometry::new(32, 32);
    let (mut worst, mut checked, mut degenerate) = (0.0f64, 0, 0);
    for i in 0..1000 {
        let t_now = 100_000u64;
        let e = Event::new(t_now, 16, 16, Polarity::On);
        if i % 2 == 0 {
            // Flow: random surface-of-active-events patch.
            let mut s = SurfaceOfActiveEvents::new(g, false);
            let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = rng.random_range(100.0..1000.0);
            for y in 12..=20u16 {
                for x in 12..=20u16 {
                    if rng.random_bool(0.7) {
                        let along = (x as f64 - 16.0) * heading.cos() + (y as f64 - 16.0) * heading.sin();
                        let age = ((4.0 - along) / speed * 1e6 + rng.random_range(0.0..2000.0)).max(0.0) as u64;
                        s.update(&Event::new(t_now.saturating_sub(age.min(t_now)), x, y, Polarity::On)).unwrap();
                    }
                }
            }
            s.update(&e).unwrap();
            let (m, count) = flow_normal_matrix::<f64>(&s, &e, &params);
            if count < params.min_neighbors {
                degenerate += 1;
                continue;
            }
            match gap_to_brute_force(&m) {
                Some(g) => {
                    worst = worst.max(g);
                    checked += 1;
                }
                None => degenerate += 1,
            }
        } else {
            // Dominant direction: random stored flow directions.
            let mut f = FlowDirectionField::<f64>::new(g);
            let base: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let spread = rng.random_range(0.05..1.0);
            for y in 12..=20u16 {
                for x in 12..=20u16 {
                    if rng.random_bool(0.7) {
                        let a: f64 = base + rng.random_range(-spread..spread);
                        let d = blobtrack::flowfield::sign_normalize(Vector2::new(a.cos(), a.sin()));
                        f.update(x, y, d, t_now - rng.random_range(0..20_000)).unwrap();
                    }
                }
            }
            let (m, count) = f.direction_scatter(&e, &params);
            if count < params.min_neighbors {
                degenerate += 1;
                continue;
            }
            match gap_to_brute_force(&m) {
                Some(g) => {
                    worst = worst.max(g);
                    checked += 1;
                }
                None => degenerate += 1,
            }
        }
    }
    outcome(
        worst <= 0.1 && checked >= 900,
        format!("{checked} instances, {degenerate} degenerate skipped, worst gap {worst:.4} deg"),
    )
}

// 3
fn flow_accuracy() -> Outcome {
    let heading = 30.0f64;
    let scene = generate_scene(&scenes::translating_blob(heading, 500.0, [3.0, 1.5], 20_000.0, 0.4, 7)).unwrap();
    let params = FlowParams::default();
    let mut surface = SurfaceOfActiveEvents::from_params(scene.geometry, &params);
    let mut emitted: Vec<(u64, f64)> = Vec::new();
    for e in &scene.events {
        surface.update(&e.event).unwrap();
        if let Some(d) = estimate_flow_direction::<f64>(&surface, &e.event, &params) {
            emitted.push((e.event.t, d.y.atan2(d.x)));
        }
    }
    // Circular mean of doubled angles, over 100 ms windows every 10 ms.
    let mut worst: f64 = 0.0;
    let mut windows = 0;
    let mut start = 0u64;
    while start + 100_000 <= 400_000 {
        let (mut c, mut s) = (0.0, 0.0);
        for &(_, a) in emitted.iter().filter(|(t, _)| *t >= start && *t < start + 100_000) {
            c += (2.0 * a).cos();
            s += (2.0 * a).sin();
        }
        let mean = 0.5 * s.atan2(c);
        worst = worst.max(axial_gap_deg(Vector2::new(mean.cos(), mean.sin()), heading.to_radians()));
        windows += 1;
        start += 10_000;
    }
    outcome(
        worst <= 10.0,
        format!("{} directions, {windows} windows, worst circular-mean error {worst:.2} deg", emitted.len()),
    )
}

// 4
fn detection() -> Outcome {
    let scene = generate_scene(&scenes::single_blob(4)).unwrap();
    let mut pool = TrackerPool::<f64>::new(scene.geometry, TrackerConfig::default(), Validator::Thresholds).unwrap();
    let mut out = Vec::new();
    let (mut blob_events, mut first) = (0, None);
    for e in &scene.events {
        blob_events += (e.label != 0) as usize;
        if let Association::Spawned(_) = pool.process_event(e, &mut out).unwrap() {
            first = Some(blob_events);
            break;
        }
    }
    // Uniform noise at the swarm background density: 20k events/s over
    // 640x480, 5 s, for 1e5 events.
    let background = scenes::SwarmOptions::default();
    let noise = SceneConfig {
        width: background.width,
        height: background.height,
        duration_s: 5.0,
        objects: vec![],
        noise: NoiseConfig {
            uniform_rate: background.uniform_noise_rate,
            flicker: vec![],
        },
        seed: 4,
    };
    let noise = generate_scene(&noise).unwrap();
    let mut config = TrackerConfig::default();
    config.manager.detect_only = true;
    let mut pool = TrackerPool::<f64>::new(noise.geometry, config, Validator::Thresholds).unwrap();
    for e in &noise.events {
        pool.process_event(e, &mut out).unwrap();
    }
    let per_1e5 = pool.stats().detections as f64 * 1e5 / noise.events.len() as f64;
    outcome(
        first.is_some_and(|n| n <= 200) && per_1e5 < 10.0,
        format!(
            "first detection after {first:?} blob events; {} noise events gave {} detections, {per_1e5:.2} per 1e5",
            noise.events.len(),
            pool.stats().detections
        ),
    )
}

// 5
fn gating() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let mut accepted = 0;
    for _ in 0..n {
        let s = random_state(&mut rng);
        let (pos, sigma) = true_sample(&s, &mut rng);
        accepted += gate(mahalanobis_sq_at(&s, pos, sigma), 0.95) as usize;
    }
    let rate = accepted as f64 / n as f64;
    let threshold = chi2_2_critical(0.95);
    outcome(
        (0.93..=0.97).contains(&rate) && (threshold - 5.9915).abs() < 1e-3,
        format!("pass rate {rate:.4}, threshold {threshold:.5}"),
    )
}

// 6
fn g_moments() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 20;
    let windows = 10_000;
    let s = random_state(&mut rng);
    let g: Vec<f64> = (0..windows).map(|_| measurement_g(&true_buffers(&s, n, &mut rng))).collect();
    let mean = g.iter().sum::<f64>() / windows as f64;
    let var = g.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / windows as f64;
    let nf = n as f64;
    outcome(
        (mean - 2.0 * nf).abs() <= 0.05 * 2.0 * nf && (var - 4.0 * nf).abs() <= 0.2 * 4.0 * nf,
        format!("mean {mean:.2} (expect {}), var {var:.2} (expect {})", 2 * n, 4 * n),
    )
}

// 7
fn jacobians() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_filter: f64 = 0.0;
    for _ in 0..100 {
        let s = random_state(&mut rng);
        let (pos, sigma) = true_sample(&s, &mut rng);
        let b = true_buffers(&s, 20, &mut rng);
        let jh = jacobian_h(&s, pos, sigma);
        let jg = jacobian_g(&s, &b);
        let x = s.to_vector();
        for k in 0..x.len() {
            let h = 1e-6 * (1.0 + x[k].abs());
            let (mut xp, mut xm) = (x, x);
            xp[k] += h;
            xm[k] -= h;
            let (sp, sm) = (BlobState::from_vector(&xp), BlobState::from_vector(&xm));
            let fd_h = (measurement_h(&sp, pos, sigma) - measurement_h(&sm, pos, sigma)) / (2.0 * h);
            let fd_g = (g_at_state(&sp, &b) - g_at_state(&sm, &b)) / (2.0 * h);
            let scale_h = jh.column(k).norm().max(fd_h.norm()).max(1.0);
            let scale_g = jg[k].abs().max(fd_g.abs()).max(1.0);
            worst_filter = worst_filter.max((fd_h - jh.column(k)).norm() / scale_h);
            worst_filter = worst_filter.max((fd_g - jg[k]).abs() / scale_g);
        }
    }

    let mut model = Mlp::<f64>::init(7);
    let mut params = model.params();
    for p in params.iter_mut() {
        *p += rng.random_range(-0.01..0.01);
    }
    model.set_params(&params);
    let batch = 4;
    let x = DMatrix::from_fn(LAYER_DIMS[0], batch, |_, _| rng.random_range(0.0..1.0));
    let y: Vec<f64> = (0..batch).map(|k| (k % 2) as f64).collect();
    let (_, grads) = model.loss_and_gradient(&x, &y);
    let analytic: Vec<f64> = grads
        .iter()
        .flat_map(|l| {
            let w: Vec<f64> = (0..l.weights.nrows()).flat_map(|r| l.weights.row(r).iter().copied().collect::<Vec<_>>()).collect();
            w.into_iter().chain(l.bias.iter().copied())
        })
        .collect();
    let loss_at = |p: &[f64]| {
        let mut m = model.clone();
        m.set_params(p);
        m.loss_and_gradient(&x, &y).0
    };
    let mut worst_mlp: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..300 {
        let i = rng.random_range(0..params.len());
        let h = 1e-6;
        let mut p = params.clone();
        p[i] += h;
        let up = loss_at(&p);
        p[i] -= 2.0 * h;
        let down = loss_at(&p);
        let fd = (up - down) / (2.0 * h);
        let g = analytic[i];
        // Inactive ReLU paths give exact zeros on both sides.
        if g.abs() < 1e-9 && fd.abs() < 1e-9 {
            continue;
        }
        let err = (fd - g).abs();
        if err > 1e-10 {
            worst_mlp = worst_mlp.max(err / fd.abs().max(g.abs()));
        }
        checked += 1;
    }
    outcome(
        worst_filter < 1e-4 && worst_mlp < 1e-5 && checked > 50,
        format!("filter worst relative error {worst_filter:.2e}; MLP worst {worst_mlp:.2e} over {checked} parameters"),
    )
}

// 8
fn tracker_convergence() -> Outcome {
    let cfg = scenes::translating_blob(20.0, 500.0, [4.0, 2.0], 20_000.0, 0.25, 8);
    let scene = generate_scene(&cfg).unwrap();
    let traj = Trajectory::new(&cfg.objects[0], cfg.duration_s);
    let records = run_pool(&scene.events, scene.geometry, Validator::Thresholds);
    let mut by_track: BTreeMap<u64, Vec<&TrackRecord<f64>>> = BTreeMap::new();
    for r in &records {
        by_track.entry(r.track_id).or_default().push(r);
    }
    let Some(main) = by_track.values().max_by_key(|rs| rs.iter().map(|r| r.event_count).max().unwrap_or(0)) else {
        return outcome(false, "no track".into());
    };
    // Converged once the track has fused 1000 events.
    let settled: Vec<_> = main.iter().filter(|r| r.event_count >= 1000).collect();
    if settled.is_empty() {
        return outcome(false, format!("{} events, track never settled", scene.events.len()));
    }
    let mse = settled
        .iter()
        .map(|r| {
            let s = traj.state_at(r.t_us as f64 * 1e-6);
            (r.state.p - Vector2::new(s.p[0], s.p[1])).norm_squared()
        })
        .sum::<f64>()
        / settled.len() as f64;
    // The shape estimate wanders a little from event to event, so the
    // converged estimate is its mean over the settled period.
    let l = settled.iter().map(|r| r.state.lambda).sum::<Vector2<f64>>() / settled.len() as f64;
    let lo = settled.iter().map(|r| r.state.lambda.x.min(r.state.lambda.y)).fold(f64::INFINITY, f64::min);
    let hi = settled.iter().map(|r| r.state.lambda.x.max(r.state.lambda.y)).fold(0.0, f64::max);
    let lambda_ok = (l.x - 4.0).abs() <= 1.0 && (l.y - 2.0).abs() <= 0.5;
    outcome(
        mse.sqrt() <= 1.0 && lambda_ok,
        format!(
            "{} events, {} settled samples, position RMSE {:.3} px, mean lambda ({:.2}, {:.2}), range [{lo:.2}, {hi:.2}]",
            scene.events.len(),
            settled.len(),
            mse.sqrt(),
            l.x,
            l.y
        ),
    )
}

struct Trained {
    model: Mlp<f64>,
    selected_epoch: usize,
    validation_accuracy: f64,
    unseen_accuracy: f64,
    unseen: usize,
    train_s: f64,
    positives: usize,
    negatives: usize,
}

/// Harvests labelled patches from one swarm scene and trains on a random
/// 2000 + 2000 subset. A further balanced 2000 + 2000 that training never
/// touches measures held-out accuracy, since the validation split picks the
/// returned epoch.
fn harvest_and_train() -> Trained {
    let scene = generate_scene(&scenes::swarm(&scenes::SwarmOptions::default(), 100)).unwrap();
    let mut pool = TrackerPool::<f64>::new(scene.geometry, TrackerConfig::default(), Validator::Harvest).unwrap();
    let mut out = Vec::new();
    for e in &scene.events {
        pool.process_event(e, &mut out).unwrap();
    }
    let harvested = pool.take_harvested();
    let mut order: Vec<usize> = (0..harvested.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let (mut data, mut unseen) = (Dataset::default(), Dataset::default());
    let mut taken = [0usize; 2];
    for i in order {
        let h = &harvested[i];
        let label = h.label != 0;
        let k = &mut taken[label as usize];
        if *k < 2000 {
            data.push(h.input.clone(), label);
        } else if *k < 4000 {
            unseen.push(h.input.clone(), label);
        }
        *k += 1;
    }
    let started = Instant::now();
    let (model, report) = train::<f64>(&data, &TrainConfig::default()).unwrap();
    let train_s = started.elapsed().as_secs_f64();
    let all: Vec<usize> = (0..unseen.len()).collect();
    let (_, unseen_accuracy) = blobtrack::classifier::evaluate(&model, &unseen, &all);
    Trained {
        model,
        selected_epoch: report.selected_epoch,
        validation_accuracy: report.selected_validation_accuracy().unwrap(),
        unseen_accuracy,
        unseen: unseen.len(),
        train_s,
        positives: data.positives(),
        negatives: data.len() - data.positives(),
    }
}

// 9
fn classifier(t: &Trained) -> Outcome {
    outcome(
        t.positives == 2000 && t.negatives == 2000 && t.unseen == 4000 && t.unseen_accuracy >= 0.95 && t.train_s <= 120.0,
        format!(
            "{}+{} patches, held-out accuracy {:.4} on {} unseen patches, validation accuracy {:.4} at epoch {}, training {:.1} s",
            t.positives, t.negatives, t.unseen_accuracy, t.unseen, t.validation_accuracy, t.selected_epoch, t.train_s
        ),
    )
}

// 10
fn crossing() -> Outcome {
    let cfg = scenes::crossing(10);
    let scene = generate_scene(&cfg).unwrap();
    let t_cross = 200_000u64;
    let t_check = t_cross + 50_000;
    let mut pool = TrackerPool::<f64>::new(scene.geometry, TrackerConfig::default(), Validator::Thresholds).unwrap();
    let mut out = Vec::new();
    // Per track, label counts before and after the crossing.
    let mut before: BTreeMap<u64, BTreeMap<u32, u64>> = BTreeMap::new();
    let mut after: BTreeMap<u64, BTreeMap<u32, u64>> = BTreeMap::new();
    let mut at_check = None;
    for e in &scene.events {
        if at_check.is_none() && e.event.t >= t_check {
            at_check = Some(
                pool.tracks()
                    .iter()
                    .map(|tr| (tr.id, tr.filter.predicted_state(t_check).p))
                    .collect::<Vec<_>>(),
            );
        }
        if let Association::Unique(id) = pool.process_event(e, &mut out).unwrap() {
            let side = if e.event.t < t_cross - 20_000 { &mut before } else { &mut after };
            *side.entry(id).or_default().entry(e.label).or_default() += 1;
        }
    }
    let owner = |counts: &BTreeMap<u64, BTreeMap<u32, u64>>, label: u32| {
        counts
            .iter()
            .map(|(id, m)| (*id, m.get(&label).copied().unwrap_or(0)))
            .max_by_key(|&(id, n)| (n, std::cmp::Reverse(id)))
            .filter(|&(_, n)| n > 0)
            .map(|(id, _)| id)
    };
    let at_check = at_check.unwrap_or_default();
    let mut details = Vec::new();
    let mut pass = true;
    for label in [1u32, 2] {
        let (pre, post) = (owner(&before, label), owner(&after, label));
        let truth = scene.truth.iter().find(|s| s.label == label && s.t_us == t_check).unwrap();
        let gt = Vector2::new(truth.position[0], truth.position[1]);
        let err = pre.and_then(|id| at_check.iter().find(|(tid, _)| *tid == id)).map(|(_, p)| (p - gt).norm());
        let ok = pre.is_some() && pre == post && err.is_some_and(|e| e <= 3.0);
        pass &= ok;
        details.push(format!(
            "object {label}: track {pre:?} before, {post:?} after, error at +50 ms {}",
            err.map_or("n/a (track gone)".to_string(), |e| format!("{e:.2} px"))
        ));
    }
    outcome(pass, details.join("; "))
}

// 11
fn swarm(model: &Mlp<f64>) -> (Outcome, Vec<LabeledEvent>, SensorGeometry) {
    let scene = generate_scene(&scenes::swarm(&scenes::SwarmOptions::default(), 1)).unwrap();
    let params = EvaluationParams::default();
    let with = run_pool(&scene.events, scene.geometry, Validator::Classifier(Box::new(model.clone())));
    let with = score(&with, &scene.events, &params).unwrap();
    let without = run_pool(&scene.events, scene.geometry, Validator::Thresholds);
    let without = score(&without, &scene.events, &params).unwrap();
    let (p, r) = (with.summary.precision.mean, with.summary.recall.mean);
    let (p0, r0) = (without.summary.precision.mean, without.summary.recall.mean);
    let mut table = String::new();
    for (name, rep) in [("classifier", &with), ("thresholds", &without)] {
        table.push_str(&row(name, rep));
    }
    (
        outcome(
            p >= 0.85 && r >= 0.60 && r0 > r && p0 < p,
            format!("classifier P {p:.3} R {r:.3}; thresholds P {p0:.3} R {r0:.3};{table}"),
        ),
        scene.events,
        scene.geometry,
    )
}

fn row(name: &str, rep: &MetricsReport) -> String {
    format!(" {}", rep.table_row(name))
}

// 12
fn throughput(model: &Mlp<f64>) -> Outcome {
    let options = scenes::SwarmOptions {
        duration_s: 10.0,
        ..Default::default()
    };
    let scene = generate_scene(&scenes::swarm(&options, 12)).unwrap();
    let n = scene.events.len().min(5_000_000);
    let events = &scene.events[..n];
    let mut pool =
        TrackerPool::<f64>::new(scene.geometry, TrackerConfig::default(), Validator::Classifier(Box::new(model.clone())))
            .unwrap();
    let mut out = Vec::new();
    let (mut live_sum, mut live_samples) = (0usize, 0usize);
    let started = Instant::now();
    for (k, e) in events.iter().enumerate() {
        pool.process_event(e, &mut out).unwrap();
        out.clear();
        if k % 10_000 == 0 {
            live_sum += pool.tracks().len();
            live_samples += 1;
        }
    }
    let wall = started.elapsed().as_secs_f64();
    outcome(
        n >= 5_000_000 && wall <= 30.0,
        format!(
            "{n} events in {wall:.2} s = {:.0} events/s, {:.1} concurrent tracks on average",
            n as f64 / wall,
            live_sum as f64 / live_samples as f64
        ),
    )
}

// 13
fn determinism(events: &[LabeledEvent], geometry: SensorGeometry, model: &Mlp<f64>) -> Outcome {
    let once = || {
        let mut out = Vec::new();
        run(
            events.iter().cloned().map(Ok),
            geometry,
            &TrackerConfig::default(),
            Validator::Classifier(Box::new(model.clone())),
            &mut out,
        )
        .unwrap();
        out
    };
    let (a, b) = (once(), once());
    let regenerated = generate_scene(&scenes::swarm(&scenes::SwarmOptions::default(), 1)).unwrap();
    outcome(
        a == b && regenerated.events == events,
        format!("{} bytes of track output, identical: {}; regenerated stream identical: {}", a.len(), a == b, regenerated.events == events),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    let mut record = |id: usize, name: &str, o: Outcome| {
        report(id, name, &o);
        results.push((id, o.pass));
    };
    record(1, "generator fidelity", generator_fidelity());
    record(2, "eigen-regression oracle", eigen_regression());
    record(3, "flow accuracy", flow_accuracy());
    record(4, "detection", detection());
    record(5, "gating calibration", gating());
    record(6, "G-statistic moments", g_moments());
    record(7, "Jacobian correctness", jacobians());
    record(8, "tracker convergence", tracker_convergence());
    let trained = harvest_and_train();
    record(9, "classifier", classifier(&trained));
    record(10, "crossing paths", crossing());
    let (o, swarm_events, geometry) = swarm(&trained.model);
    record(11, "synthetic swarm", o);
    record(12, "throughput", throughput(&trained.model));
    record(13, "determinism", determinism(&swarm_events, geometry, &trained.model));
    let failed: Vec<usize> = results.iter().filter(|(_, p)| !p).map(|(id, _)| *id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
