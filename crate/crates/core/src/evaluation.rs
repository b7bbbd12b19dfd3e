//! Precision and recall of validated tracks against labelled events, and
//! frame rendering for visual inspection.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{LabeledEvent, Polarity, SensorGeometry};
use crate::manager::{RecordKind, TrackRecord};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("ground truth spans {gt_start}..={gt_end} us but tracks span {tracks_start}..={tracks_end} us")]
    DisjointRanges {
        gt_start: u64,
        gt_end: u64,
        tracks_start: u64,
        tracks_end: u64,
    },
    #[error("ground-truth stream is empty")]
    EmptyGroundTruth,
    #[error("ground-truth stream carries no labels")]
    Unlabelled,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationParams {
    /// Match radius ε, px.
    pub epsilon: f64,
    pub cadence_us: u64,
    /// Half-width of the window whose labelled events give a ground-truth
    /// position, µs.
    pub gt_half_window_us: u64,
    /// A track whose latest record is older than this is not reported, µs.
    pub max_record_age_us: u64,
    pub frame_period_us: u64,
}

impl Default for EvaluationParams {
    fn default() -> Self {
        Self {
            epsilon: 5.0,
            cadence_us: 5000,
            gt_half_window_us: 2500,
            max_record_age_us: 2000,
            frame_period_us: 10_000,
        }
    }
}

impl EvaluationParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.epsilon > 0.0) {
            return Err("evaluation.epsilon must be > 0".into());
        }
        if self.cadence_us == 0 || self.frame_period_us == 0 {
            return Err("evaluation.cadence_us and evaluation.frame_period_us must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub t_us: u64,
    pub true_tracks: usize,
    pub false_tracks: usize,
    pub matched_gt: usize,
    pub total_gt: usize,
    /// `None` when nothing was reported but objects were present.
    pub precision: Option<f64>,
    /// `None` when no object was present.
    pub recall: Option<f64>,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n }
    }

    /// `0.82 (±0.10)`.
    pub fn table_cell(&self, decimals: usize) -> String {
        format!("{:.*} (±{:.*})", decimals, self.mean, decimals, self.std)
    }
}

/// Aggregates over all samples, one per column of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub samples: usize,
    pub epsilon_px: f64,
    pub cadence_ms: f64,
    pub true_tracks: MeanStd,
    pub false_tracks: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
    pub summary: MetricsSummary,
}

impl MetricsReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t_us,true_tracks,false_tracks,matched_gt,total_gt,precision,recall")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for s in &self.samples {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.t_us,
                s.true_tracks,
                s.false_tracks,
                s.matched_gt,
                s.total_gt,
                opt(s.precision),
                opt(s.recall)
            )?;
        }
        w.flush()
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<(), EvaluationError> {
        serde_json::to_writer_pretty(w, &self.summary)?;
        Ok(())
    }

    /// One Markdown row: true tracks, false tracks, precision, recall.
    pub fn table_row(&self, name: &str) -> String {
        let s = &self.summary;
        format!(
            "| {name} | {} | {} | {} | {} |",
            s.true_tracks.table_cell(2),
            s.false_tracks.table_cell(2),
            s.precision.table_cell(2),
            s.recall.table_cell(2)
        )
    }
}

pub const TABLE_HEADER: &str = "| Algorithm | True Tracks | False Tracks | Precision | Recall |\n|---|---|---|---|---|";

/// Per-track records sorted by time.
#[derive(Debug, Clone, Default)]
pub struct TrackIndex {
    tracks: BTreeMap<u64, Vec<TrackRecord<f64>>>,
    span: Option<(u64, u64)>,
}

impl TrackIndex {
    pub fn new(records: &[TrackRecord<f64>]) -> Self {
        let mut tracks: BTreeMap<u64, Vec<TrackRecord<f64>>> = BTreeMap::new();
        let mut span: Option<(u64, u64)> = None;
        for r in records.iter().filter(|r| r.kind != RecordKind::Detection) {
            tracks.entry(r.track_id).or_default().push(r.clone());
            span = Some(match span {
                None => (r.t_us, r.t_us),
                Some((a, b)) => (a.min(r.t_us), b.max(r.t_us)),
            });
        }
        for list in tracks.values_mut() {
            list.sort_by_key(|r| r.t_us);
        }
        Self { tracks, span }
    }

    pub fn span(&self) -> Option<(u64, u64)> {
        self.span
    }

    /// Latest record of each live track at `t`, no older than `max_age_us`.
    pub fn live_at(&self, t: u64, max_age_us: u64) -> impl Iterator<Item = &TrackRecord<f64>> {
        self.tracks.values().filter_map(move |list| {
            let k = list.partition_point(|r| r.t_us <= t);
            let r = list.get(k.checked_sub(1)?)?;
            (r.kind != RecordKind::Terminated && t - r.t_us <= max_age_us).then_some(r)
        })
    }

    /// Positions of validated tracks at `t`, extrapolated from their latest
    /// record.
    pub fn identified_at(&self, t: u64, max_age_us: u64) -> Vec<Vector2<f64>> {
        self.live_at(t, max_age_us)
            .filter(|r| r.kind.is_valid())
            .map(|r| r.state.p + r.state.v * ((t - r.t_us) as f64 * 1e-6))
            .collect()
    }
}

/// Mean position of each labelled object's events within `t ± half`.
/// `events` must be sorted by time.
pub fn ground_truth_at(events: &[LabeledEvent], t: u64, half_window_us: u64) -> Vec<(u32, Vector2<f64>)> {
    let lo = events.partition_point(|e| e.event.t < t.saturating_sub(half_window_us));
    let hi = events.partition_point(|e| e.event.t <= t + half_window_us);
    let mut sums: BTreeMap<u32, (Vector2<f64>, usize)> = BTreeMap::new();
    for e in events[lo..hi].iter().filter(|e| e.label != 0) {
        let entry = sums.entry(e.label).or_insert((Vector2::zeros(), 0));
        entry.0 += e.event.position::<f64>();
        entry.1 += 1;
    }
    sums.into_iter().map(|(label, (sum, n))| (label, sum / n as f64)).collect()
}

/// Greedy one-to-one matching by ascending distance. Returns the number of
/// pairs within `epsilon`.
pub fn greedy_match(tracks: &[Vector2<f64>], truth: &[Vector2<f64>], epsilon: f64) -> usize {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in tracks.iter().enumerate() {
        for (j, b) in truth.iter().enumerate() {
            let d = (a - b).norm();
            if d <= epsilon {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_t = vec![false; tracks.len()];
    let mut used_g = vec![false; truth.len()];
    let mut matches = 0;
    for (_, i, j) in pairs {
        if !used_t[i] && !used_g[j] {
            used_t[i] = true;
            used_g[j] = true;
            matches += 1;
        }
    }
    matches
}

/// Scores one sample.
pub fn score_sample(t_us: u64, tracks: &[Vector2<f64>], truth: &[Vector2<f64>], epsilon: f64) -> SampleMetrics {
    let matched = greedy_match(tracks, truth, epsilon);
    let (n_t, n_g) = (tracks.len(), truth.len());
    let precision = match (n_t, n_g) {
        (0, 0) => Some(1.0),
        (0, _) => None,
        _ => Some(matched as f64 / n_t as f64),
    };
    let recall = (n_g > 0).then(|| matched as f64 / n_g as f64);
    SampleMetrics {
        t_us,
        true_tracks: matched,
        false_tracks: n_t - matched,
        matched_gt: matched,
        total_gt: n_g,
        precision,
        recall,
    }
}

/// Scores track output against a labelled stream at a fixed cadence over
/// the stream's time range.
pub fn score(
    records: &[TrackRecord<f64>],
    events: &[LabeledEvent],
    params: &EvaluationParams,
) -> Result<MetricsReport, EvaluationError> {
    let (first, last) = match (events.first(), events.last()) {
        (Some(a), Some(b)) => (a.event.t, b.event.t),
        _ => return Err(EvaluationError::EmptyGroundTruth),
    };
    if events.iter().all(|e| e.label == 0) && !events.is_empty() && records.is_empty() {
        // Nothing to compare in either direction.
        return Err(EvaluationError::Unlabelled);
    }
    let index = TrackIndex::new(records);
    if let Some((a, b)) = index.span() {
        if b < first || a > last {
            return Err(EvaluationError::DisjointRanges {
                gt_start: first,
                gt_end: last,
                tracks_start: a,
                tracks_end: b,
            });
        }
    }
    let cadence = params.cadence_us;
    let mut samples = Vec::new();
    let mut t = first.div_ceil(cadence) * cadence;
    while t <= last {
        let truth: Vec<Vector2<f64>> = ground_truth_at(events, t, params.gt_half_window_us)
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        let tracks = index.identified_at(t, params.max_record_age_us);
        samples.push(score_sample(t, &tracks, &truth, params.epsilon));
        t += cadence;
    }
    let summary = MetricsSummary {
        samples: samples.len(),
        epsilon_px: params.epsilon,
        cadence_ms: cadence as f64 * 1e-3,
        true_tracks: MeanStd::of(samples.iter().map(|s| s.true_tracks as f64)),
        false_tracks: MeanStd::of(samples.iter().map(|s| s.false_tracks as f64)),
        precision: MeanStd::of(samples.iter().filter_map(|s| s.precision)),
        recall: MeanStd::of(samples.iter().filter_map(|s| s.recall)),
    };
    Ok(MetricsReport { samples, summary })
}

const ON_COLOUR: Rgb<u8> = Rgb([230, 230, 230]);
const OFF_COLOUR: Rgb<u8> = Rgb([70, 110, 255]);
const VALID_COLOUR: Rgb<u8> = Rgb([40, 230, 60]);
const CANDIDATE_COLOUR: Rgb<u8> = Rgb([250, 170, 20]);

/// 3×5 digit glyphs, one row per nibble, most significant bit left.
const DIGITS: [[u8; 5]; 10] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_number(img: &mut RgbImage, x: i64, y: i64, n: u64, c: Rgb<u8>) {
    for (k, ch) in n.to_string().bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        let x0 = x + 4 * k as i64;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) != 0 {
                    put(img, x0 + col, y + row as i64, c);
                }
            }
        }
    }
}

/// Outline of the ellipse with semi-axes `2λ` along θ.
pub fn draw_ellipse(img: &mut RgbImage, record: &TrackRecord<f64>, c: Rgb<u8>) {
    let s = &record.state;
    let (a, b) = (2.0 * s.lambda.x, 2.0 * s.lambda.y);
    let (sin, cos) = s.theta.sin_cos();
    let steps = ((a + b) * 8.0).ceil().max(32.0) as usize;
    for k in 0..steps {
        let phi = k as f64 / steps as f64 * std::f64::consts::TAU;
        let (u, v) = (a * phi.cos(), b * phi.sin());
        let x = s.p.x + cos * u - sin * v;
        let y = s.p.y + sin * u + cos * v;
        put(img, x.round() as i64, y.round() as i64, c);
    }
}

/// Number of frames covering `duration_us`.
pub fn frame_count(duration_us: u64, period_us: u64) -> usize {
    duration_us.div_ceil(period_us) as usize
}

/// Renders frames of `period_us`: the frame's events coloured by polarity,
/// then each live track at the frame's end, valid and candidate tracks in
/// different colours. `events` must be sorted by time.
pub fn render_frames(
    events: &[LabeledEvent],
    records: &[TrackRecord<f64>],
    geometry: SensorGeometry,
    duration_us: u64,
    period_us: u64,
) -> Vec<RgbImage> {
    let index = TrackIndex::new(records);
    let n = frame_count(duration_us, period_us);
    let mut frames = Vec::with_capacity(n);
    let mut cursor = 0;
    for k in 0..n as u64 {
        let (start, end) = (k * period_us, (k + 1) * period_us);
        let mut img = RgbImage::new(geometry.width as u32, geometry.height as u32);
        while cursor < events.len() && events[cursor].event.t < start {
            cursor += 1;
        }
        let mut i = cursor;
        while i < events.len() && events[i].event.t < end {
            let e = &events[i].event;
            let c = if e.polarity == Polarity::On { ON_COLOUR } else { OFF_COLOUR };
            put(&mut img, e.x as i64, e.y as i64, c);
            i += 1;
        }
        cursor = i;
        let t = end - 1;
        for r in index.live_at(t, period_us) {
            let c = if r.kind.is_valid() { VALID_COLOUR } else { CANDIDATE_COLOUR };
            draw_ellipse(&mut img, r, c);
            let top = r.state.p.y - 2.0 * r.state.lambda.x - 7.0;
            draw_number(&mut img, r.state.p.x.round() as i64, top.round() as i64, r.track_id, c);
        }
        frames.push(img);
    }
    frames
}

/// Writes `frame_00000.png`, … into `dir`. Returns the frame count.
pub fn render_to_dir(
    events: &[LabeledEvent],
    records: &[TrackRecord<f64>],
    geometry: SensorGeometry,
    duration_us: u64,
    period_us: u64,
    dir: &Path,
) -> Result<usize, EvaluationError> {
    std::fs::create_dir_all(dir)?;
    let frames = render_frames(events, records, geometry, duration_us, period_us);
    for (k, img) in frames.iter().enumerate() {
        img.save(dir.join(format!("frame_{k:05}.png")))?;
    }
    Ok(frames.len())
}
