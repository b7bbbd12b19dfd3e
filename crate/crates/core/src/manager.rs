//! Track pool: per-event association, filter dispatch, patch batching,
//! validation, promotion and termination.
//!
//! Each event is gated against valid tracks first, then candidates. A
//! single gated track is updated; several gated tracks are only predicted;
//! no gated track sends the event to the detector.

use std::io::Write;
use std::time::Instant;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aeb_filter::{AebFilter, FilterConfig};
use crate::blob_model::{chi2_2_critical, mahalanobis_sq_at, BlobState};
use crate::classifier::{ClassifierError, EvaluationBuffer, Mlp, Verdict};
use crate::detector::{process_unassociated_event, DetectorParams};
use crate::events::{EventError, LabeledEvent, SensorGeometry};
use crate::flowfield::{FlowDirectionField, FlowParams, SurfaceOfActiveEvents};
use crate::patch::{IntensityPatch, PatchParams};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum ManagerError {
    #[error("event at {current} us arrived after {previous} us")]
    OutOfOrder { previous: u64, current: u64 },
    #[error("event ({x}, {y}) lies outside the {width}x{height} sensor")]
    OutOfBounds { x: u16, y: u16, width: u16, height: u16 },
    #[error(transparent)]
    Events(#[from] EventError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("track CSV line {line}: {message}")]
    TrackCsv { line: usize, message: String },
}

/// Promotion rule used when no classifier is available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdParams {
    /// Upper bound on the position-covariance trace, px².
    pub max_position_cov_trace: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Bounds on both shape axes, px.
    pub min_lambda: f64,
    pub max_lambda: f64,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self {
            max_position_cov_trace: 2.0,
            min_speed: 50.0,
            max_speed: 5000.0,
            min_lambda: 0.75,
            max_lambda: 8.0,
        }
    }
}

impl ThresholdParams {
    pub fn accepts<T: Real>(&self, state: &BlobState<T>, position_cov_trace: T) -> bool {
        let speed = state.v.norm().as_f64();
        let (l1, l2) = (state.lambda.x.as_f64(), state.lambda.y.as_f64());
        position_cov_trace.as_f64() < self.max_position_cov_trace
            && (self.min_speed..=self.max_speed).contains(&speed)
            && (self.min_lambda..=self.max_lambda).contains(&l1)
            && (self.min_lambda..=self.max_lambda).contains(&l2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManagerParams {
    /// Gate significance; the gate is the χ²₂ quantile at this level.
    pub significance: f64,
    /// Staleness multiplier κ on the mean inter-event interval.
    pub kappa: f64,
    pub batch_size: usize,
    pub evaluation_buffer: usize,
    pub max_tracks: Option<usize>,
    /// Tolerance beyond the image border before a track is dropped, px.
    pub edge_margin: f64,
    /// Smoothing factor of the inter-event interval average.
    pub interval_smoothing: f64,
    /// Interval assumed for a new track before it has seen events, µs.
    pub initial_interval_us: f64,
    /// Period of per-track state samples, µs. 0 disables them.
    pub sample_period_us: u64,
    /// Run the detector on every unassociated event without spawning.
    pub detect_only: bool,
    pub thresholds: ThresholdParams,
    /// Minimum share of one label among a batch's events for a harvested
    /// patch to be kept.
    pub harvest_min_purity: f64,
    /// Largest mean offset of a batch's events from the track position for
    /// an object patch to be kept, px.
    pub harvest_max_offset: f64,
    /// Two overlapping tracks whose velocities differ by less than this
    /// fraction of the faster one are duplicates; the weaker is dropped.
    /// 0 disables the check.
    pub duplicate_speed_tolerance: f64,
}

impl Default for ManagerParams {
    fn default() -> Self {
        Self {
            significance: 0.95,
            kappa: 20.0,
            batch_size: 50,
            evaluation_buffer: 15,
            max_tracks: None,
            edge_margin: 2.0,
            interval_smoothing: 0.05,
            initial_interval_us: 1000.0,
            sample_period_us: 1000,
            detect_only: false,
            thresholds: ThresholdParams::default(),
            harvest_min_purity: 0.8,
            harvest_max_offset: 2.0,
            duplicate_speed_tolerance: 0.3,
        }
    }
}

impl ManagerParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err("manager.significance must lie in (0, 1)".into());
        }
        if !(self.kappa > 1.0) {
            return Err("manager.kappa must be > 1".into());
        }
        if self.batch_size == 0 || self.evaluation_buffer == 0 {
            return Err("manager.batch_size and manager.evaluation_buffer must be >= 1".into());
        }
        if !(self.interval_smoothing > 0.0 && self.interval_smoothing <= 1.0) {
            return Err("manager.interval_smoothing must lie in (0, 1]".into());
        }
        if !(self.initial_interval_us > 0.0) {
            return Err("manager.initial_interval_us must be > 0".into());
        }
        if !(self.duplicate_speed_tolerance >= 0.0) {
            return Err("manager.duplicate_speed_tolerance must be >= 0".into());
        }
        if !(self.edge_margin >= 0.0) {
            return Err("manager.edge_margin must be >= 0".into());
        }
        if !(self.harvest_max_offset > 0.0) {
            return Err("manager.harvest_max_offset must be > 0".into());
        }
        if !(self.harvest_min_purity > 0.5 && self.harvest_min_purity <= 1.0) {
            return Err("manager.harvest_min_purity must lie in (0.5, 1]".into());
        }
        Ok(())
    }
}

/// Every parameter block the tracker reads.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub flowfield: FlowParams,
    pub detector: DetectorParams,
    pub filter: FilterConfig,
    pub patch: PatchParams,
    pub manager: ManagerParams,
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.flowfield.validate()?;
        self.detector.validate()?;
        self.filter.validate()?;
        self.patch.validate()?;
        self.manager.validate()
    }
}

/// How candidates are judged at batch boundaries.
#[derive(Debug, Clone)]
pub enum Validator<T: Real> {
    Classifier(Box<Mlp<T>>),
    Thresholds,
    /// Never promote; collect labelled patches instead.
    Harvest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Candidate,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Spawned,
    Candidate,
    Promoted,
    Valid,
    Terminated,
    /// A detector firing in detect-only mode; `track_id` is 0.
    Detection,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Spawned => "spawned",
            RecordKind::Candidate => "candidate",
            RecordKind::Promoted => "promoted",
            RecordKind::Valid => "valid",
            RecordKind::Terminated => "terminated",
            RecordKind::Detection => "detection",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "spawned" => RecordKind::Spawned,
            "candidate" => RecordKind::Candidate,
            "promoted" => RecordKind::Promoted,
            "valid" => RecordKind::Valid,
            "terminated" => RecordKind::Terminated,
            "detection" => RecordKind::Detection,
            _ => return None,
        })
    }

    /// Whether the track counts as validated at this record.
    pub fn is_valid(self) -> bool {
        matches!(self, RecordKind::Promoted | RecordKind::Valid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    OffImage,
    Stale,
    Rejected,
    Diverged,
    /// Overlapped a more established track moving the same way.
    Duplicate,
}

pub const TRACK_CSV_HEADER: &str =
    "t_us,track_id,status,px,py,vx,vy,theta,q,l1,l2,dx,dy,cov_trace,event_count";

/// One line of track output.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord<T: Real> {
    pub t_us: u64,
    pub track_id: u64,
    pub kind: RecordKind,
    pub state: BlobState<T>,
    /// Trace of the position covariance, px².
    pub cov_trace: T,
    pub event_count: u64,
}

impl<T: Real> TrackRecord<T> {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let s = &self.state;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.t_us,
            self.track_id,
            self.kind.as_str(),
            s.p.x.as_f64(),
            s.p.y.as_f64(),
            s.v.x.as_f64(),
            s.v.y.as_f64(),
            s.theta.as_f64(),
            s.q.as_f64(),
            s.lambda.x.as_f64(),
            s.lambda.y.as_f64(),
            s.delta.x.as_f64(),
            s.delta.y.as_f64(),
            self.cov_trace.as_f64(),
            self.event_count
        )
    }
}

impl TrackRecord<f64> {
    /// Parses one data line of the track CSV.
    pub fn parse_csv(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 15 {
            return Err(format!("expected 15 fields, found {}", fields.len()));
        }
        let int = |i: usize| fields[i].parse::<u64>().map_err(|e| format!("field {i}: {e}"));
        let num = |i: usize| fields[i].parse::<f64>().map_err(|e| format!("field {i}: {e}"));
        let kind = RecordKind::parse(fields[2]).ok_or_else(|| format!("unknown status {:?}", fields[2]))?;
        Ok(TrackRecord {
            t_us: int(0)?,
            track_id: int(1)?,
            kind,
            state: BlobState {
                p: Vector2::new(num(3)?, num(4)?),
                v: Vector2::new(num(5)?, num(6)?),
                theta: num(7)?,
                q: num(8)?,
                lambda: Vector2::new(num(9)?, num(10)?),
                delta: Vector2::new(num(11)?, num(12)?),
            },
            cov_trace: num(13)?,
            event_count: int(14)?,
        })
    }
}

/// Reads a track CSV written by [`run`].
pub fn read_track_csv<R: std::io::BufRead>(reader: R) -> Result<Vec<TrackRecord<f64>>, ManagerError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != TRACK_CSV_HEADER {
                return Err(ManagerError::TrackCsv {
                    line: 1,
                    message: format!("expected header {TRACK_CSV_HEADER:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let record = TrackRecord::parse_csv(&line).map_err(|message| ManagerError::TrackCsv { line: i + 1, message })?;
        records.push(record);
    }
    Ok(records)
}

/// What happened to one event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Association {
    /// Fused into exactly one track.
    Unique(u64),
    /// Gated by several tracks; each was only predicted.
    Ambiguous(Vec<u64>),
    /// Unclaimed and detected; a candidate with this id was spawned.
    Spawned(u64),
    /// Unclaimed and detected, but not spawned (detect-only mode,
    /// suppression radius or track cap).
    Detected,
    /// Unclaimed and not a detection.
    Unassociated,
}

/// A labelled patch collected in harvest mode.
#[derive(Debug, Clone, PartialEq)]
pub struct HarvestedPatch {
    pub track_id: u64,
    pub t_us: u64,
    /// Majority ground-truth label of the batch.
    pub label: u32,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Track<T: Real> {
    pub id: u64,
    pub status: TrackStatus,
    pub filter: AebFilter<T>,
    pub patch: IntensityPatch<T>,
    pub evaluations: EvaluationBuffer,
    pub created_t: u64,
    pub last_event_t: u64,
    pub event_count: u64,
    pub batch_count: usize,
    /// Moving average of the inter-event interval, s.
    pub mean_interval_s: f64,
    batch_labels: Vec<(u32, u32)>,
    /// Sum of event offsets from the track position over the current batch.
    batch_offset: Vector2<f64>,
}

impl<T: Real> Track<T> {
    fn record(&self, t_us: u64, kind: RecordKind) -> TrackRecord<T> {
        TrackRecord {
            t_us,
            track_id: self.id,
            kind,
            state: self.filter.predicted_state(t_us),
            cov_trace: self.filter.position_covariance_trace(),
            event_count: self.event_count,
        }
    }

    fn sample_kind(&self) -> RecordKind {
        match self.status {
            TrackStatus::Candidate => RecordKind::Candidate,
            TrackStatus::Valid => RecordKind::Valid,
        }
    }

    fn note_label(&mut self, label: u32) {
        match self.batch_labels.iter_mut().find(|(l, _)| *l == label) {
            Some((_, n)) => *n += 1,
            None => self.batch_labels.push((label, 1)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub events: u64,
    pub unique: u64,
    pub ambiguous: u64,
    pub detections: u64,
    pub spawned: u64,
    pub promoted: u64,
    pub terminated_off_image: u64,
    pub terminated_stale: u64,
    pub terminated_rejected: u64,
    pub terminated_diverged: u64,
    pub terminated_duplicate: u64,
    pub classifications: u64,
}

pub struct TrackerPool<T: Real> {
    geometry: SensorGeometry,
    config: TrackerConfig,
    validator: Validator<T>,
    surface: SurfaceOfActiveEvents,
    field: FlowDirectionField<T>,
    tracks: Vec<Track<T>>,
    next_id: u64,
    last_t: Option<u64>,
    next_sample_t: Option<u64>,
    next_duplicate_check_t: u64,
    gate: T,
    sqrt_gate: T,
    stats: PoolStats,
    harvested: Vec<HarvestedPatch>,
    lifetimes_us: Vec<u64>,
}

impl<T: Real> TrackerPool<T> {
    pub fn new(geometry: SensorGeometry, config: TrackerConfig, validator: Validator<T>) -> Result<Self, ManagerError> {
        config.validate().map_err(ManagerError::Config)?;
        let gate = T::lit(chi2_2_critical(config.manager.significance));
        Ok(Self {
            geometry,
            surface: SurfaceOfActiveEvents::from_params(geometry, &config.flowfield),
            field: FlowDirectionField::new(geometry),
            config,
            validator,
            tracks: Vec::new(),
            next_id: 1,
            last_t: None,
            next_sample_t: None,
            next_duplicate_check_t: 0,
            gate,
            sqrt_gate: gate.sqrt(),
            stats: PoolStats::default(),
            harvested: Vec::new(),
            lifetimes_us: Vec::new(),
        })
    }

    pub fn tracks(&self) -> &[Track<T>] {
        &self.tracks
    }

    pub fn stats(&self) -> &PoolStats {
        &self.stats
    }

    pub fn harvested(&self) -> &[HarvestedPatch] {
        &self.harvested
    }

    pub fn take_harvested(&mut self) -> Vec<HarvestedPatch> {
        std::mem::take(&mut self.harvested)
    }

    /// Lifetimes of terminated tracks, µs.
    pub fn lifetimes_us(&self) -> &[u64] {
        &self.lifetimes_us
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Processes one event, appending state-change and periodic records.
    pub fn process_event(
        &mut self,
        labeled: &LabeledEvent,
        out: &mut Vec<TrackRecord<T>>,
    ) -> Result<Association, ManagerError> {
        let event = &labeled.event;
        if let Some(prev) = self.last_t {
            if event.t < prev {
                return Err(ManagerError::OutOfOrder {
                    previous: prev,
                    current: event.t,
                });
            }
        }
        if !self.geometry.contains(event.x as i64, event.y as i64) {
            return Err(ManagerError::OutOfBounds {
                x: event.x,
                y: event.y,
                width: self.geometry.width,
                height: self.geometry.height,
            });
        }
        self.last_t = Some(event.t);
        self.stats.events += 1;
        self.emit_samples(event.t, out);
        self.surface
            .update(event)
            .expect("bounds checked above");

        let position = event.position::<T>();
        let sigma = event.polarity.value::<T>();
        let mut gated = self.gated(position, sigma, event.t, TrackStatus::Valid);
        if gated.is_empty() {
            gated = self.gated(position, sigma, event.t, TrackStatus::Candidate);
        }

        let association = match gated.len() {
            0 => self.detect(labeled, out),
            1 => {
                let i = gated[0];
                self.stats.unique += 1;
                let id = self.tracks[i].id;
                self.associate(i, labeled, out)?;
                Association::Unique(id)
            }
            _ => {
                self.stats.ambiguous += 1;
                let mut ids = Vec::with_capacity(gated.len());
                for &i in &gated {
                    let track = &mut self.tracks[i];
                    ids.push(track.id);
                    if track.filter.predict_to(event.t).is_ok() {
                        track.last_event_t = event.t;
                    }
                }
                Association::Ambiguous(ids)
            }
        };
        self.housekeeping(event.t, out);
        Ok(association)
    }

    /// Indices of tracks with the given status whose gate contains the
    /// event.
    fn gated(&self, position: Vector2<T>, sigma: T, t: u64, status: TrackStatus) -> Vec<usize> {
        let mut hits = Vec::new();
        for (i, track) in self.tracks.iter().enumerate() {
            if track.status != status {
                continue;
            }
            let pred = track.filter.predicted_state(t);
            // ‖Λ⁻¹r‖ ≥ ‖r‖/λmax, so a disc test rejects far tracks exactly.
            let reach = self.sqrt_gate * pred.lambda.x.max(pred.lambda.y) + pred.delta.norm();
            if (position - pred.p).norm_squared() > reach * reach {
                continue;
            }
            if mahalanobis_sq_at(&pred, position, sigma) < self.gate {
                hits.push(i);
            }
        }
        hits
    }

    fn associate(&mut self, i: usize, labeled: &LabeledEvent, out: &mut Vec<TrackRecord<T>>) -> Result<(), ManagerError> {
        let event = &labeled.event;
        let smoothing = self.config.manager.interval_smoothing;
        let track = &mut self.tracks[i];
        if track
            .filter
            .correct(event.t, event.position(), event.polarity.value())
            .is_err()
            || !track.filter.state().is_finite()
        {
            self.terminate(i, event.t, TerminationReason::Diverged, out);
            return Ok(());
        }
        let gap_s = (event.t - track.last_event_t) as f64 * 1e-6;
        track.mean_interval_s += smoothing * (gap_s - track.mean_interval_s);
        track.last_event_t = event.t;
        track.event_count += 1;
        let p = track.filter.state().p;
        track
            .patch
            .add_event(event, p)
            .expect("track events arrive in time order");
        track.note_label(labeled.label);
        track.batch_offset += (event.position::<T>() - p).map(|v| v.as_f64());
        track.batch_count += 1;
        if track.batch_count >= self.config.manager.batch_size {
            track.batch_count = 0;
            self.validate_track(i, event.t, out)?;
        }
        Ok(())
    }

    fn validate_track(&mut self, i: usize, t: u64, out: &mut Vec<TrackRecord<T>>) -> Result<(), ManagerError> {
        let labels = std::mem::take(&mut self.tracks[i].batch_labels);
        let offset = std::mem::take(&mut self.tracks[i].batch_offset);
        let positive = match &self.validator {
            Validator::Classifier(model) => {
                self.stats.classifications += 1;
                model.classify(&self.tracks[i].patch.to_classifier_input())?
            }
            Validator::Thresholds => {
                let track = &self.tracks[i];
                self.config
                    .manager
                    .thresholds
                    .accepts(track.filter.state(), track.filter.position_covariance_trace())
            }
            Validator::Harvest => {
                let total: u32 = labels.iter().map(|(_, n)| n).sum();
                if let Some(&(label, n)) = labels.iter().max_by_key(|(l, n)| (*n, std::cmp::Reverse(*l))) {
                    let m = &self.config.manager;
                    // A track sitting beside its object would teach the
                    // classifier that off-centre patches are objects.
                    let centred = label == 0 || (offset / total as f64).norm() <= m.harvest_max_offset;
                    if n as f64 >= m.harvest_min_purity * total as f64 && centred {
                        let track = &self.tracks[i];
                        self.harvested.push(HarvestedPatch {
                            track_id: track.id,
                            t_us: t,
                            label,
                            input: track
                                .patch
                                .to_classifier_input()
                                .iter()
                                .map(|v| v.as_f64())
                                .collect(),
                        });
                    }
                }
                return Ok(());
            }
        };
        let threshold_mode = matches!(self.validator, Validator::Thresholds);
        let track = &mut self.tracks[i];
        track.evaluations.push(positive);
        match track.evaluations.verdict() {
            Verdict::Terminate => self.terminate(i, t, TerminationReason::Rejected, out),
            Verdict::Promote => self.promote(i, t, out),
            Verdict::Continue if threshold_mode && positive => self.promote(i, t, out),
            Verdict::Continue => {}
        }
        Ok(())
    }

    /// Candidate → valid. Valid tracks are left alone.
    fn promote(&mut self, i: usize, t: u64, out: &mut Vec<TrackRecord<T>>) {
        let track = &mut self.tracks[i];
        if track.status == TrackStatus::Valid {
            return;
        }
        track.status = TrackStatus::Valid;
        self.stats.promoted += 1;
        out.push(track.record(t, RecordKind::Promoted));
    }

    fn terminate(&mut self, i: usize, t: u64, reason: TerminationReason, out: &mut Vec<TrackRecord<T>>) {
        let track = self.tracks.remove(i);
        match reason {
            TerminationReason::OffImage => self.stats.terminated_off_image += 1,
            TerminationReason::Stale => self.stats.terminated_stale += 1,
            TerminationReason::Rejected => self.stats.terminated_rejected += 1,
            TerminationReason::Diverged => self.stats.terminated_diverged += 1,
            TerminationReason::Duplicate => self.stats.terminated_duplicate += 1,
        }
        self.lifetimes_us.push(t - track.created_t);
        out.push(track.record(t, RecordKind::Terminated));
    }

    fn detect(&mut self, labeled: &LabeledEvent, out: &mut Vec<TrackRecord<T>>) -> Association {
        let event = &labeled.event;
        let Some(det) = process_unassociated_event(
            event,
            &self.surface,
            &mut self.field,
            &self.config.flowfield,
            &self.config.detector,
        ) else {
            return Association::Unassociated;
        };
        self.stats.detections += 1;
        let m = &self.config.manager;
        if m.detect_only {
            out.push(TrackRecord {
                t_us: event.t,
                track_id: 0,
                kind: RecordKind::Detection,
                state: BlobState {
                    p: det.position,
                    v: det.direction * det.speed,
                    theta: det.direction.y.atan2(det.direction.x),
                    q: T::zero(),
                    lambda: Vector2::zeros(),
                    delta: Vector2::zeros(),
                },
                cov_trace: T::zero(),
                event_count: 0,
            });
            return Association::Detected;
        }
        if m.max_tracks.is_some_and(|cap| self.tracks.len() >= cap) {
            return Association::Detected;
        }
        let r = T::lit(self.config.detector.suppression_radius);
        let sigmas = T::lit(self.config.detector.suppression_sigmas);
        let near = self.tracks.iter().any(|t| {
            let pred = t.filter.predicted_state(event.t);
            let reach = r.max(sigmas * pred.lambda.x.max(pred.lambda.y) + pred.delta.norm());
            (pred.p - det.position).norm_squared() < reach * reach
        });
        if near {
            return Association::Detected;
        }
        let id = self.next_id;
        self.next_id += 1;
        self.stats.spawned += 1;
        let track = Track {
            id,
            status: TrackStatus::Candidate,
            filter: AebFilter::spawn(&det, &self.config.filter),
            patch: IntensityPatch::new(&self.config.patch),
            evaluations: EvaluationBuffer::new(m.evaluation_buffer),
            created_t: event.t,
            last_event_t: event.t,
            event_count: 0,
            batch_count: 0,
            mean_interval_s: m.initial_interval_us * 1e-6,
            batch_labels: Vec::new(),
            batch_offset: Vector2::zeros(),
        };
        out.push(track.record(event.t, RecordKind::Spawned));
        self.tracks.push(track);
        Association::Spawned(id)
    }

    /// Drops tracks that left the image or went quiet. Returns the ids.
    pub fn housekeeping(&mut self, t: u64, out: &mut Vec<TrackRecord<T>>) -> Vec<u64> {
        let margin = T::lit(self.config.manager.edge_margin);
        let (w, h) = (
            T::lit(self.geometry.width as f64 - 1.0),
            T::lit(self.geometry.height as f64 - 1.0),
        );
        let kappa = self.config.manager.kappa;
        let mut dropped = Vec::new();
        let mut i = 0;
        while i < self.tracks.len() {
            let track = &self.tracks[i];
            let p = track.filter.predicted_state(t).p;
            let off = p.x < -margin || p.y < -margin || p.x > w + margin || p.y > h + margin;
            let silent_s = t.saturating_sub(track.last_event_t) as f64 * 1e-6;
            let reason = if off {
                Some(TerminationReason::OffImage)
            } else if silent_s > kappa * track.mean_interval_s {
                Some(TerminationReason::Stale)
            } else {
                None
            };
            match reason {
                Some(r) => {
                    dropped.push(track.id);
                    self.terminate(i, t, r, out);
                }
                None => i += 1,
            }
        }
        if t >= self.next_duplicate_check_t {
            self.next_duplicate_check_t = t + DUPLICATE_CHECK_PERIOD_US;
            while let Some(i) = self.find_duplicate(t) {
                dropped.push(self.tracks[i].id);
                self.terminate(i, t, TerminationReason::Duplicate, out);
            }
        }
        dropped
    }

    /// Index of the weaker track of the first overlapping pair that moves
    /// together. Crossing tracks overlap too but their velocities differ.
    fn find_duplicate(&self, t: u64) -> Option<usize> {
        let tolerance = T::lit(self.config.manager.duplicate_speed_tolerance);
        if tolerance <= T::zero() || self.tracks.len() < 2 {
            return None;
        }
        let floor = T::lit(self.config.detector.s_min);
        let preds: Vec<_> = self.tracks.iter().map(|tr| tr.filter.predicted_state(t)).collect();
        for i in 0..preds.len() {
            for j in i + 1..preds.len() {
                let (a, b) = (&preds[i], &preds[j]);
                let reach = self.sqrt_gate * a.lambda.x.max(b.lambda.x);
                if (a.p - b.p).norm_squared() >= reach * reach {
                    continue;
                }
                let speed = a.v.norm().max(b.v.norm()).max(floor);
                if (a.v - b.v).norm() >= tolerance * speed {
                    continue;
                }
                let rank = |k: usize| {
                    let tr = &self.tracks[k];
                    (tr.status == TrackStatus::Valid, tr.event_count, std::cmp::Reverse(tr.id))
                };
                return Some(if rank(i) >= rank(j) { j } else { i });
            }
        }
        None
    }

    fn emit_samples(&mut self, t: u64, out: &mut Vec<TrackRecord<T>>) {
        let period = self.config.manager.sample_period_us;
        if period == 0 {
            return;
        }
        let next = *self.next_sample_t.get_or_insert((t / period + 1) * period);
        if t < next {
            return;
        }
        // Skip straight to the last boundary when nothing is alive.
        let mut s = if self.tracks.is_empty() { (t / period) * period } else { next };
        while s <= t {
            for track in &self.tracks {
                out.push(track.record(s, track.sample_kind()));
            }
            s += period;
        }
        self.next_sample_t = Some(s);
    }
}

const DUPLICATE_CHECK_PERIOD_US: u64 = 1000;

/// Lifetime histogram bucket edges, ms.
pub const LIFETIME_EDGES_MS: [f64; 7] = [10.0, 50.0, 100.0, 250.0, 500.0, 1000.0, 5000.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stats: PoolStats,
    pub records: u64,
    pub live_tracks_at_end: usize,
    /// Counts per lifetime bucket; bucket k holds lifetimes below edge k,
    /// the last bucket everything longer.
    pub lifetime_edges_ms: Vec<f64>,
    pub lifetime_histogram: Vec<u64>,
    pub wall_clock_s: f64,
    pub events_per_s: f64,
}

fn lifetime_histogram(lifetimes_us: &[u64]) -> Vec<u64> {
    let mut hist = vec![0u64; LIFETIME_EDGES_MS.len() + 1];
    for &l in lifetimes_us {
        let ms = l as f64 * 1e-3;
        let k = LIFETIME_EDGES_MS.iter().position(|&e| ms < e).unwrap_or(LIFETIME_EDGES_MS.len());
        hist[k] += 1;
    }
    hist
}

#[derive(Debug)]
pub struct RunResult {
    pub summary: RunSummary,
    pub harvested: Vec<HarvestedPatch>,
}

/// Runs the pool over a stream, writing track CSV to `out`.
pub fn run<T, I, W>(
    events: I,
    geometry: SensorGeometry,
    config: &TrackerConfig,
    validator: Validator<T>,
    out: &mut W,
) -> Result<RunResult, ManagerError>
where
    T: Real,
    I: IntoIterator<Item = Result<LabeledEvent, EventError>>,
    W: Write,
{
    let started = Instant::now();
    let mut pool = TrackerPool::new(geometry, config.clone(), validator)?;
    writeln!(out, "{TRACK_CSV_HEADER}")?;
    let mut records = Vec::new();
    let mut written = 0u64;
    for event in events {
        pool.process_event(&event?, &mut records)?;
        for r in records.drain(..) {
            r.write_csv(out)?;
            written += 1;
        }
    }
    out.flush()?;
    let wall = started.elapsed().as_secs_f64();
    let stats = pool.stats().clone();
    let summary = RunSummary {
        records: written,
        live_tracks_at_end: pool.tracks().len(),
        lifetime_edges_ms: LIFETIME_EDGES_MS.to_vec(),
        lifetime_histogram: lifetime_histogram(pool.lifetimes_us()),
        wall_clock_s: wall,
        events_per_s: if wall > 0.0 { stats.events as f64 / wall } else { 0.0 },
        stats,
    };
    Ok(RunResult {
        summary,
        harvested: pool.take_harvested(),
    })
}
