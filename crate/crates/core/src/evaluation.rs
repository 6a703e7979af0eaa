//! Pose metrics, cross-validation folds, channel ablation and latency benchmarking.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, LowerBodyPositions, LowerBodyRotations};
use crate::models::{decode_pose, infer_windows, Alignment, ModelConfig, OUTPUT_DIM};
use crate::rotations::{geodesic_angle, rot6d_to_matrix, Rot6D, RotMatrix};
use crate::signal::{
    extract_windows, is_rail, prepare_session, NormalizationStats, ProcessedSession, SensorSession, CHANNEL_NAMES,
};
use crate::signal::{GroundTruthStream, LoadedSession};
use crate::tensor::{ModelGraph, Tensor};
use crate::training::{train_model, Sample, Target, TrainConfig};

/// Nominal sensor frame interval, seconds.
pub const FRAME_DT: f64 = 1.0 / 30.0;

/// Per-joint values plus their mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointMetric {
    pub per_joint: [f64; 4],
    pub mean: f64,
}

impl JointMetric {
    fn new(per_joint: [f64; 4]) -> Self {
        JointMetric {
            per_joint,
            mean: per_joint.iter().sum::<f64>() / 4.0,
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("prediction has {a} frames, reference has {b}")));
    }
    if a == 0 {
        return Err(Error::InsufficientData("no frames to score".into()));
    }
    Ok(())
}

/// Mean geodesic error per rotation joint, degrees.
pub fn mpjae(pred: &[LowerBodyRotations], gt: &[LowerBodyRotations]) -> Result<JointMetric> {
    check_lengths(pred.len(), gt.len())?;
    let mut sum = [0.0; 4];
    for (p, g) in pred.iter().zip(gt) {
        for (j, (a, b)) in p.to_array().iter().zip(g.to_array().iter()).enumerate() {
            sum[j] += geodesic_angle(b, a);
        }
    }
    Ok(JointMetric::new(sum.map(|s| (s / pred.len() as f64).to_degrees())))
}

/// Mean Euclidean error per position joint, centimetres.
pub fn mpjpe(pred: &[LowerBodyPositions], gt: &[LowerBodyPositions]) -> Result<JointMetric> {
    check_lengths(pred.len(), gt.len())?;
    let mut sum = [0.0; 4];
    for (p, g) in pred.iter().zip(gt) {
        for (j, (a, b)) in p.to_array().iter().zip(g.to_array().iter()).enumerate() {
            sum[j] += (a - b).norm();
        }
    }
    Ok(JointMetric::new(sum.map(|s| 100.0 * s / pred.len() as f64)))
}

/// Third-difference jerk magnitudes summed per joint, and the number of terms.
fn jerk_sums(p: &[LowerBodyPositions], dt: f64) -> ([f64; 4], usize) {
    let mut sum = [0.0; 4];
    let mut n = 0;
    let dt3 = dt * dt * dt;
    for w in p.windows(4) {
        let [a, b, c, d] = [w[0].to_array(), w[1].to_array(), w[2].to_array(), w[3].to_array()];
        for j in 0..4 {
            sum[j] += ((d[j] - a[j] - (c[j] - b[j]) * 3.0) / dt3).norm();
        }
        n += 1;
    }
    (sum, n)
}

/// Mean jerk magnitude per position joint (m/s³) over a uniformly sampled stream.
pub fn jitter(positions: &[LowerBodyPositions], dt: f64) -> Result<JointMetric> {
    jitter_runs(&[positions], dt)
}

/// Jitter pooled over several contiguous runs; runs shorter than 4 frames contribute nothing.
pub fn jitter_runs(runs: &[&[LowerBodyPositions]], dt: f64) -> Result<JointMetric> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    let mut sum = [0.0; 4];
    let mut n = 0;
    for r in runs {
        let (s, k) = jerk_sums(r, dt);
        for j in 0..4 {
            sum[j] += s[j];
        }
        n += k;
    }
    if n == 0 {
        return Err(Error::InsufficientData(
            "jitter needs at least 4 consecutive frames".into(),
        ));
    }
    Ok(JointMetric::new(sum.map(|s| s / n as f64)))
}

/// Jitter of a timestamped stream; rejects spacing that strays more than 5 % from the median.
pub fn jitter_timed(positions: &[LowerBodyPositions], timestamps_us: &[i64]) -> Result<JointMetric> {
    check_lengths(positions.len(), timestamps_us.len())?;
    if positions.len() < 4 {
        return Err(Error::InsufficientData("jitter needs at least 4 frames".into()));
    }
    let mut gaps: Vec<i64> = timestamps_us.windows(2).map(|w| w[1] - w[0]).collect();
    let mut sorted = gaps.clone();
    sorted.sort_unstable();
    let median = sorted[sorted.len() / 2] as f64;
    if median <= 0.0 || gaps.iter_mut().any(|g| (*g as f64 - median).abs() > 0.05 * median) {
        return Err(Error::InvalidArgument(
            "timestamps are not uniformly spaced within 5 %".into(),
        ));
    }
    jitter(positions, median * 1e-6)
}

/// Per-joint chordal mean rotation: average the 6D vectors, then Gram–Schmidt.
pub fn mean_pose_baseline(targets: &[[f64; OUTPUT_DIM]]) -> Result<[RotMatrix; 4]> {
    if targets.is_empty() {
        return Err(Error::InsufficientData("no training targets for the mean pose".into()));
    }
    let mut mean = [0.0; OUTPUT_DIM];
    for t in targets {
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v;
        }
    }
    let inv = 1.0 / targets.len() as f64;
    let mut out = [RotMatrix::identity(); 4];
    for (j, o) in out.iter_mut().enumerate() {
        let mut r = [0.0; 6];
        for (d, m) in r.iter_mut().zip(&mean[6 * j..6 * j + 6]) {
            *d = m * inv;
        }
        *o = rot6d_to_matrix(&Rot6D(r))?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "LOPO")]
    Lopo,
    #[serde(rename = "LOEO")]
    Loeo,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Lopo => "LOPO",
            Protocol::Loeo => "LOEO",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lopo" => Ok(Protocol::Lopo),
            "loeo" => Ok(Protocol::Loeo),
            _ => Err(Error::InvalidArgument(format!(
                "unknown protocol {s:?} (expected lopo or loeo)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeldOut {
    Participant(String),
    Movement(u32),
}

impl fmt::Display for HeldOut {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeldOut::Participant(p) => write!(f, "{p}"),
            HeldOut::Movement(m) => write!(f, "movement {m}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold_id: usize,
    pub protocol: Protocol,
    pub held_out: HeldOut,
    /// Session indices contributing training windows.
    pub train_sessions: Vec<usize>,
    /// Session indices contributing test windows.
    pub test_sessions: Vec<usize>,
}

/// Minimal view of a session needed to plan folds.
pub trait FoldSource {
    fn participant(&self) -> &str;
    /// Activity frame ranges labelled with their movement id.
    fn activities(&self) -> Vec<(u32, std::ops::Range<usize>)>;
}

impl FoldSource for ProcessedSession {
    fn participant(&self) -> &str {
        &self.participant_id
    }

    fn activities(&self) -> Vec<(u32, std::ops::Range<usize>)> {
        self.segments
            .iter()
            .map(|s| (s.movement_id, s.activity.clone()))
            .collect()
    }
}

/// One fold per participant (LOPO) or per movement id (LOEO), in sorted order.
pub fn make_folds<S: FoldSource>(sessions: &[S], protocol: Protocol) -> Result<Vec<FoldSpec>> {
    let all: Vec<usize> = (0..sessions.len()).collect();
    match protocol {
        Protocol::Lopo => {
            let ids: BTreeSet<&str> = sessions.iter().map(|s| s.participant()).collect();
            if ids.len() < 2 {
                return Err(Error::InsufficientData("LOPO needs at least 2 participants".into()));
            }
            Ok(ids
                .into_iter()
                .enumerate()
                .map(|(fold_id, p)| {
                    let (test, train): (Vec<usize>, Vec<usize>) =
                        all.iter().partition(|&&i| sessions[i].participant() == p);
                    FoldSpec {
                        fold_id,
                        protocol,
                        held_out: HeldOut::Participant(p.to_string()),
                        train_sessions: train,
                        test_sessions: test,
                    }
                })
                .collect())
        }
        Protocol::Loeo => {
            let ids: BTreeSet<u32> = sessions.iter().flat_map(|s| s.activities()).map(|(m, _)| m).collect();
            if ids.len() < 2 {
                return Err(Error::InsufficientData("LOEO needs at least 2 movements".into()));
            }
            Ok(ids
                .into_iter()
                .enumerate()
                .map(|(fold_id, m)| FoldSpec {
                    fold_id,
                    protocol,
                    held_out: HeldOut::Movement(m),
                    train_sessions: all.clone(),
                    test_sessions: all
                        .iter()
                        .copied()
                        .filter(|&i| sessions[i].activities().iter().any(|(id, _)| *id == m))
                        .collect(),
                })
                .collect())
        }
    }
}

/// A window identified by session index and start frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowId {
    pub session: usize,
    pub start: usize,
}

fn held_out_ranges<S: FoldSource>(s: &S, fold: &FoldSpec) -> Vec<std::ops::Range<usize>> {
    match &fold.held_out {
        HeldOut::Movement(m) => s
            .activities()
            .into_iter()
            .filter(|(id, _)| id == m)
            .map(|(_, r)| r)
            .collect(),
        HeldOut::Participant(p) => {
            if s.participant() == p {
                vec![0..usize::MAX]
            } else {
                Vec::new()
            }
        }
    }
}

fn overlaps(start: usize, n: usize, r: &std::ops::Range<usize>) -> bool {
    start < r.end && r.start < start + n
}

/// Clean train and test windows of a fold. Training windows never touch
/// held-out frames; LOEO test windows lie entirely inside a held-out activity.
pub fn fold_windows(
    sessions: &[ProcessedSession],
    fold: &FoldSpec,
    window_len: usize,
    train_stride: usize,
    test_stride: usize,
) -> Result<(Vec<WindowId>, Vec<WindowId>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for &si in &fold.train_sessions {
        let s = &sessions[si];
        if s.len() < window_len {
            continue;
        }
        let held = held_out_ranges(s, fold);
        for start in extract_windows(&s.frame_ok, window_len, train_stride)?.kept {
            if !held.iter().any(|r| overlaps(start, window_len, r)) {
                train.push(WindowId { session: si, start });
            }
        }
    }
    for &si in &fold.test_sessions {
        let s = &sessions[si];
        if s.len() < window_len {
            continue;
        }
        let held = held_out_ranges(s, fold);
        for start in extract_windows(&s.frame_ok, window_len, test_stride)?.kept {
            if held.iter().any(|r| r.start <= start && start + window_len <= r.end) {
                test.push(WindowId { session: si, start });
            }
        }
    }
    Ok((train, test))
}

/// True when no training window shares a participant (LOPO) or a held-out frame (LOEO) with the test side.
pub fn check_leakage<S: FoldSource>(
    sessions: &[S],
    fold: &FoldSpec,
    train: &[WindowId],
    test: &[WindowId],
    window_len: usize,
) -> bool {
    match &fold.held_out {
        HeldOut::Participant(p) => {
            let test_ok = test.iter().all(|w| sessions[w.session].participant() == p);
            let train_ok = train.iter().all(|w| sessions[w.session].participant() != p);
            test_ok && train_ok
        }
        HeldOut::Movement(_) => {
            let train_ok = train.iter().all(|w| {
                !held_out_ranges(&sessions[w.session], fold)
                    .iter()
                    .any(|r| overlaps(w.start, window_len, r))
            });
            let test_ok = test.iter().all(|w| {
                held_out_ranges(&sessions[w.session], fold)
                    .iter()
                    .any(|r| r.start <= w.start && w.start + window_len <= r.end)
            });
            train_ok && test_ok
        }
    }
}

/// Global min/max over the frames a fold may train on.
pub fn fold_minmax(
    raw: &[&SensorSession],
    fold: &FoldSpec,
    activities: &[Vec<(u32, std::ops::Range<usize>)>],
) -> Result<NormalizationStats> {
    let mut lo = u32::MAX;
    let mut hi = 0u32;
    for &si in &fold.train_sessions {
        let s = raw[si];
        if let HeldOut::Participant(p) = &fold.held_out {
            if &s.meta.participant_id == p {
                continue;
            }
        }
        let held: Vec<std::ops::Range<usize>> = match &fold.held_out {
            HeldOut::Movement(m) => activities[si]
                .iter()
                .filter(|(id, _)| id == m)
                .map(|(_, r)| r.clone())
                .collect(),
            HeldOut::Participant(_) => Vec::new(),
        };
        for t in (0..s.len()).filter(|t| !held.iter().any(|r| r.contains(t))) {
            for &c in s.frame(t).iter().filter(|&&c| !is_rail(c)) {
                lo = lo.min(c);
                hi = hi.max(c);
            }
        }
    }
    if hi <= lo {
        return Err(Error::InsufficientData("training frames give no code range".into()));
    }
    Ok(NormalizationStats {
        a_min: lo as f64,
        a_max: hi as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fold_id: usize,
    pub protocol: Protocol,
    pub held_out: String,
    /// Channel pair zeroed in this arm, or "none".
    pub ablation_mask: String,
    /// Model or baseline name.
    pub predictor: String,
    /// Rotation joints: left hip, right hip, left knee, right knee.
    pub mpjae_deg: JointMetric,
    /// Position joints: left knee, right knee, left ankle, right ankle.
    pub mpjpe_cm: JointMetric,
    /// Same joints as `mpjpe_cm`; `None` when no stride-1 run reaches 4 windows.
    pub jitter: Option<JointMetric>,
    pub n_windows: usize,
}

/// Scores pose predictions for the given test windows.
#[allow(clippy::too_many_arguments)]
fn score(
    sessions: &[ProcessedSession],
    test: &[WindowId],
    pred: &[(LowerBodyRotations, LowerBodyPositions)],
    window_len: usize,
    alignment: Alignment,
) -> Result<(JointMetric, JointMetric, Option<JointMetric>)> {
    let mut gt_r = Vec::with_capacity(test.len());
    let mut gt_p = Vec::with_capacity(test.len());
    for w in test {
        let s = &sessions[w.session];
        let q = s
            .targets
            .as_ref()
            .ok_or_else(|| Error::InsufficientData("test session lacks ground truth".into()))?
            [w.start + alignment.offset(window_len)];
        gt_p.push(forward_kinematics(&s.template, &q));
        gt_r.push(q);
    }
    let pr: Vec<LowerBodyRotations> = pred.iter().map(|p| p.0).collect();
    let pp: Vec<LowerBodyPositions> = pred.iter().map(|p| p.1).collect();
    let ae = mpjae(&pr, &gt_r)?;
    let pe = mpjpe(&pp, &gt_p)?;

    // Stride-1 runs: consecutive starts within one session.
    let mut runs: Vec<&[LowerBodyPositions]> = Vec::new();
    let mut begin = 0;
    for i in 1..=test.len() {
        let breaks =
            i == test.len() || test[i].session != test[i - 1].session || test[i].start != test[i - 1].start + 1;
        if breaks {
            runs.push(&pp[begin..i]);
            begin = i;
        }
    }
    let jit = jitter_runs(&runs, FRAME_DT).ok();
    Ok((ae, pe, jit))
}

fn make_samples(
    sessions: &[ProcessedSession],
    ids: &[WindowId],
    window_len: usize,
    alignment: Alignment,
) -> Result<Vec<Sample>> {
    ids.iter()
        .map(|w| {
            let s = &sessions[w.session];
            let targets = s
                .targets
                .as_ref()
                .ok_or_else(|| Error::InsufficientData("session lacks ground truth".into()))?;
            let mut x = vec![0.0; window_len * s.n_channels];
            crate::models::window_input(&s.values, s.n_channels, w.start, window_len, &mut x);
            Ok(Sample {
                session: w.session,
                start: w.start,
                x,
                target: Target::new(&targets[w.start + alignment.offset(window_len)], &s.template),
            })
        })
        .collect()
}

/// Settings shared by every fold of an evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub test_stride: usize,
    /// Scale with min/max over every session, test frames included. Off by
    /// default because it leaks the test range into training.
    pub global_minmax: bool,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub model: MetricsReport,
    pub baseline: MetricsReport,
    pub n_train: usize,
    pub leakage_free: bool,
    pub history: Vec<crate::training::EpochRecord>,
}

/// Per-session activity ranges from the metadata schedule.
fn schedule_activities(s: &SensorSession) -> Result<Vec<(u32, std::ops::Range<usize>)>> {
    if s.meta.schedule.is_empty() {
        return Ok(Vec::new());
    }
    Ok(crate::signal::segment_from_schedule(s, &s.meta.schedule)?
        .into_iter()
        .map(|g| (g.movement_id, g.activity))
        .collect())
}

struct RawView<'a> {
    s: &'a SensorSession,
    acts: Vec<(u32, std::ops::Range<usize>)>,
}

impl FoldSource for RawView<'_> {
    fn participant(&self) -> &str {
        &self.s.meta.participant_id
    }

    fn activities(&self) -> Vec<(u32, std::ops::Range<usize>)> {
        self.acts.clone()
    }
}

/// Plans folds directly from raw sessions.
pub fn plan_folds(raw: &[LoadedSession], protocol: Protocol) -> Result<Vec<FoldSpec>> {
    let views = raw
        .iter()
        .map(|l| {
            Ok(RawView {
                s: &l.sensor,
                acts: schedule_activities(&l.sensor)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    make_folds(&views, protocol)
}

/// Trains on one fold and scores both the model and the mean-pose baseline.
pub fn run_fold(
    raw: &[LoadedSession],
    fold: &FoldSpec,
    cfg: &EvalConfig,
    ablate: Option<usize>,
) -> Result<FoldOutcome> {
    let sensors: Vec<&SensorSession> = raw.iter().map(|l| &l.sensor).collect();
    let acts = sensors
        .iter()
        .map(|s| schedule_activities(s))
        .collect::<Result<Vec<_>>>()?;
    let stats = if cfg.global_minmax {
        crate::signal::compute_minmax(sensors.iter().copied())?
    } else {
        fold_minmax(&sensors, fold, &acts)?
    };
    let mut sessions = raw
        .iter()
        .map(|l| prepare_session(&l.sensor, l.gt.as_ref(), &stats))
        .collect::<Result<Vec<_>>>()?;
    if let Some(k) = ablate {
        if k >= sessions.first().map_or(0, |s| s.n_channels / 2) {
            return Err(Error::InvalidArgument(format!("no channel pair {k}")));
        }
        sessions.iter_mut().for_each(|s| s.mask_channel_pair(k));
    }
    let n = cfg.model.window_len;
    let align = cfg.model.alignment;
    let (train_ids, test_ids) = fold_windows(&sessions, fold, n, cfg.train.stride, cfg.test_stride)?;
    if test_ids.is_empty() {
        return Err(Error::InsufficientData(format!(
            "fold {} has no clean test windows",
            fold.fold_id
        )));
    }
    let leakage_free = check_leakage(&sessions, fold, &train_ids, &test_ids, n);
    let samples = make_samples(&sessions, &train_ids, n, align)?;
    let train_cfg = TrainConfig {
        seed: cfg.train.seed.wrapping_add(fold.fold_id as u64),
        ..cfg.train.clone()
    };
    let (g, report) = train_model(&cfg.model, &samples, &train_cfg)?;

    let preds = predict_ids(&g, &sessions, &test_ids, n, align)?;
    let targets: Vec<[f64; OUTPUT_DIM]> = samples.iter().map(|s| s.target.rot6d).collect();
    let mean = LowerBodyRotations::from_array(mean_pose_baseline(&targets)?);
    let base_preds: Vec<_> = test_ids
        .iter()
        .map(|w| (mean, forward_kinematics(&sessions[w.session].template, &mean)))
        .collect();

    let mask = ablate.map_or_else(|| "none".to_string(), |k| CHANNEL_NAMES[k].to_string());
    let report_for = |predictor: &str, p: &[(LowerBodyRotations, LowerBodyPositions)]| -> Result<MetricsReport> {
        let (ae, pe, jit) = score(&sessions, &test_ids, p, n, align)?;
        Ok(MetricsReport {
            fold_id: fold.fold_id,
            protocol: fold.protocol,
            held_out: fold.held_out.to_string(),
            ablation_mask: mask.clone(),
            predictor: predictor.to_string(),
            mpjae_deg: ae,
            mpjpe_cm: pe,
            jitter: jit,
            n_windows: test_ids.len(),
        })
    };
    Ok(FoldOutcome {
        model: report_for(&format!("{:?}", cfg.model.kind).to_lowercase(), &preds)?,
        baseline: report_for("mean_pose", &base_preds)?,
        n_train: samples.len(),
        leakage_free,
        history: report.history,
    })
}

fn predict_ids(
    g: &ModelGraph<f32>,
    sessions: &[ProcessedSession],
    ids: &[WindowId],
    window_len: usize,
    alignment: Alignment,
) -> Result<Vec<(LowerBodyRotations, LowerBodyPositions)>> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        let si = ids[i].session;
        let j = ids[i..]
            .iter()
            .position(|w| w.session != si)
            .map_or(ids.len(), |k| i + k);
        let s = &sessions[si];
        let starts: Vec<usize> = ids[i..j].iter().map(|w| w.start).collect();
        for (o, &st) in infer_windows(g, &s.values, s.n_channels, &starts)?.iter().zip(&starts) {
            let p = decode_pose(o, &s.template, s.timestamps[st + alignment.offset(window_len)])?;
            out.push((p.rotations, p.positions));
        }
        i = j;
    }
    Ok(out)
}

/// Runs `f` over `items` on up to `jobs` threads, preserving order.
pub fn parallel_map<I: Sync, O: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<O>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let o = f(&items[i]);
                results.lock().unwrap()[i] = Some(o);
            });
        }
    });
    slots.into_iter().map(|o| o.expect("every item processed")).collect()
}

/// Every fold of `protocol`, optionally with one channel pair zeroed.
pub fn run_protocol(
    raw: &[LoadedSession],
    protocol: Protocol,
    cfg: &EvalConfig,
    ablate: Option<usize>,
    jobs: usize,
) -> Result<Vec<FoldOutcome>> {
    let folds = plan_folds(raw, protocol)?;
    parallel_map(&folds, jobs, |f| run_fold(raw, f, cfg, ablate))
        .into_iter()
        .collect()
}

pub fn channel_pair_index(name: &str) -> Result<usize> {
    CHANNEL_NAMES
        .iter()
        .position(|c| c.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::InvalidArgument(format!("unknown channel {name:?}; expected one of {CHANNEL_NAMES:?}")))
}

/// LOPO runs with no mask and then with each requested pair zeroed.
pub fn ablation_run(
    raw: &[LoadedSession],
    pairs: &[&str],
    cfg: &EvalConfig,
    jobs: usize,
) -> Result<Vec<(String, Vec<FoldOutcome>)>> {
    let idx = pairs
        .iter()
        .map(|p| channel_pair_index(p))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![("none".to_string(), run_protocol(raw, Protocol::Lopo, cfg, None, jobs)?)];
    for k in idx {
        out.push((
            CHANNEL_NAMES[k].to_string(),
            run_protocol(raw, Protocol::Lopo, cfg, Some(k), jobs)?,
        ));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub iterations: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub windows_per_s: f64,
}

pub const BENCH_WARMUP: usize = 10;

/// Single-window infer latency after [`BENCH_WARMUP`] untimed runs.
pub fn bench_latency(g: &ModelGraph<f32>, iterations: usize) -> Result<LatencyStats> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be positive".into()));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(g.input_shape());
    let len: usize = shape.iter().product();
    let x = Tensor::new(
        shape,
        (0..len).map(|i| ((i * 7919) % 1000) as f32 * 1e-3 - 0.5).collect(),
    )?;
    for _ in 0..BENCH_WARMUP {
        std::hint::black_box(g.infer(&x)?);
    }
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        std::hint::black_box(g.infer(&x)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / iterations as f64;
    let std = if iterations > 1 {
        (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (iterations - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(LatencyStats {
        iterations,
        mean_ms: mean,
        std_ms: std,
        windows_per_s: 1e3 / mean,
    })
}

const ROT_JOINTS: [&str; 4] = ["left_hip", "right_hip", "left_knee", "right_knee"];
const POS_JOINTS: [&str; 4] = ["left_knee", "right_knee", "left_ankle", "right_ankle"];

/// `fold_id,protocol,ablation_mask,joint,mpjpe_cm,mpjae_deg,jitter,n_windows`, one row per joint
/// plus a `mean` row; cells that do not apply to a joint are left empty.
pub fn write_reports_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::format(path.display().to_string(), e))?;
    let err = |e: csv::Error| Error::format(path.display().to_string(), e);
    w.write_record([
        "fold_id",
        "protocol",
        "ablation_mask",
        "joint",
        "mpjpe_cm",
        "mpjae_deg",
        "jitter",
        "n_windows",
    ])
    .map_err(err)?;
    let joints = [
        "left_hip",
        "right_hip",
        "left_knee",
        "right_knee",
        "left_ankle",
        "right_ankle",
        "mean",
    ];
    for r in reports {
        for joint in joints {
            let (pe, ae, jit) = if joint == "mean" {
                (Some(r.mpjpe_cm.mean), Some(r.mpjae_deg.mean), r.jitter.map(|j| j.mean))
            } else {
                let p = POS_JOINTS.iter().position(|j| *j == joint);
                let a = ROT_JOINTS.iter().position(|j| *j == joint);
                (
                    p.map(|i| r.mpjpe_cm.per_joint[i]),
                    a.map(|i| r.mpjae_deg.per_joint[i]),
                    p.and_then(|i| r.jitter.map(|j| j.per_joint[i])),
                )
            };
            let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            w.write_record([
                r.fold_id.to_string(),
                r.protocol.to_string(),
                r.ablation_mask.clone(),
                joint.to_string(),
                cell(pe),
                cell(ae),
                cell(jit),
                r.n_windows.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

fn aggregate(v: impl Iterator<Item = f64>) -> Option<Aggregate> {
    let v: Vec<f64> = v.collect();
    if v.is_empty() {
        return None;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Aggregate { mean, std })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub protocol: Protocol,
    pub ablation_mask: String,
    pub predictor: String,
    pub folds: usize,
    pub mpjpe_cm: Option<Aggregate>,
    pub mpjae_deg: Option<Aggregate>,
    pub jitter: Option<Aggregate>,
}

/// Means and standard deviations across folds, grouped by protocol, mask and predictor.
pub fn summarize(reports: &[MetricsReport]) -> Vec<ArmSummary> {
    let mut keys: Vec<(Protocol, String, String)> = reports
        .iter()
        .map(|r| (r.protocol, r.ablation_mask.clone(), r.predictor.clone()))
        .collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(protocol, mask, predictor)| {
            let group: Vec<&MetricsReport> = reports
                .iter()
                .filter(|r| r.protocol == protocol && r.ablation_mask == mask && r.predictor == predictor)
                .collect();
            ArmSummary {
                protocol,
                folds: group.len(),
                mpjpe_cm: aggregate(group.iter().map(|r| r.mpjpe_cm.mean)),
                mpjae_deg: aggregate(group.iter().map(|r| r.mpjae_deg.mean)),
                jitter: aggregate(group.iter().filter_map(|r| r.jitter.map(|j| j.mean))),
                ablation_mask: mask,
                predictor,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    seed: u64,
    summary: Vec<ArmSummary>,
    folds: &'a [MetricsReport],
}

pub fn write_summary_json(path: &Path, reports: &[MetricsReport], seed: u64) -> Result<()> {
    let doc = SummaryFile {
        seed,
        summary: summarize(reports),
        folds: reports,
    };
    let text = serde_json::to_string_pretty(&doc).expect("summary serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Whole-stream predictions for a loaded session, for per-frame export.
pub fn infer_session(
    g: &ModelGraph<f32>,
    session: &LoadedSession,
    stats: &NormalizationStats,
    stride: usize,
    alignment: Alignment,
) -> Result<Vec<crate::models::PosePrediction>> {
    let gt: Option<&GroundTruthStream> = None;
    let p = prepare_session(&session.sensor, gt, stats)?;
    crate::models::predict_stream(g, &p.values, &p.timestamps, &p.template, stride, alignment)
}
