//! Synthetic garment recordings with paired ground truth.

mod motion;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{default_template, forward_kinematics, rescale_to_tibia, SkeletonTemplate};
use crate::rotations::matrix_to_axis_angle;
use crate::signal::{
    default_channel_map, write_session, GroundTruthStream, ScheduleEntry, SensorSession, SessionMeta, CODE_MAX,
    DEFAULT_BASELINE_INTERVAL, REST_S,
};

pub use motion::{
    angles_at, gen_motion, movement_name, JointAngles, Trajectory, IMPLEMENTED_MOVEMENTS, MOTION_RATE_HZ,
};

pub const SENSOR_RATE_HZ: f64 = 30.0;
pub const GT_RATE_HZ: f64 = 29.7;
pub const ACTIVITY_S: f64 = 30.0;
/// Channels per leg produced by the sensor model.
pub const CHANNELS_PER_LEG: usize = 6;
const N_CHANNELS: usize = 2 * CHANNELS_PER_LEG;

/// Nominal gain, codes per unit response (negative: proximity lowers frequency).
pub const GAIN: f64 = -2.0e6;
pub const TAP_AMPLITUDE: f64 = 5.0e6;
pub const TAP_DURATION_S: f64 = 0.1;
/// Tap onsets relative to the start of each rest period, seconds.
pub const TAP_OFFSETS_S: [f64; 3] = [3.0, 4.0, 5.0];
/// Constant timestamp offset of the acquisition clock, µs.
const CLOCK_OFFSET_US: f64 = 2000.0;
const PROXIMITY_SCALE_M: f64 = 0.2;
const DISTANCE_FLOOR_M: f64 = 0.05;

/// Resting code of channel `c`.
pub fn base_code(c: usize) -> f64 {
    (c as f64 + 2.0) * 1e7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    pub participant_id: String,
    pub tibia_length_m: f64,
    /// Share of the knee response picked up by the upper knee patch.
    pub knee_fit: f64,
    /// Per-channel gain multipliers in `[0.9, 1.1]`.
    pub gains: [f64; N_CHANNELS],
    /// Per-channel drift phases, radians.
    pub drift_phases: [f64; N_CHANNELS],
    pub seed: u64,
}

impl SubjectParams {
    /// Draws a subject from the allowed parameter ranges.
    pub fn sample(participant_id: impl Into<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SubjectParams {
            participant_id: participant_id.into(),
            tibia_length_m: rng.random_range(0.34..=0.46),
            knee_fit: rng.random_range(0.3..=0.7),
            gains: std::array::from_fn(|_| rng.random_range(0.9..=1.1)),
            drift_phases: std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU)),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.34..=0.46).contains(&self.tibia_length_m)
            && (0.3..=0.7).contains(&self.knee_fit)
            && self.gains.iter().all(|g| (0.9..=1.1).contains(g));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "subject {} parameters out of range",
                self.participant_id
            )))
        }
    }

    pub fn template(&self) -> SkeletonTemplate {
        rescale_to_tibia(&default_template(), self.tibia_length_m).expect("tibia range checked")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArtifactConfig {
    /// Gaussian noise σ, codes.
    pub noise_sigma: f64,
    pub drift_amplitude: f64,
    pub drift_period_s: f64,
    /// Probability that a frame-channel sample is replaced by a rail code.
    pub dropout_prob: f64,
    /// Per-channel overrides of `dropout_prob`.
    pub channel_dropout: Vec<(usize, f64)>,
    /// Half-width of the uniform timestamp jitter, µs.
    pub timestamp_jitter_us: f64,
}

impl Default for ArtifactConfig {
    fn default() -> Self {
        ArtifactConfig {
            noise_sigma: 2e4,
            drift_amplitude: 1e5,
            drift_period_s: 300.0,
            dropout_prob: 1e-3,
            channel_dropout: Vec::new(),
            timestamp_jitter_us: 2000.0,
        }
    }
}

impl ArtifactConfig {
    pub fn none() -> Self {
        ArtifactConfig {
            noise_sigma: 0.0,
            drift_amplitude: 0.0,
            drift_period_s: 300.0,
            dropout_prob: 0.0,
            channel_dropout: Vec::new(),
            timestamp_jitter_us: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs_ok = (0.0..=1.0).contains(&self.dropout_prob)
            && self
                .channel_dropout
                .iter()
                .all(|&(c, p)| c < N_CHANNELS && (0.0..=1.0).contains(&p));
        if self.noise_sigma < 0.0
            || self.drift_amplitude < 0.0
            || self.drift_period_s <= 0.0
            || self.timestamp_jitter_us < 0.0
            || self.timestamp_jitter_us * 2.0 >= 1e6 / SENSOR_RATE_HZ
            || !probs_ok
        {
            return Err(Error::InvalidArgument("artifact settings out of range".into()));
        }
        Ok(())
    }

    fn dropout_for(&self, c: usize) -> f64 {
        self.channel_dropout
            .iter()
            .rev()
            .find(|&&(ch, _)| ch == c)
            .map_or(self.dropout_prob, |&(_, p)| p)
    }
}

/// Knee-to-knee and ankle-to-ankle distances, floored at 5 cm.
pub fn leg_distances(template: &SkeletonTemplate, a: &JointAngles) -> (f64, f64) {
    let p = forward_kinematics(template, &a.rotations());
    (
        (p.left_knee - p.right_knee).norm().max(DISTANCE_FLOOR_M),
        (p.left_ankle - p.right_ankle).norm().max(DISTANCE_FLOOR_M),
    )
}

/// Unit-free response of every channel, relative to standing (zero at rest).
///
/// Order: left `[FrontHip, SideHip, Groin, KneeUp, KneeDown, Ankle]`, then right.
pub fn responses(subject: &SubjectParams, a: &JointAngles) -> [f64; N_CHANNELS] {
    let template = subject.template();
    let proximity = |d: f64| (-d / PROXIMITY_SCALE_M).exp();
    let (d_knees, d_ankles) = leg_distances(&template, a);
    let (d0_knees, d0_ankles) = leg_distances(&template, &JointAngles::default());
    let groin = proximity(d_knees) - proximity(d0_knees);
    let ankles = proximity(d_ankles) - proximity(d0_ankles);
    let alpha = subject.knee_fit;
    let mut s = [0.0; N_CHANNELS];
    for leg in 0..2 {
        let o = leg * CHANNELS_PER_LEG;
        let k = a.knee[leg].tanh();
        s[o] = a.hip_flex[leg].tanh();
        s[o + 1] = a.hip_abd[leg].tanh() + 0.2 * a.hip_rot[leg].sin();
        s[o + 2] = groin;
        s[o + 3] = alpha * k;
        s[o + 4] = (1.0 - alpha) * k;
        s[o + 5] = 0.6 * k + 0.4 * ankles;
    }
    s
}

/// Builds the standard schedule: 5 s baseline, then 30 s activity + 10 s rest per movement.
pub fn standard_schedule(movements: &[u32]) -> Vec<ScheduleEntry> {
    movements
        .iter()
        .enumerate()
        .map(|(i, &m)| ScheduleEntry {
            movement_id: m,
            start_s: DEFAULT_BASELINE_INTERVAL[1] + i as f64 * (ACTIVITY_S + REST_S),
            duration_s: ACTIVITY_S,
        })
        .collect()
}

/// End of the last rest period, seconds.
pub fn schedule_end(schedule: &[ScheduleEntry]) -> f64 {
    schedule
        .iter()
        .map(|e| e.start_s + e.duration_s + REST_S)
        .fold(DEFAULT_BASELINE_INTERVAL[1], f64::max)
}

/// Whole-session joint angles: standing except during scheduled activities.
pub fn session_trajectory(schedule: &[ScheduleEntry]) -> Result<Trajectory> {
    let end = schedule_end(schedule);
    let n = (end * MOTION_RATE_HZ).round() as usize + 1;
    let mut frames = vec![JointAngles::default(); n];
    for e in schedule {
        let first = (e.start_s * MOTION_RATE_HZ).ceil() as usize;
        let last = ((e.start_s + e.duration_s) * MOTION_RATE_HZ).floor() as usize;
        for (i, f) in frames.iter_mut().enumerate().take(last.min(n - 1) + 1).skip(first) {
            *f = angles_at(e.movement_id, i as f64 / MOTION_RATE_HZ - e.start_s, e.duration_s)?;
        }
    }
    Ok(Trajectory {
        rate_hz: MOTION_RATE_HZ,
        frames,
    })
}

/// Converts a trajectory into raw frequency codes at the sensor rate.
pub fn sensor_model(
    trajectory: &Trajectory,
    subject: &SubjectParams,
    schedule: &[ScheduleEntry],
    artifacts: &ArtifactConfig,
    seed: u64,
) -> Result<SensorSession> {
    subject.validate()?;
    artifacts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, artifacts.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let duration = trajectory.duration_s();
    let period_us = 1e6 / SENSOR_RATE_HZ;
    let n_frames =
        ((duration * 1e6 - CLOCK_OFFSET_US - artifacts.timestamp_jitter_us) / period_us).floor() as usize + 1;

    let taps: Vec<(f64, f64)> = schedule
        .iter()
        .flat_map(|e| {
            let rest = e.start_s + e.duration_s;
            TAP_OFFSETS_S.map(|o| (rest + o, rest + o + TAP_DURATION_S))
        })
        .collect();
    let tap_channel = CHANNELS_PER_LEG;

    let mut timestamps = Vec::with_capacity(n_frames);
    let mut codes = Vec::with_capacity(n_frames * N_CHANNELS);
    for i in 0..n_frames {
        let jitter = if artifacts.timestamp_jitter_us > 0.0 {
            rng.random_range(-artifacts.timestamp_jitter_us..=artifacts.timestamp_jitter_us)
        } else {
            0.0
        };
        let ts = (i as f64 * period_us + CLOCK_OFFSET_US + jitter).round() as i64;
        let t = ts as f64 * 1e-6;
        timestamps.push(ts);
        let s = responses(subject, &trajectory.at(t));
        for c in 0..N_CHANNELS {
            let drift = artifacts.drift_amplitude
                * (std::f64::consts::TAU * t / artifacts.drift_period_s + subject.drift_phases[c]).sin();
            let n = if artifacts.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            let mut code = base_code(c) + GAIN * subject.gains[c] * s[c] + drift + n;
            if c == tap_channel && taps.iter().any(|&(a, b)| t >= a && t < b) {
                code += TAP_AMPLITUDE;
            }
            let p = artifacts.dropout_for(c);
            let code = if p > 0.0 && rng.random::<f64>() < p {
                if rng.random::<bool>() {
                    0
                } else {
                    CODE_MAX
                }
            } else {
                code.round().clamp(1.0, (CODE_MAX - 1) as f64) as u32
            };
            codes.push(code);
        }
    }
    Ok(SensorSession {
        meta: SessionMeta {
            participant_id: subject.participant_id.clone(),
            tibia_length_m: subject.tibia_length_m,
            seed,
            baseline_interval: DEFAULT_BASELINE_INTERVAL,
            schedule: schedule.to_vec(),
            channel_map: default_channel_map(CHANNELS_PER_LEG),
            subject: Some(serde_json::to_value(subject).expect("subject serializes")),
        },
        seq: (0..n_frames as u64).collect(),
        timestamps,
        codes,
        n_channels: N_CHANNELS,
    })
}

/// Ground truth sampled at [`GT_RATE_HZ`] from the generating trajectory.
pub fn ground_truth(trajectory: &Trajectory) -> Result<GroundTruthStream> {
    let period = 1.0 / GT_RATE_HZ;
    // One extra frame so the stream brackets every sensor timestamp.
    let n = (trajectory.duration_s() / period).floor() as usize + 2;
    let mut timestamps = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    for j in 0..n {
        let t = j as f64 * period;
        let r = trajectory.at(t).rotations().to_array();
        let mut pose = [crate::rotations::Vec3::zeros(); 4];
        for (p, m) in pose.iter_mut().zip(r.iter()) {
            *p = matrix_to_axis_angle(m)?.0;
        }
        timestamps.push((t * 1e6).round() as i64);
        poses.push(pose);
    }
    Ok(GroundTruthStream { timestamps, poses })
}

/// A complete synthetic recording for one subject.
pub fn simulate_session(
    subject: &SubjectParams,
    schedule: &[ScheduleEntry],
    artifacts: &ArtifactConfig,
    seed: u64,
) -> Result<(SensorSession, GroundTruthStream)> {
    if schedule.is_empty() {
        return Err(Error::InvalidArgument("schedule must not be empty".into()));
    }
    let traj = session_trajectory(schedule)?;
    let sensor = sensor_model(&traj, subject, schedule, artifacts, seed)?;
    let gt = ground_truth(&traj)?;
    Ok((sensor, gt))
}

/// Simulates a session and writes `meta.json`, `sensor.csv` and `gt.csv` into `dir`.
pub fn gen_session(
    dir: &Path,
    subject: &SubjectParams,
    schedule: &[ScheduleEntry],
    artifacts: &ArtifactConfig,
    seed: u64,
) -> Result<(SensorSession, GroundTruthStream)> {
    let (sensor, gt) = simulate_session(subject, schedule, artifacts, seed)?;
    write_session(dir, &sensor, &gt)?;
    Ok((sensor, gt))
}

/// Seed of subject `index` within a dataset.
pub fn subject_seed(dataset_seed: u64, index: usize) -> u64 {
    dataset_seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub subjects: usize,
    pub movements: Vec<u32>,
    pub artifacts: ArtifactConfig,
    pub sessions: Vec<String>,
}

/// Writes one session per subject under `out` (`P01`, `P02`, …) plus `manifest.json`.
pub fn gen_dataset(
    out: &Path,
    n_subjects: usize,
    movements: &[u32],
    artifacts: &ArtifactConfig,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    if n_subjects == 0 {
        return Err(Error::InvalidArgument("at least one subject is required".into()));
    }
    if movements.is_empty() {
        return Err(Error::InvalidArgument("at least one movement is required".into()));
    }
    if let Some(m) = movements.iter().find(|m| !IMPLEMENTED_MOVEMENTS.contains(m)) {
        return Err(Error::InvalidArgument(format!("movement {m} has no generator")));
    }
    artifacts.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let schedule = standard_schedule(movements);
    let mut dirs = Vec::with_capacity(n_subjects);
    for i in 0..n_subjects {
        let s = subject_seed(seed, i);
        let subject = SubjectParams::sample(format!("P{:02}", i + 1), s);
        let dir = out.join(&subject.participant_id);
        gen_session(&dir, &subject, &schedule, artifacts, s)?;
        dirs.push(dir);
    }
    let manifest = DatasetManifest {
        seed,
        subjects: n_subjects,
        movements: movements.to_vec(),
        artifacts: artifacts.clone(),
        sessions: dirs
            .iter()
            .map(|d| d.file_name().unwrap().to_string_lossy().into_owned())
            .collect(),
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(dirs)
}
