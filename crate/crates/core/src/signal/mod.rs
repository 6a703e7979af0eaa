//! Session files and the preprocessing chain from raw frequency codes to
//! model-ready windows.

mod io;
mod preprocess;
mod segment;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::kinematics::{forward_kinematics, LowerBodyPositions, LowerBodyRotations, SkeletonTemplate};
use crate::rotations::{matrix_to_rot6d, Rot6D, Vec3};

pub use io::{
    list_sessions, load_dataset, read_gt_csv, read_meta, read_sensor_csv, read_session, write_gt_csv, write_meta,
    write_sensor_csv, write_session, LoadedSession,
};
pub use preprocess::{
    compute_minmax, extract_windows, interpolate_gt, is_rail, normalize, prepare_session, subtract_baseline,
    window_count, WindowSplit,
};
pub use segment::{
    detect_taps, segment_from_schedule, segment_from_taps, segment_movements, Segment, SegmentSource, TAP_MIN_AMPLITUDE,
};

/// Largest raw code (28-bit converter). `0` and this value are rail codes.
pub const CODE_MAX: u32 = (1 << 28) - 1;

/// Per-leg channel names in file order.
pub const CHANNEL_NAMES: [&str; 6] = ["FrontHip", "SideHip", "Groin", "KneeUp", "KneeDown", "Ankle"];

/// Length of the rest period that follows every activity, seconds.
pub const REST_S: f64 = 10.0;

/// Default standing-still interval at the start of each session, seconds.
pub const DEFAULT_BASELINE_INTERVAL: [f64; 2] = [0.0, 5.0];

/// `"FrontHip_L"`-style key for channel `k` of a leg.
pub fn channel_key(k: usize, right: bool) -> String {
    format!("{}_{}", CHANNEL_NAMES[k], if right { "R" } else { "L" })
}

/// Default name→column map for `k` channels per leg (left leg first).
pub fn default_channel_map(k: usize) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for leg in 0..2 {
        for c in 0..k {
            m.insert(channel_key(c, leg == 1), leg * k + c);
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub movement_id: u32,
    pub start_s: f64,
    pub duration_s: f64,
}

/// Contents of `meta.json`. Times are seconds from timestamp zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub participant_id: String,
    pub tibia_length_m: f64,
    pub seed: u64,
    pub baseline_interval: [f64; 2],
    pub schedule: Vec<ScheduleEntry>,
    pub channel_map: BTreeMap<String, usize>,
    /// Generator parameters when the session is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<serde_json::Value>,
}

/// Raw frames of one recording.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorSession {
    pub meta: SessionMeta,
    pub timestamps: Vec<i64>,
    pub seq: Vec<u64>,
    /// Row-major `T × n_channels` codes.
    pub codes: Vec<u32>,
    pub n_channels: usize,
}

impl SensorSession {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[u32] {
        &self.codes[t * self.n_channels..(t + 1) * self.n_channels]
    }

    pub fn channel_index(&self, key: &str) -> Option<usize> {
        self.meta.channel_map.get(key).copied()
    }
}

/// Camera-rate joint rotations, axis-angle `[lhip, rhip, lknee, rknee]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthStream {
    pub timestamps: Vec<i64>,
    pub poses: Vec<[Vec3; 4]>,
}

/// Global scalar code range used by [`normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub a_min: f64,
    pub a_max: f64,
}

impl NormalizationStats {
    pub fn load(path: impl AsRef<std::path::Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        let s: Self = serde_json::from_str(&text).map_err(|e| crate::Error::format("stats JSON", e))?;
        if !(s.a_max > s.a_min) {
            return Err(crate::Error::format("stats JSON", "a_max must exceed a_min"));
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> crate::Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("stats serialize");
        std::fs::write(path, text + "\n").map_err(|e| crate::Error::io(path, e))
    }
}

/// A normalized, baseline-subtracted session with per-frame targets.
#[derive(Clone, Debug)]
pub struct ProcessedSession {
    pub participant_id: String,
    pub tibia_length_m: f64,
    /// Skeleton rescaled to this participant's tibia.
    pub template: SkeletonTemplate,
    pub n_channels: usize,
    pub timestamps: Vec<i64>,
    /// Row-major `T × n_channels` model inputs.
    pub values: Vec<f32>,
    /// Every channel of the frame was inside `[0, 1]` before baseline subtraction.
    pub frame_ok: Vec<bool>,
    pub baselines: Vec<f64>,
    /// Ground truth interpolated to the sensor timestamps.
    pub targets: Option<Vec<LowerBodyRotations>>,
    pub segments: Vec<Segment>,
}

/// One materialized training/evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `(N, K, 2)` normalized values.
    pub x: Vec<f32>,
    pub target: [Rot6D; 4],
    pub positions: LowerBodyPositions,
    pub last_frame_timestamp: i64,
}

impl ProcessedSession {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Zeroes channel `k` on both legs.
    pub fn mask_channel_pair(&mut self, k: usize) {
        let half = self.n_channels / 2;
        for frame in self.values.chunks_exact_mut(self.n_channels) {
            frame[k] = 0.0;
            frame[half + k] = 0.0;
        }
    }

    /// Target rotations as 6D at frame `t`.
    pub fn target_rot6d(&self, t: usize) -> Option<[Rot6D; 4]> {
        let r = self.targets.as_ref()?[t].to_array();
        Some(r.map(|m| matrix_to_rot6d(&m)))
    }

    /// Window of `n` frames starting at `start`, with its target taken at the
    /// frame selected by `target_offset` (n − 1 for last-frame alignment).
    pub fn window(&self, start: usize, n: usize, target_offset: usize) -> Option<Window> {
        if start + n > self.len() {
            return None;
        }
        let t = start + target_offset;
        let rotations = self.targets.as_ref()?[t];
        let mut x = vec![0.0; n * self.n_channels];
        crate::models::window_input(&self.values, self.n_channels, start, n, &mut x);
        Some(Window {
            x,
            target: rotations.to_array().map(|m| matrix_to_rot6d(&m)),
            positions: forward_kinematics(&self.template, &rotations),
            last_frame_timestamp: self.timestamps[t],
        })
    }

    /// Movement label of frame `t` if it lies in an activity segment.
    pub fn movement_at(&self, t: usize) -> Option<u32> {
        self.segments
            .iter()
            .find(|s| s.activity.contains(&t))
            .map(|s| s.movement_id)
    }
}
