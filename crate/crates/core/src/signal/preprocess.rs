use super::segment::segment_from_schedule;
use super::{GroundTruthStream, NormalizationStats, ProcessedSession, SensorSession, CODE_MAX};
use crate::error::{Error, Result};
use crate::kinematics::{default_template, rescale_to_tibia, LowerBodyRotations};
use crate::rotations::{axis_angle_to_matrix, AxisAngle, RotMatrix};

/// Converter rail values written on a disconnected channel.
pub fn is_rail(code: u32) -> bool {
    code == 0 || code >= CODE_MAX
}

/// Global min/max over every channel and frame, skipping rail codes.
pub fn compute_minmax<'a>(sessions: impl IntoIterator<Item = &'a SensorSession>) -> Result<NormalizationStats> {
    let mut lo = u32::MAX;
    let mut hi = 0u32;
    let mut any = false;
    for s in sessions {
        for &c in s.codes.iter().filter(|&&c| !is_rail(c)) {
            lo = lo.min(c);
            hi = hi.max(c);
            any = true;
        }
    }
    if !any {
        return Err(Error::InsufficientData("no non-rail codes to scale".into()));
    }
    if hi == lo {
        return Err(Error::InsufficientData(format!("constant code {lo}: a_max = a_min")));
    }
    Ok(NormalizationStats {
        a_min: lo as f64,
        a_max: hi as f64,
    })
}

/// `(code − a_min)/(a_max − a_min)`, deliberately unclamped.
pub fn normalize(code: f64, stats: &NormalizationStats) -> f64 {
    (code - stats.a_min) / (stats.a_max - stats.a_min)
}

/// Subtracts each channel's mean over `interval` (seconds from timestamp zero).
///
/// `valid` (same layout as `values`) excludes samples from the mean; the
/// subtraction itself applies to every sample. Returns the subtracted values
/// and the per-channel baselines.
pub fn subtract_baseline(
    values: &[f64],
    n_channels: usize,
    timestamps: &[i64],
    interval: [f64; 2],
    valid: Option<&[bool]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = timestamps.len();
    if values.len() != t * n_channels || valid.is_some_and(|v| v.len() != values.len()) {
        return Err(Error::Shape("values, mask and timestamps disagree".into()));
    }
    let (start, end) = ((interval[0] * 1e6).round() as i64, (interval[1] * 1e6).round() as i64);
    let frames: Vec<usize> = (0..t)
        .filter(|&i| timestamps[i] >= start && timestamps[i] < end)
        .collect();
    let covered = match (frames.first(), frames.last()) {
        (Some(&a), Some(&b)) => (timestamps[b] - timestamps[a]) as f64 * 1e-6,
        _ => 0.0,
    };
    if t == 0 || start < timestamps[0] - 100_000 || end > timestamps[t - 1] || covered < 1.0 - 0.1 {
        return Err(Error::InvalidArgument(format!(
            "baseline interval {interval:?} s is not covered by the session (needs ≥ 1 s of frames)"
        )));
    }
    let mut baselines = vec![0.0; n_channels];
    for (c, b) in baselines.iter_mut().enumerate() {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &f in &frames {
            let i = f * n_channels + c;
            if valid.map_or(true, |v| v[i]) {
                sum += values[i];
                n += 1;
            }
        }
        if n == 0 {
            // Fully dropped channel: fall back to the plain mean so the
            // frames still get rejected downstream rather than erroring here.
            sum = frames.iter().map(|&f| values[f * n_channels + c]).sum();
            n = frames.len();
        }
        *b = sum / n as f64;
    }
    let out = values
        .chunks_exact(n_channels)
        .flat_map(|frame| frame.iter().zip(&baselines).map(|(v, b)| v - b))
        .collect();
    Ok((out, baselines))
}

/// Number of sliding windows: `(T − N)/stride + 1`, or 0 when `T < N`.
pub fn window_count(t: usize, n: usize, stride: usize) -> usize {
    if t < n || stride == 0 {
        0
    } else {
        (t - n) / stride + 1
    }
}

/// Window start frames partitioned by the cleaning rule.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WindowSplit {
    pub kept: Vec<usize>,
    pub rejected: Vec<usize>,
}

/// Slides `n`-frame windows at `stride`; a window is rejected iff any of its
/// frames is flagged bad in `frame_ok`.
pub fn extract_windows(frame_ok: &[bool], n: usize, stride: usize) -> Result<WindowSplit> {
    if n == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "window length and stride must be positive".into(),
        ));
    }
    if frame_ok.len() < n {
        return Err(Error::InsufficientData(format!(
            "session has {} frames, window needs {n}",
            frame_ok.len()
        )));
    }
    let mut bad_prefix = vec![0usize; frame_ok.len() + 1];
    for (i, &ok) in frame_ok.iter().enumerate() {
        bad_prefix[i + 1] = bad_prefix[i] + usize::from(!ok);
    }
    let mut split = WindowSplit::default();
    for s in (0..=frame_ok.len() - n).step_by(stride) {
        if bad_prefix[s + n] == bad_prefix[s] {
            split.kept.push(s);
        } else {
            split.rejected.push(s);
        }
    }
    Ok(split)
}

fn gt_rotations(pose: &[crate::rotations::Vec3; 4]) -> [RotMatrix; 4] {
    pose.map(|v| axis_angle_to_matrix(&AxisAngle(v)))
}

/// Resamples ground truth at `query` timestamps by per-joint quaternion slerp.
///
/// Queries up to one ground-truth frame outside the stream hold the edge sample.
pub fn interpolate_gt(gt: &GroundTruthStream, query: &[i64]) -> Result<Vec<LowerBodyRotations>> {
    let n = gt.timestamps.len();
    if n == 0 || gt.poses.len() != n {
        return Err(Error::InsufficientData("empty ground-truth stream".into()));
    }
    let first = gt.timestamps[0];
    let last = gt.timestamps[n - 1];
    let period = if n > 1 { (last - first) / (n as i64 - 1) } else { 0 };
    let mut out = Vec::with_capacity(query.len());
    for &q in query {
        if q < first - period || q > last + period {
            return Err(Error::InvalidArgument(format!(
                "query {q} µs lies more than one frame outside ground truth [{first}, {last}]"
            )));
        }
        let rots = match gt.timestamps.binary_search(&q) {
            Ok(i) => gt_rotations(&gt.poses[i]),
            Err(0) => gt_rotations(&gt.poses[0]),
            Err(i) if i == n => gt_rotations(&gt.poses[n - 1]),
            Err(i) => {
                let (t0, t1) = (gt.timestamps[i - 1], gt.timestamps[i]);
                let w = (q - t0) as f64 / (t1 - t0) as f64;
                let a = gt_rotations(&gt.poses[i - 1]);
                let b = gt_rotations(&gt.poses[i]);
                std::array::from_fn(|j| {
                    let qa = a[j].to_quaternion();
                    let qb = b[j].to_quaternion();
                    let qi = qa.try_slerp(&qb, w, 1e-12).unwrap_or(qa);
                    // slerp between nearby samples drifts off the unit sphere by ~1e-9.
                    RotMatrix::from_quaternion(&nalgebra::UnitQuaternion::new_normalize(qi.into_inner()))
                })
            }
        };
        out.push(LowerBodyRotations::from_array(rots));
    }
    Ok(out)
}

/// Full chain for one session: normalize, flag frames outside `[0, 1]`,
/// subtract the standing baseline, align ground truth and label segments.
pub fn prepare_session(
    raw: &SensorSession,
    gt: Option<&GroundTruthStream>,
    stats: &NormalizationStats,
) -> Result<ProcessedSession> {
    let c = raw.n_channels;
    let normalized: Vec<f64> = raw.codes.iter().map(|&v| normalize(v as f64, stats)).collect();
    let frame_ok = normalized
        .chunks_exact(c)
        .map(|f| f.iter().all(|v| (0.0..=1.0).contains(v)))
        .collect();
    let valid: Vec<bool> = raw.codes.iter().map(|&v| !is_rail(v)).collect();
    let (values, baselines) = subtract_baseline(
        &normalized,
        c,
        &raw.timestamps,
        raw.meta.baseline_interval,
        Some(&valid),
    )?;
    let targets = gt.map(|g| interpolate_gt(g, &raw.timestamps)).transpose()?;
    let segments = if raw.meta.schedule.is_empty() {
        Vec::new()
    } else {
        segment_from_schedule(raw, &raw.meta.schedule)?
    };
    Ok(ProcessedSession {
        participant_id: raw.meta.participant_id.clone(),
        tibia_length_m: raw.meta.tibia_length_m,
        template: rescale_to_tibia(&default_template(), raw.meta.tibia_length_m)?,
        n_channels: c,
        timestamps: raw.timestamps.clone(),
        values: values.into_iter().map(|v| v as f32).collect(),
        frame_ok,
        baselines,
        targets,
        segments,
    })
}
