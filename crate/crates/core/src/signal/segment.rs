use std::ops::Range;

use super::preprocess::is_rail;
use super::{ScheduleEntry, SensorSession, REST_S};
use crate::error::{Error, Result};

/// Minimum tap height above the local background, in raw code units.
pub const TAP_MIN_AMPLITUDE: f64 = 2.0e6;
const TAP_SIGMAS: f64 = 5.0;
const BACKGROUND_HALF_WIDTH_US: i64 = 2_000_000;
const MAX_PULSE_US: i64 = 300_000;
const GAP_US: (i64, i64) = (500_000, 2_000_000);
/// Activity length assumed when segmenting from taps alone, seconds.
pub const ACTIVITY_S: f64 = 30.0;
/// Middle tap of a triplet sits this long after the rest starts, seconds
/// (taps at +3, +4, +5 s, each 0.1 s long).
pub const TAP_CENTER_OFFSET_S: f64 = 4.05;
const TAP_CHANNEL: &str = "FrontHip_R";

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub movement_id: u32,
    /// Frame ranges into the session.
    pub activity: Range<usize>,
    pub rest: Range<usize>,
    /// The same boundaries in seconds.
    pub activity_s: [f64; 2],
    pub rest_s: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentSource {
    Schedule,
    Taps,
}

fn median(v: &mut [f64]) -> f64 {
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Centre timestamps (µs) of tap triplets on the right FrontHip channel.
///
/// A pulse is a run of samples more than `max(5σ, TAP_MIN_AMPLITUDE)` above
/// the ±2 s running median (σ from the median absolute deviation), lasting at
/// most 0.3 s. Chains of pulses spaced 0.5–2 s apart count only when they hold
/// exactly three pulses; the middle pulse's centre is reported.
pub fn detect_taps(s: &SensorSession) -> Vec<i64> {
    let Some(ch) = s.channel_index(TAP_CHANNEL) else {
        return Vec::new();
    };
    let ts = &s.timestamps;
    let x: Vec<Option<f64>> = (0..s.len())
        .map(|t| {
            let c = s.frame(t)[ch];
            (!is_rail(c)).then_some(c as f64)
        })
        .collect();

    let mut above = vec![false; s.len()];
    let (mut lo, mut hi) = (0usize, 0usize);
    let mut buf = Vec::new();
    for t in 0..s.len() {
        let Some(v) = x[t] else { continue };
        while ts[lo] < ts[t] - BACKGROUND_HALF_WIDTH_US {
            lo += 1;
        }
        while hi < s.len() && ts[hi] <= ts[t] + BACKGROUND_HALF_WIDTH_US {
            hi += 1;
        }
        buf.clear();
        buf.extend(x[lo..hi].iter().flatten());
        let med = median(&mut buf);
        buf.iter_mut().for_each(|b| *b = (*b - med).abs());
        let sigma = 1.4826 * median(&mut buf);
        above[t] = v - med > (TAP_SIGMAS * sigma).max(TAP_MIN_AMPLITUDE);
    }

    // Pulses as (first, last) timestamps; rail samples neither start nor end a run.
    let mut pulses = Vec::new();
    let mut run: Option<(i64, i64)> = None;
    for t in 0..s.len() {
        if x[t].is_none() {
            continue;
        }
        match (above[t], run) {
            (true, None) => run = Some((ts[t], ts[t])),
            (true, Some((a, _))) => run = Some((a, ts[t])),
            (false, Some(r)) => {
                pulses.push(r);
                run = None;
            }
            (false, None) => {}
        }
    }
    pulses.extend(run);
    let centers: Vec<i64> = pulses
        .into_iter()
        .filter(|(a, b)| b - a <= MAX_PULSE_US)
        .map(|(a, b)| (a + b) / 2)
        .collect();

    let mut out = Vec::new();
    let mut chain: Vec<i64> = Vec::new();
    let flush = |chain: &mut Vec<i64>, out: &mut Vec<i64>| {
        if chain.len() == 3 {
            out.push(chain[1]);
        }
        chain.clear();
    };
    for c in centers {
        if let Some(&prev) = chain.last() {
            let gap = c - prev;
            if !(GAP_US.0..=GAP_US.1).contains(&gap) {
                flush(&mut chain, &mut out);
            }
        }
        chain.push(c);
    }
    flush(&mut chain, &mut out);
    out
}

fn frame_range(ts: &[i64], start_s: f64, end_s: f64) -> Range<usize> {
    let a = ts.partition_point(|&t| (t as f64) < start_s * 1e6);
    let b = ts.partition_point(|&t| (t as f64) < end_s * 1e6);
    a..b.max(a)
}

fn make_segment(ts: &[i64], movement_id: u32, start_s: f64, duration_s: f64) -> Segment {
    let end = start_s + duration_s;
    Segment {
        movement_id,
        activity: frame_range(ts, start_s, end),
        rest: frame_range(ts, end, end + REST_S),
        activity_s: [start_s, end],
        rest_s: [end, end + REST_S],
    }
}

/// Segments from the metadata schedule. Fails on an empty schedule or when
/// the schedule's span differs from the recording length by more than 5 %.
pub fn segment_from_schedule(s: &SensorSession, schedule: &[ScheduleEntry]) -> Result<Vec<Segment>> {
    if schedule.is_empty() {
        return Err(Error::InvalidArgument("empty movement schedule".into()));
    }
    let expected = schedule
        .iter()
        .map(|e| e.start_s + e.duration_s)
        .fold(f64::NEG_INFINITY, f64::max)
        + REST_S;
    let actual = s.timestamps.last().copied().unwrap_or(0) as f64 * 1e-6;
    if (actual - expected).abs() > 0.05 * expected {
        return Err(Error::InvalidArgument(format!(
            "schedule spans {expected:.1} s but the recording lasts {actual:.1} s"
        )));
    }
    Ok(schedule
        .iter()
        .map(|e| make_segment(&s.timestamps, e.movement_id, e.start_s, e.duration_s))
        .collect())
}

/// Segments reconstructed from tap triplets, one per rest period. Movement
/// ids are taken in order from `movement_ids`, or numbered from 1 if empty.
pub fn segment_from_taps(s: &SensorSession, movement_ids: &[u32]) -> Result<Vec<Segment>> {
    let taps = detect_taps(s);
    if !movement_ids.is_empty() && taps.len() != movement_ids.len() {
        return Err(Error::InsufficientData(format!(
            "found {} tap triplets for {} movements",
            taps.len(),
            movement_ids.len()
        )));
    }
    Ok(taps
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let rest_start = c as f64 * 1e-6 - TAP_CENTER_OFFSET_S;
            let id = movement_ids.get(i).copied().unwrap_or(i as u32 + 1);
            make_segment(&s.timestamps, id, rest_start - ACTIVITY_S, ACTIVITY_S)
        })
        .collect())
}

pub fn segment_movements(s: &SensorSession, source: SegmentSource) -> Result<Vec<Segment>> {
    match source {
        SegmentSource::Schedule => segment_from_schedule(s, &s.meta.schedule),
        SegmentSource::Taps => {
            let ids: Vec<u32> = s.meta.schedule.iter().map(|e| e.movement_id).collect();
            segment_from_taps(s, &ids)
        }
    }
}
