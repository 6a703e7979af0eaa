//! Closed-form joint-angle trajectories for the implemented movement archetypes.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::kinematics::LowerBodyRotations;
use crate::rotations::{rot_x, rot_y, rot_z};

/// Movement ids with a trajectory generator.
pub const IMPLEMENTED_MOVEMENTS: [u32; 8] = [1, 2, 3, 4, 5, 13, 14, 15];

/// Trajectory sample rate, Hz.
pub const MOTION_RATE_HZ: f64 = 100.0;

/// Each activity eases back to standing over its final second.
const TAPER_S: f64 = 1.0;

pub fn movement_name(id: u32) -> Option<&'static str> {
    Some(match id {
        1 => "hip_flexion",
        2 => "hip_abduction",
        3 => "hip_rotation",
        4 => "knee_flexion",
        5 => "squat",
        13 => "step_up_down",
        14 => "sit_up_down",
        15 => "walking",
        _ => return None,
    })
}

/// Joint angles in radians, `[left, right]` per degree of freedom.
///
/// Positive flexion moves the thigh forward, positive abduction moves a leg
/// outward, positive knee angle folds the shank backward.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JointAngles {
    pub hip_flex: [f64; 2],
    pub hip_abd: [f64; 2],
    pub hip_rot: [f64; 2],
    pub knee: [f64; 2],
}

impl JointAngles {
    fn scaled(mut self, w: f64) -> Self {
        for a in [&mut self.hip_flex, &mut self.hip_abd, &mut self.hip_rot, &mut self.knee] {
            a[0] *= w;
            a[1] *= w;
        }
        self
    }

    fn lerp(&self, other: &Self, w: f64) -> Self {
        let mix = |a: [f64; 2], b: [f64; 2]| [a[0] + (b[0] - a[0]) * w, a[1] + (b[1] - a[1]) * w];
        JointAngles {
            hip_flex: mix(self.hip_flex, other.hip_flex),
            hip_abd: mix(self.hip_abd, other.hip_abd),
            hip_rot: mix(self.hip_rot, other.hip_rot),
            knee: mix(self.knee, other.knee),
        }
    }

    /// Joint rotations `[lhip, rhip, lknee, rknee]`.
    pub fn rotations(&self) -> LowerBodyRotations {
        let hip = |leg: usize| {
            // Outward is −x on the left leg and +x on the right.
            let side = if leg == 0 { -1.0 } else { 1.0 };
            rot_x(-self.hip_flex[leg]) * rot_z(side * self.hip_abd[leg]) * rot_y(side * self.hip_rot[leg])
        };
        LowerBodyRotations::from_array([hip(0), hip(1), rot_x(self.knee[0]), rot_x(self.knee[1])])
    }
}

/// Raised cosine `(a/2)(1 − cos 2πft)`: 0 at t = 0, peak `a`.
fn bump(a: f64, f: f64, t: f64) -> f64 {
    0.5 * a * (1.0 - (TAU * f * t).cos())
}

/// Leg active at time `t` when alternating every `cycles` periods.
fn active_leg(f: f64, cycles: f64, t: f64) -> usize {
    ((t * f / cycles).floor() as i64 % 2) as usize
}

/// Angles of movement `id`, `t` seconds into an activity lasting `duration` s.
pub fn angles_at(id: u32, t: f64, duration: f64) -> Result<JointAngles> {
    let mut a = JointAngles::default();
    match id {
        1 => {
            let f = 0.4;
            a.hip_flex[active_leg(f, 2.0, t)] = 0.9 * (TAU * f * t).sin();
        }
        2 => {
            let f = 0.4;
            a.hip_abd[active_leg(f, 2.0, t)] = bump(0.6, f, t);
        }
        3 => {
            let f = 0.4;
            a.hip_rot[active_leg(f, 2.0, t)] = 0.5 * (TAU * f * t).sin();
        }
        4 => {
            let f = 0.5;
            a.knee[active_leg(f, 2.0, t)] = bump(1.6, f, t);
        }
        5 => {
            let f = 0.25;
            a.hip_flex = [bump(1.4, f, t); 2];
            a.knee = [bump(1.9, f, t); 2];
        }
        13 => {
            let f = 0.3;
            let leg = active_leg(f, 1.0, t);
            a.hip_flex[leg] = bump(1.0, f, t);
            a.knee[leg] = bump(1.2, f, t);
            a.knee[1 - leg] = bump(0.3, f, t);
        }
        14 => {
            let f = 0.15;
            a.hip_flex = [bump(1.5, f, t); 2];
            a.knee = [bump(1.6, f, t); 2];
            a.hip_abd = [bump(0.15, f, t); 2];
        }
        15 => {
            let f = 0.9;
            let s = (TAU * f * t).sin();
            a.hip_flex = [0.5 * s, -0.5 * s];
            a.knee = [1.1 * s.max(0.0).powi(2), 1.1 * (-s).max(0.0).powi(2)];
        }
        _ => return Err(Error::InvalidArgument(format!("movement {id} has no generator"))),
    }
    let remaining = duration - t;
    if remaining < TAPER_S {
        let w = 0.5 * (1.0 - (PI * remaining.max(0.0) / TAPER_S).cos());
        a = a.scaled(w);
    }
    Ok(a)
}

/// Uniformly sampled joint angles.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub rate_hz: f64,
    pub frames: Vec<JointAngles>,
}

impl Trajectory {
    pub fn duration_s(&self) -> f64 {
        self.frames.len().saturating_sub(1) as f64 / self.rate_hz
    }

    /// Linear interpolation; holds the end samples outside the range.
    pub fn at(&self, t: f64) -> JointAngles {
        if self.frames.is_empty() {
            return JointAngles::default();
        }
        let x = (t * self.rate_hz).max(0.0);
        let i = x.floor() as usize;
        if i + 1 >= self.frames.len() {
            return *self.frames.last().unwrap();
        }
        self.frames[i].lerp(&self.frames[i + 1], x - i as f64)
    }
}

/// One movement sampled at [`MOTION_RATE_HZ`] over `[0, duration_s]`.
pub fn gen_motion(movement_id: u32, duration_s: f64) -> Result<Trajectory> {
    if !(duration_s > 0.0) {
        return Err(Error::InvalidArgument("duration must be positive".into()));
    }
    let n = (duration_s * MOTION_RATE_HZ).round() as usize + 1;
    let frames = (0..n)
        .map(|i| angles_at(movement_id, i as f64 / MOTION_RATE_HZ, duration_s))
        .collect::<Result<_>>()?;
    Ok(Trajectory {
        rate_hz: MOTION_RATE_HZ,
        frames,
    })
}
