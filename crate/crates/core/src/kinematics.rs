//! Rigid lower-body kinematic chain: pelvis → hips → knees → ankles.
//!
//! Frame convention: y up, x lateral (left negative), z forward. The root sits
//! at the pelvis with identity orientation; only the four joint rotations
//! (both hips, both knees) move the chain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotations::{Mat3, RotMatrix, Vec3};

/// Accepted range for a measured tibia length, meters (exclusive bounds).
pub const TIBIA_RANGE_M: (f64, f64) = (0.2, 0.7);

/// Joint order for rotations everywhere in the crate (model output, files, metrics).
pub const ROTATION_JOINTS: [&str; 4] = ["left_hip", "right_hip", "left_knee", "right_knee"];

/// Joint order for positions.
pub const POSITION_JOINTS: [&str; 4] = ["left_knee", "right_knee", "left_ankle", "right_ankle"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTemplate {
    pub pelvis_to_hip_left: Vec3,
    pub pelvis_to_hip_right: Vec3,
    pub hip_to_knee: Vec3,
    pub knee_to_ankle: Vec3,
}

impl Default for SkeletonTemplate {
    fn default() -> Self {
        default_template()
    }
}

impl SkeletonTemplate {
    pub fn tibia_length(&self) -> f64 {
        self.knee_to_ankle.norm()
    }

    pub fn thigh_length(&self) -> f64 {
        self.hip_to_knee.norm()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowerBodyRotations {
    pub left_hip: RotMatrix,
    pub right_hip: RotMatrix,
    pub left_knee: RotMatrix,
    pub right_knee: RotMatrix,
}

impl LowerBodyRotations {
    pub fn identity() -> Self {
        Self::from_array([RotMatrix::identity(); 4])
    }

    /// Builds from `[left_hip, right_hip, left_knee, right_knee]`.
    pub fn from_array(r: [RotMatrix; 4]) -> Self {
        LowerBodyRotations {
            left_hip: r[0],
            right_hip: r[1],
            left_knee: r[2],
            right_knee: r[3],
        }
    }

    pub fn to_array(&self) -> [RotMatrix; 4] {
        [self.left_hip, self.right_hip, self.left_knee, self.right_knee]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowerBodyPositions {
    pub left_knee: Vec3,
    pub right_knee: Vec3,
    pub left_ankle: Vec3,
    pub right_ankle: Vec3,
}

impl LowerBodyPositions {
    /// `[left_knee, right_knee, left_ankle, right_ankle]`.
    pub fn to_array(&self) -> [Vec3; 4] {
        [self.left_knee, self.right_knee, self.left_ankle, self.right_ankle]
    }

    pub fn from_array(p: [Vec3; 4]) -> Self {
        LowerBodyPositions {
            left_knee: p[0],
            right_knee: p[1],
            left_ankle: p[2],
            right_ankle: p[3],
        }
    }
}

pub fn default_template() -> SkeletonTemplate {
    SkeletonTemplate {
        pelvis_to_hip_left: Vec3::new(-0.09, -0.07, 0.0),
        pelvis_to_hip_right: Vec3::new(0.09, -0.07, 0.0),
        hip_to_knee: Vec3::new(0.0, -0.38, 0.0),
        knee_to_ankle: Vec3::new(0.0, -0.40, 0.0),
    }
}

/// Uniformly scales every offset so the tibia matches `measured_tibia`.
pub fn rescale_to_tibia(t: &SkeletonTemplate, measured_tibia: f64) -> Result<SkeletonTemplate> {
    let (lo, hi) = TIBIA_RANGE_M;
    if !(measured_tibia > lo && measured_tibia < hi) {
        return Err(Error::InvalidArgument(format!(
            "tibia length {measured_tibia} m outside ({lo}, {hi})"
        )));
    }
    let s = measured_tibia / t.tibia_length();
    Ok(SkeletonTemplate {
        pelvis_to_hip_left: t.pelvis_to_hip_left * s,
        pelvis_to_hip_right: t.pelvis_to_hip_right * s,
        hip_to_knee: t.hip_to_knee * s,
        knee_to_ankle: t.knee_to_ankle * s,
    })
}

pub fn forward_kinematics(t: &SkeletonTemplate, q: &LowerBodyRotations) -> LowerBodyPositions {
    let leg = |hip: &Vec3, r_hip: &Mat3, r_knee: &Mat3| {
        let knee = hip + r_hip * t.hip_to_knee;
        let ankle = hip + r_hip * (t.hip_to_knee + r_knee * t.knee_to_ankle);
        (knee, ankle)
    };
    let (left_knee, left_ankle) = leg(&t.pelvis_to_hip_left, &q.left_hip.0, &q.left_knee.0);
    let (right_knee, right_ankle) = leg(&t.pelvis_to_hip_right, &q.right_hip.0, &q.right_knee.0);
    LowerBodyPositions {
        left_knee,
        right_knee,
        left_ankle,
        right_ankle,
    }
}

/// Given `∂L/∂p` for each position joint, returns `∂L/∂R` for each rotation joint.
pub fn forward_kinematics_backward(
    t: &SkeletonTemplate,
    q: &LowerBodyRotations,
    grad: &LowerBodyPositions,
) -> [Mat3; 4] {
    let leg = |r_hip: &Mat3, r_knee: &Mat3, g_knee: &Vec3, g_ankle: &Vec3| {
        let lower = t.hip_to_knee + r_knee * t.knee_to_ankle;
        let d_hip = g_knee * t.hip_to_knee.transpose() + g_ankle * lower.transpose();
        let d_knee = (r_hip.transpose() * g_ankle) * t.knee_to_ankle.transpose();
        (d_hip, d_knee)
    };
    let (dlh, dlk) = leg(&q.left_hip.0, &q.left_knee.0, &grad.left_knee, &grad.left_ankle);
    let (drh, drk) = leg(&q.right_hip.0, &q.right_knee.0, &grad.right_knee, &grad.right_ankle);
    [dlh, drh, dlk, drk]
}
