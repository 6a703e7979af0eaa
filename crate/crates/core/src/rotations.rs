//! Rotation representations used throughout the pipeline.
//!
//! Ground truth arrives as axis-angle vectors, the network regresses the
//! continuous 6D representation (first two columns of the rotation matrix,
//! column-major), and all metrics are computed on 3×3 matrices. Everything here
//! is double precision; network outputs are promoted before conversion.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Largest tolerated `‖RᵀR − I‖∞` before a matrix is refused as a rotation.
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-4;

/// Norm below which a 6D column is considered degenerate.
pub const ROT6D_DEGENERACY: f64 = 1e-8;

/// Rotation as a 3-vector: direction is the axis, magnitude the angle in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle(pub Vec3);

/// A 3×3 rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotMatrix(pub Mat3);

/// First two matrix columns, concatenated: `r[0..3]` is column 1, `r[3..6]` column 2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot6D(pub [f64; 6]);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        AxisAngle(Vec3::new(x, y, z))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

impl RotMatrix {
    pub fn identity() -> Self {
        RotMatrix(Mat3::identity())
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        RotMatrix(self.0.transpose())
    }

    /// `‖RᵀR − I‖∞`, the largest absolute entry.
    pub fn orthogonality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Mat3::identity()).abs().max()
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0))
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        RotMatrix(q.to_rotation_matrix().into_inner())
    }
}

impl std::ops::Mul for RotMatrix {
    type Output = RotMatrix;

    fn mul(self, rhs: RotMatrix) -> RotMatrix {
        RotMatrix(self.0 * rhs.0)
    }
}

impl Rot6D {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] applied to the antisymmetric part: `vee((M − Mᵀ)/2)`.
fn vee_antisym(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues' formula, `exp([v]×)`.
pub fn axis_angle_to_matrix(v: &AxisAngle) -> RotMatrix {
    let theta2 = v.0.norm_squared();
    let theta = theta2.sqrt();
    // sin(θ)/θ and (1 − cos θ)/θ², with series expansions near zero.
    let (a, b) = if theta < 1e-4 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = skew(&v.0);
    RotMatrix(Mat3::identity() + k * a + k * k * b)
}

/// Logarithm map. Returns an angle in `[0, π]`.
///
/// Near π the axis is recovered from the symmetric part (largest diagonal of
/// `(R + Rᵀ)/2 − cos θ·I`), with its sign taken from the skew part. At exactly
/// π, where the sign is free, the first non-zero axis component is positive.
pub fn matrix_to_axis_angle(r: &RotMatrix) -> Result<AxisAngle> {
    let err = r.orthogonality_error();
    if !(err <= ORTHOGONALITY_TOLERANCE) {
        return Err(Error::NotARotation(format!(
            "‖RᵀR − I‖∞ = {err:.3e} exceeds {ORTHOGONALITY_TOLERANCE:e}"
        )));
    }
    let m = &r.0;
    let w = vee_antisym(m);
    let s = w.norm();
    let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = s.atan2(c);

    if angle < 1e-12 {
        return Ok(AxisAngle(w));
    }
    if c > -0.5 {
        return Ok(AxisAngle(w * (angle / s)));
    }

    let sym = (m + m.transpose()) * 0.5;
    let one_minus_c = 1.0 - c;
    let diag = Vec3::new(
        (sym[(0, 0)] - c) / one_minus_c,
        (sym[(1, 1)] - c) / one_minus_c,
        (sym[(2, 2)] - c) / one_minus_c,
    );
    let i = diag.imax();
    let ki = diag[i].max(0.0).sqrt();
    let mut axis = Vec3::zeros();
    for j in 0..3 {
        axis[j] = if j == i { ki } else { sym[(i, j)] / (one_minus_c * ki) };
    }
    axis.normalize_mut();

    if s > 1e-12 {
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
    } else if let Some(first) = axis.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            axis = -axis;
        }
    }
    Ok(AxisAngle(axis * angle))
}

pub fn matrix_to_rot6d(r: &RotMatrix) -> Rot6D {
    let m = &r.0;
    Rot6D([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
}

struct GramSchmidt {
    a1_norm: f64,
    u2_norm: f64,
    b1: Vec3,
    b2: Vec3,
    b3: Vec3,
    a2: Vec3,
}

fn gram_schmidt(r: &Rot6D) -> Result<GramSchmidt> {
    let a1 = Vec3::new(r.0[0], r.0[1], r.0[2]);
    let a2 = Vec3::new(r.0[3], r.0[4], r.0[5]);
    if r.0.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidRot6d("non-finite component".into()));
    }
    let a1_norm = a1.norm();
    if a1_norm < ROT6D_DEGENERACY {
        return Err(Error::InvalidRot6d(format!(
            "first column norm {a1_norm:.3e} is degenerate"
        )));
    }
    let b1 = a1 / a1_norm;
    let u2 = a2 - b1 * b1.dot(&a2);
    let u2_norm = u2.norm();
    if u2_norm < ROT6D_DEGENERACY {
        return Err(Error::InvalidRot6d(format!(
            "second column is parallel to the first (residual {u2_norm:.3e})"
        )));
    }
    let b2 = u2 / u2_norm;
    let b3 = b1.cross(&b2);
    Ok(GramSchmidt {
        a1_norm,
        u2_norm,
        b1,
        b2,
        b3,
        a2,
    })
}

/// Gram–Schmidt reconstruction of a rotation from its 6D representation.
pub fn rot6d_to_matrix(r: &Rot6D) -> Result<RotMatrix> {
    let gs = gram_schmidt(r)?;
    Ok(RotMatrix(Mat3::from_columns(&[gs.b1, gs.b2, gs.b3])))
}

/// Pulls a gradient with respect to the reconstructed matrix back to the 6D input.
pub fn rot6d_to_matrix_backward(r: &Rot6D, grad: &Mat3) -> Result<[f64; 6]> {
    let gs = gram_schmidt(r)?;
    let g1 = grad.column(0).into_owned();
    let g2 = grad.column(1).into_owned();
    let g3 = grad.column(2).into_owned();

    // b3 = b1 × b2
    let mut d_b1 = g1 + gs.b2.cross(&g3);
    let d_b2 = g2 + g3.cross(&gs.b1);

    // b2 = u2 / ‖u2‖
    let d_u2 = (d_b2 - gs.b2 * gs.b2.dot(&d_b2)) / gs.u2_norm;

    // u2 = a2 − (b1·a2) b1
    let b1_dot_a2 = gs.b1.dot(&gs.a2);
    let d_a2 = d_u2 - gs.b1 * gs.b1.dot(&d_u2);
    d_b1 -= d_u2 * b1_dot_a2 + gs.a2 * gs.b1.dot(&d_u2);

    // b1 = a1 / ‖a1‖
    let d_a1 = (d_b1 - gs.b1 * gs.b1.dot(&d_b1)) / gs.a1_norm;

    Ok([d_a1.x, d_a1.y, d_a1.z, d_a2.x, d_a2.y, d_a2.z])
}

/// Angle of the relative rotation `RᵀR̂`, in `[0, π]`.
///
/// Evaluated as `atan2(sin θ, cos θ)` from the skew and trace parts, which
/// equals the clamped `arccos((tr − 1)/2)` on rotation matrices but keeps full
/// precision near 0 and π.
pub fn geodesic_angle(r: &RotMatrix, r_hat: &RotMatrix) -> f64 {
    let rel = r.0.transpose() * r_hat.0;
    let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let s = vee_antisym(&rel).norm();
    s.atan2(c)
}

pub fn rot_x(angle: f64) -> RotMatrix {
    let (s, c) = angle.sin_cos();
    RotMatrix(Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
}

pub fn rot_y(angle: f64) -> RotMatrix {
    let (s, c) = angle.sin_cos();
    RotMatrix(Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
}

pub fn rot_z(angle: f64) -> RotMatrix {
    let (s, c) = angle.sin_cos();
    RotMatrix(Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
}

/// Uniformly distributed random rotation (Shoemake's method on unit quaternions).
pub fn random_rotation<R: rand::Rng + ?Sized>(rng: &mut R) -> RotMatrix {
    use std::f64::consts::TAU;
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = nalgebra::Quaternion::new(
        b * (TAU * u3).cos(),
        a * (TAU * u2).sin(),
        a * (TAU * u2).cos(),
        b * (TAU * u3).sin(),
    );
    RotMatrix::from_quaternion(&UnitQuaternion::from_quaternion(q))
}
