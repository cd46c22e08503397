//! Small rigid-body toolkit: rotation vectors, their exponential map and
//! right Jacobian, and rigid transforms.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this rotation angle the exponential map and its Jacobian switch to
/// Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-4;

#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Coefficients `(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)`.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        taylor_coefficients(theta)
    } else {
        full_coefficients(theta)
    }
}

fn taylor_coefficients(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    let t4 = t2 * t2;
    (
        1.0 - t2 / 6.0 + t4 / 120.0,
        0.5 - t2 / 24.0 + t4 / 720.0,
        1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
    )
}

fn full_coefficients(theta: f64) -> (f64, f64, f64) {
    let s = theta.sin();
    let half = (0.5 * theta).sin();
    (
        s / theta,
        2.0 * half * half / (theta * theta),
        (theta - s) / (theta * theta * theta),
    )
}

/// Rotation matrix of a rotation vector (Rodrigues' formula).
pub fn exp_so3(r: &Vec3) -> Mat3 {
    let (a, b, _) = rodrigues_coefficients(r.norm());
    let k = skew(r);
    Mat3::identity() + k * a + k * k * b
}

/// Right Jacobian of the exponential map: `exp(r + d) ~ exp(r) exp(J_r(r) d)`.
pub fn right_jacobian(r: &Vec3) -> Mat3 {
    let (_, b, c) = rodrigues_coefficients(r.norm());
    let k = skew(r);
    Mat3::identity() - k * b + k * k * c
}

/// Exponential map evaluated with the closed-form coefficients regardless of
/// angle. Only used to check the Taylor branch.
pub fn exp_so3_closed_form(r: &Vec3) -> Mat3 {
    let theta = r.norm();
    if theta == 0.0 {
        return Mat3::identity();
    }
    let (a, b, _) = full_coefficients(theta);
    let k = skew(r);
    Mat3::identity() + k * a + k * k * b
}

/// Rotation vector of a rotation matrix, with angle in `[0, pi]`.
pub fn log_so3(m: &Mat3) -> Vec3 {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s < 1e-12 {
        // sin(t/2) ~ t/2 and cos(t/2) ~ 1
        return v * (2.0 / w);
    }
    let angle = 2.0 * s.atan2(w);
    v * (angle / s)
}

/// Rigid transform `x -> rot * x + trans`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid {
    pub rot: Mat3,
    pub trans: Vec3,
}

impl Default for Rigid {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rigid {
    pub fn identity() -> Self {
        Self {
            rot: Mat3::identity(),
            trans: Vec3::zeros(),
        }
    }

    pub fn new(rot: Mat3, trans: Vec3) -> Self {
        Self { rot, trans }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Rigid) -> Rigid {
        Rigid {
            rot: self.rot * other.rot,
            trans: self.rot * other.trans + self.trans,
        }
    }

    pub fn inverse(&self) -> Rigid {
        let rt = self.rot.transpose();
        Rigid {
            rot: rt,
            trans: -(rt * self.trans),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rot * p + self.trans
    }

    /// Rotation by `rot` about the fixed point `center`.
    pub fn about_point(rot: Mat3, center: &Vec3) -> Rigid {
        Rigid {
            rot,
            trans: center - rot * center,
        }
    }
}
