//! SO(3) and its Lie algebra: hat/vee, Rodrigues exponential, principal
//! logarithm, the volume factor of `exp`, equivalent angles and Haar sampling.
//!
//! Matrices are row-major and act on column vectors. The generic `*_map`
//! functions run on any [`Real`] so the same code is used for plain
//! evaluation and for differentiation.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{dot3, Mat3, Real};

/// Below this angle the exp/log/det formulas switch to Taylor forms.
pub const SMALL_ANGLE: f64 = 1e-4;

/// Axis-angle vector `θu` in ℝ³ ≅ 𝔰𝔬(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngleVec(pub Vector3<f64>);

impl AxisAngleVec {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self(Vector3::from(v))
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.0.x, self.0.y, self.0.z]
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    /// Unit axis, `None` at the origin.
    pub fn axis(&self) -> Option<Vector3<f64>> {
        let n = self.0.norm();
        (n > 0.0).then(|| self.0 / n)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Skew-symmetric matrix `v̂`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkewMatrix(pub Matrix3<f64>);

/// Element of SO(3). Serialised as a row-major 3×3 array and validated on
/// load.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Mat3<f64>", into = "Mat3<f64>")]
pub struct Rotation(Matrix3<f64>);

impl TryFrom<Mat3<f64>> for Rotation {
    type Error = Error;

    fn try_from(m: Mat3<f64>) -> Result<Self> {
        Self::from_array(m)
    }
}

impl From<Rotation> for Mat3<f64> {
    fn from(r: Rotation) -> Self {
        r.to_array()
    }
}

impl Rotation {
    pub const ORTHO_TOL: f64 = 1e-9;

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Checks orthonormality and `det = +1` to `1e-9`.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let err = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if !(err < Self::ORTHO_TOL) || !((det - 1.0).abs() < Self::ORTHO_TOL) {
            return Err(Error::Validation(format!(
                "not a rotation: |RᵀR - I| = {err:e}, det = {det}"
            )));
        }
        Ok(Self(m))
    }

    pub fn from_array(m: Mat3<f64>) -> Result<Self> {
        Self::new(mat_from_array(&m))
    }

    /// Skips validation; callers guarantee the matrix is a rotation.
    pub(crate) fn from_array_unchecked(m: Mat3<f64>) -> Self {
        Self(mat_from_array(&m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn to_array(&self) -> Mat3<f64> {
        std::array::from_fn(|i| std::array::from_fn(|j| self.0[(i, j)]))
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.0 * x
    }

    pub fn rotation_x(angle: f64) -> Self {
        exp_so3(&AxisAngleVec::new(angle, 0.0, 0.0))
    }

    pub fn rotation_y(angle: f64) -> Self {
        exp_so3(&AxisAngleVec::new(0.0, angle, 0.0))
    }

    pub fn rotation_z(angle: f64) -> Self {
        exp_so3(&AxisAngleVec::new(0.0, 0.0, angle))
    }
}

fn mat_from_array(m: &Mat3<f64>) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j])
}

pub fn hat(v: &AxisAngleVec) -> SkewMatrix {
    let [x, y, z] = v.to_array();
    SkewMatrix(Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0))
}

pub fn vee(m: &SkewMatrix) -> AxisAngleVec {
    AxisAngleVec::new(m.0[(2, 1)], m.0[(0, 2)], m.0[(1, 0)])
}

/// `2 sin²(θ/2) / θ²`, i.e. `(1 - cos θ)/θ²` without cancellation.
fn one_minus_cos_over_sq<T: Real>(theta: T) -> T {
    let s = (theta * 0.5).sin();
    s * s * 2.0 / (theta * theta)
}

/// Rodrigues formula on any scalar type.
pub fn exp_map<T: Real>(v: &[T; 3]) -> Mat3<T> {
    let theta2 = dot3(v, v);
    let [x, y, z] = *v;
    let zero = x * 0.0;
    let k = [[zero, -z, y], [z, zero, -x], [-y, x, zero]];
    // k² = v vᵀ − θ² I
    let k2: Mat3<T> = std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            let vv = v[i] * v[j];
            if i == j {
                vv - theta2
            } else {
                vv
            }
        })
    });
    let (a, b) = if theta2.value().sqrt() < SMALL_ANGLE {
        // Taylor coefficients of sin θ/θ and (1 − cos θ)/θ²
        (theta2 * (-1.0 / 6.0) + 1.0, theta2 * (-1.0 / 24.0) + 0.5)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, one_minus_cos_over_sq(theta))
    };
    std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            let base = a * k[i][j] + b * k2[i][j];
            if i == j {
                base + 1.0
            } else {
                base
            }
        })
    })
}

/// Principal logarithm with `θ ∈ [0, π]`.
pub fn log_map<T: Real>(r: &Mat3<T>) -> [T; 3] {
    let s = [
        (r[2][1] - r[1][2]) * 0.5,
        (r[0][2] - r[2][0]) * 0.5,
        (r[1][0] - r[0][1]) * 0.5,
    ];
    let c = (r[0][0] + r[1][1] + r[2][2] - 1.0) * 0.5;
    let sn2 = dot3(&s, &s);
    let sn_val = sn2.value().sqrt();
    let theta_val = sn_val.atan2(c.value());
    if theta_val < SMALL_ANGLE {
        // θ/sin θ ≈ 1 + θ²/6 with θ² ≈ |s|²
        let f = sn2 * (1.0 / 6.0) + 1.0;
        return s.map(|si| si * f);
    }
    if theta_val > PI - SMALL_ANGLE {
        return log_near_pi(r, &s, c);
    }
    let sn = sn2.sqrt();
    let theta = sn.atan2(c);
    let f = theta / sn;
    s.map(|si| si * f)
}

/// Axis from the symmetric part, `R + Rᵀ = 2 cos θ I + 2(1 − cos θ) u uᵀ`.
fn log_near_pi<T: Real>(r: &Mat3<T>, s: &[T; 3], c: T) -> [T; 3] {
    let one_minus_c = c.rsub(1.0);
    let sq: [T; 3] = std::array::from_fn(|i| (r[i][i] - 1.0) / one_minus_c + 1.0);
    // first index wins ties, giving the lexicographic tie-break
    let mut k = 0;
    for i in 1..3 {
        if sq[i].value() > sq[k].value() {
            k = i;
        }
    }
    let uk = if sq[k].value() > 0.0 {
        sq[k].sqrt()
    } else {
        sq[k] * 0.0 + 1.0
    };
    let mut u: [T; 3] = std::array::from_fn(|j| {
        if j == k {
            uk
        } else {
            (r[k][j] + r[j][k]) / (one_minus_c * uk * 2.0)
        }
    });
    let orient = dot3(s, &u).value();
    if orient < -1e-13 {
        u = u.map(|x| -x);
    }
    let sn = dot3(s, s).sqrt();
    let theta = if sn.value() > 0.0 {
        sn.atan2(c)
    } else {
        c * 0.0 + PI
    };
    u.map(|x| x * theta)
}

pub fn exp_so3(v: &AxisAngleVec) -> Rotation {
    Rotation::from_array_unchecked(exp_map(&v.to_array()))
}

pub fn log_so3(r: &Rotation) -> AxisAngleVec {
    AxisAngleVec::from_array(log_map(&r.to_array()))
}

/// `|det J_exp|` as a function of the angle: `(2 − 2 cos θ)/θ²`.
pub fn det_jac_exp_angle<T: Real>(theta: T) -> T {
    if theta.value().abs() < SMALL_ANGLE {
        theta * theta * (-1.0 / 12.0) + 1.0
    } else {
        one_minus_cos_over_sq(theta) * 2.0
    }
}

pub fn det_jac_exp(v: &AxisAngleVec) -> f64 {
    det_jac_exp_angle(v.angle())
}

/// All members `(θ + 2πk)u` of the pre-image class of `exp(v)` for `k ∈ ks`.
///
/// At `θ = 0` the axis is undefined; only the `k = 0` term is returned and
/// the degenerate flag is set.
pub fn equivalent_angles(v: &AxisAngleVec, ks: &[i32]) -> (Vec<AxisAngleVec>, bool) {
    match v.axis() {
        None => (vec![AxisAngleVec::new(0.0, 0.0, 0.0)], true),
        Some(u) => {
            let theta = v.angle();
            let out = ks
                .iter()
                .map(|&k| AxisAngleVec(u * (theta + 2.0 * PI * k as f64)))
                .collect();
            (out, false)
        }
    }
}

/// Haar-uniform rotation from a uniformly distributed unit quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            let [w, x, y, z] = q.map(|c| c / n);
            return Rotation::from_array_unchecked([
                [
                    1.0 - 2.0 * (y * y + z * z),
                    2.0 * (x * y - w * z),
                    2.0 * (x * z + w * y),
                ],
                [
                    2.0 * (x * y + w * z),
                    1.0 - 2.0 * (x * x + z * z),
                    2.0 * (y * z - w * x),
                ],
                [
                    2.0 * (x * z - w * y),
                    2.0 * (y * z + w * x),
                    1.0 - 2.0 * (x * x + y * y),
                ],
            ]);
        }
    }
}

/// Rotation angle of `r`.
pub fn angle_of(r: &Rotation) -> f64 {
    log_so3(r).angle()
}
