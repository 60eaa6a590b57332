//! Rigid camera poses, the SE(3) exponential map and pinhole projection.
//!
//! Poses are camera-to-world. Camera space is x right, y down, z forward.
//! Pixel `(i, j)` samples the image plane at the continuous coordinate
//! `(i, j)`, so a point on the optical axis lands exactly on `(cx, cy)`.

use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this rotation angle the exponential map switches to its Taylor series.
pub const SMALL_ANGLE: f64 = 1e-8;
/// Default near plane in camera units.
pub const DEFAULT_NEAR: f64 = 1e-4;
/// Default bound on the 6-vector norm of a decoded screw axis.
pub const DEFAULT_MAX_SCREW: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// Homogeneous product `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        pose_inverse(self)
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// World-to-camera rotation and translation, `x_cam = W x + t`.
    pub fn world_to_camera(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let w = self.rotation.transpose();
        let t = -(w * self.translation);
        (w, t)
    }

    /// Top three rows of the homogeneous matrix, row-major.
    pub fn to_rows(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_rows(rows: &[f64; 12]) -> Pose {
        let mut rotation = Matrix3::zeros();
        let mut translation = Vector3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                rotation[(r, c)] = rows[r * 4 + c];
            }
            translation[r] = rows[r * 4 + 3];
        }
        Pose::new(rotation, translation)
    }

    /// Orthonormality and determinant check.
    pub fn is_valid(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        (rtr - Matrix3::identity()).abs().max() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Geodesic interpolation `a * exp(s * log(a^-1 b))`.
    pub fn interpolate(a: &Pose, b: &Pose, s: f64) -> Pose {
        let rel = a.inverse().compose(b);
        let xi = screw_log(&rel);
        a.compose(&screw_exp(&xi.scaled(s)))
    }

    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let r = (self.rotation - other.rotation).abs().max();
        let t = (self.translation - other.translation).abs().max();
        r.max(t)
    }
}

/// Shared pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx {} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy {} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }
}

/// Twist `(omega; v)` fed to the exponential map.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ScrewAxis {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl ScrewAxis {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(a: &[f64; 6]) -> Self {
        Self::new(
            Vector3::new(a[0], a[1], a[2]),
            Vector3::new(a[3], a[4], a[5]),
        )
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        ]
    }

    pub fn norm(&self) -> f64 {
        (self.omega.norm_squared() + self.v.norm_squared()).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.omega * s, self.v * s)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Homogeneous product `a * b`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose::new(
        a.rotation * b.rotation,
        a.rotation * b.translation + a.translation,
    )
}

pub fn pose_inverse(a: &Pose) -> Pose {
    let rt = a.rotation.transpose();
    Pose::new(rt, -(rt * a.translation))
}

/// Pinhole projection of a world point. Returns the pixel and camera depth.
pub fn project(
    pose: &Pose,
    intr: &Intrinsics,
    x: &Vector3<f64>,
) -> Result<(Vector2<f64>, f64), GeometryError> {
    project_with_near(pose, intr, x, DEFAULT_NEAR)
}

pub fn project_with_near(
    pose: &Pose,
    intr: &Intrinsics,
    x: &Vector3<f64>,
    near: f64,
) -> Result<(Vector2<f64>, f64), GeometryError> {
    let (w, t) = pose.world_to_camera();
    let pc = w * x + t;
    if pc.z <= near {
        return Err(GeometryError::BehindCamera { depth: pc.z });
    }
    let pixel = Vector2::new(
        intr.fx * pc.x / pc.z + intr.cx,
        intr.fy * pc.y / pc.z + intr.cy,
    );
    Ok((pixel, pc.z))
}

/// Minimal scalar interface shared by `f64` and forward-mode jets, so the
/// exponential map has a single implementation for values and derivatives.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(&self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

/// Forward-mode dual number carrying `N` partial derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Jet<N> {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }

    pub fn variable(v: f64, i: usize) -> Self {
        let mut d = [0.0; N];
        d[i] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x *= dv;
        }
        Self { v, d }
    }
}

impl<const N: usize> Add for Jet<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Self { v: self.v + o.v, d }
    }
}

impl<const N: usize> Sub for Jet<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a -= b;
        }
        Self { v: self.v - o.v, d }
    }
}

impl<const N: usize> Mul for Jet<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        Self { v: self.v * o.v, d }
    }
}

impl<const N: usize> Div for Jet<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] - v * o.d[i]) * inv;
        }
        Self { v, d }
    }
}

impl<const N: usize> Neg for Jet<N> {
    type Output = Self;
    fn neg(self) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x = -*x;
        }
        Self { v: -self.v, d }
    }
}

impl<const N: usize> Real for Jet<N> {
    fn cst(v: f64) -> Self {
        Self::constant(v)
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
}

/// Rotation (row-major) and translation of `exp([omega; v])`, generic over the
/// scalar so jets produce the Jacobian from the same code path.
pub fn screw_exp_generic<T: Real>(omega: [T; 3], v: [T; 3]) -> ([[T; 3]; 3], [T; 3]) {
    let zero = T::cst(0.0);
    let one = T::cst(1.0);
    let theta_sq = omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2];

    // R = I + a K + b K^2, V = I + b K + c K^2
    let (a, b, c) = if theta_sq.value() < SMALL_ANGLE * SMALL_ANGLE {
        (
            one - theta_sq / T::cst(6.0),
            T::cst(0.5) - theta_sq / T::cst(24.0),
            T::cst(1.0 / 6.0) - theta_sq / T::cst(120.0),
        )
    } else {
        let theta = theta_sq.sqrt();
        let s = theta.sin();
        let half = (theta * T::cst(0.5)).sin();
        (
            s / theta,
            T::cst(2.0) * half * half / theta_sq,
            (theta - s) / (theta_sq * theta),
        )
    };

    let k = [
        [zero, -omega[2], omega[1]],
        [omega[2], zero, -omega[0]],
        [-omega[1], omega[0], zero],
    ];
    let mut k2 = [[zero; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = zero;
            for l in 0..3 {
                acc = acc + k[i][l] * k[l][j];
            }
            k2[i][j] = acc;
        }
    }

    let mut rot = [[zero; 3]; 3];
    let mut vmat = [[zero; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { one } else { zero };
            rot[i][j] = id + a * k[i][j] + b * k2[i][j];
            vmat[i][j] = id + b * k[i][j] + c * k2[i][j];
        }
    }
    let mut t = [zero; 3];
    for i in 0..3 {
        t[i] = vmat[i][0] * v[0] + vmat[i][1] * v[1] + vmat[i][2] * v[2];
    }
    (rot, t)
}

/// SE(3) exponential map: Rodrigues on `omega`, left Jacobian applied to `v`.
pub fn screw_exp(axis: &ScrewAxis) -> Pose {
    let w = [axis.omega.x, axis.omega.y, axis.omega.z];
    let v = [axis.v.x, axis.v.y, axis.v.z];
    let (r, t) = screw_exp_generic(w, v);
    Pose::new(
        Matrix3::from_fn(|i, j| r[i][j]),
        Vector3::new(t[0], t[1], t[2]),
    )
}

/// `exp` together with its Jacobian. Row `i` of the Jacobian is the
/// derivative of output `i` (nine row-major rotation entries, then the three
/// translation entries) with respect to `[omega; v]`.
pub fn screw_exp_jacobian(axis: &ScrewAxis) -> (Pose, [[f64; 6]; 12]) {
    let a = axis.to_array();
    let w = [Jet::<6>::variable(a[0], 0), Jet::variable(a[1], 1), Jet::variable(a[2], 2)];
    let v = [Jet::<6>::variable(a[3], 3), Jet::variable(a[4], 4), Jet::variable(a[5], 5)];
    let (r, t) = screw_exp_generic(w, v);
    let mut jac = [[0.0; 6]; 12];
    for i in 0..3 {
        for j in 0..3 {
            jac[i * 3 + j] = r[i][j].d;
        }
        jac[9 + i] = t[i].d;
    }
    let pose = Pose::new(
        Matrix3::from_fn(|i, j| r[i][j].v),
        Vector3::new(t[0].v, t[1].v, t[2].v),
    );
    (pose, jac)
}

/// Inverse of [`screw_exp`] for rotation angles below pi.
pub fn screw_log(pose: &Pose) -> ScrewAxis {
    let r = &pose.rotation;
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let vee = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let omega = if theta < 1e-6 {
        vee * 0.5 * (1.0 + theta * theta / 6.0)
    } else {
        vee * (theta / (2.0 * theta.sin()))
    };
    let k = skew(&omega);
    let theta_sq = omega.norm_squared();
    // V^{-1} = I - K/2 + d K^2
    let d = if theta < 1e-6 {
        1.0 / 12.0 + theta_sq / 720.0
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / theta_sq;
        (1.0 - a / (2.0 * b)) / theta_sq
    };
    let v_inv = Matrix3::identity() - k * 0.5 + k * k * d;
    ScrewAxis::new(omega, v_inv * pose.translation)
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}
