//! Static and dynamic Gaussians, and the Hermite-spline deformation of
//! dynamic means over time.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Intrinsics;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("dynamic Gaussian evaluated without control points")]
    MissingControlPoints,
    #[error("need at least 4 finite control points, got {0}")]
    InvalidControlPoints(usize),
    #[error("scene needs at least one static Gaussian")]
    NoStaticGaussians,
    #[error("scene needs at least 3 frames, got {0}")]
    TooFewFrames(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GaussianKind {
    Static,
    Dynamic,
}

/// Anisotropic 3D Gaussian. Quaternions are stored `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    pub rot_quat: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub logit_opacity: f64,
    pub color: Vector3<f64>,
    pub kind: GaussianKind,
}

impl Gaussian {
    pub fn isotropic(mean: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            mean,
            rot_quat: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(scale.ln()),
            logit_opacity: logit(opacity),
            color,
            kind: GaussianKind::Static,
        }
    }

    pub fn with_kind(mut self, kind: GaussianKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.logit_opacity)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Ordered spline control points for one dynamic Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPoints {
    points: Vec<Vector3<f64>>,
}

impl ControlPoints {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, SceneError> {
        if points.len() < 4 || points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(SceneError::InvalidControlPoints(points.len()));
        }
        Ok(Self { points })
    }

    /// `n` copies of `p`: a motionless trajectory.
    pub fn constant(p: Vector3<f64>, n: usize) -> Result<Self, SceneError> {
        Self::new(vec![p; n])
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [Vector3<f64>] {
        &mut self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// The spline is linear in its control points: `S(t) = sum_j w_j(t) p_j`.
/// At most four distinct control points carry weight for any `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplineBasis {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    /// d weight / d t (frame-time units); zero where `t` was clamped.
    pub weight_dt: [f64; 4],
}

/// Hermite weights and their time derivative for frame time `t`.
///
/// `t` is clamped to `[0, n_frames - 1]`. Tangents are central differences in
/// the interior and one-sided at the two end points.
pub fn spline_basis(n_ctrl: usize, t: f64, n_frames: usize) -> SplineBasis {
    debug_assert!(n_ctrl >= 4 && n_frames >= 2);
    let t_max = (n_frames - 1) as f64;
    let clamped = !(0.0..=t_max).contains(&t);
    let t = t.clamp(0.0, t_max);
    let ts_scale = (n_ctrl - 1) as f64 / t_max;
    let ts = t * ts_scale;
    let mut seg = ts.floor() as usize;
    let mut tr = ts - seg as f64;
    if seg >= n_ctrl - 1 {
        seg = n_ctrl - 2;
        tr = 1.0;
    }

    let (t2, t3) = (tr * tr, tr * tr * tr);
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + tr;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    let d00 = 6.0 * t2 - 6.0 * tr;
    let d10 = 3.0 * t2 - 4.0 * tr + 1.0;
    let d01 = -6.0 * t2 + 6.0 * tr;
    let d11 = 3.0 * t2 - 2.0 * tr;

    // Weights over the window [seg-1, seg+2]; out-of-range slots stay zero.
    let mut w = [0.0f64; 4];
    let mut dw = [0.0f64; 4];
    let last = n_ctrl - 1;
    let add_tangent = |j: usize, hw: f64, hd: f64, w: &mut [f64; 4], dw: &mut [f64; 4]| {
        // slot(i) = i + 1 - seg
        let (lo, hi, half) = if j == 0 {
            (0, 1, 1.0)
        } else if j == last {
            (last - 1, last, 1.0)
        } else {
            (j - 1, j + 1, 0.5)
        };
        let slot = |i: usize| i + 1 - seg;
        w[slot(hi)] += half * hw;
        w[slot(lo)] -= half * hw;
        dw[slot(hi)] += half * hd;
        dw[slot(lo)] -= half * hd;
    };
    w[1] += h00;
    dw[1] += d00;
    w[2] += h01;
    dw[2] += d01;
    add_tangent(seg, h10, d10, &mut w, &mut dw);
    add_tangent(seg + 1, h11, d11, &mut w, &mut dw);

    let mut basis = SplineBasis::default();
    for s in 0..4 {
        // slot 0 is seg-1, which does not exist when seg == 0
        let idx = (seg + s).saturating_sub(1);
        basis.index[s] = idx.min(last);
        basis.weight[s] = w[s];
        basis.weight_dt[s] = if clamped { 0.0 } else { dw[s] * ts_scale };
    }
    basis
}

/// Hermite-spline position at frame time `t`.
pub fn spline_eval(ctrl: &ControlPoints, t: f64, n_frames: usize) -> Vector3<f64> {
    let b = spline_basis(ctrl.len(), t, n_frames);
    let mut out = Vector3::zeros();
    for s in 0..4 {
        if b.weight[s] != 0.0 {
            out += ctrl.points[b.index[s]] * b.weight[s];
        }
    }
    out
}

/// Velocity `dS/dt` in world units per frame.
pub fn spline_velocity(ctrl: &ControlPoints, t: f64, n_frames: usize) -> Vector3<f64> {
    let b = spline_basis(ctrl.len(), t, n_frames);
    let mut out = Vector3::zeros();
    for s in 0..4 {
        out += ctrl.points[b.index[s]] * b.weight_dt[s];
    }
    out
}

/// Dynamic Gaussians get their mean from the spline; static ones pass through.
pub fn gaussian_at_time(
    g: &Gaussian,
    ctrl: Option<&ControlPoints>,
    t: f64,
    n_frames: usize,
) -> Result<Gaussian, SceneError> {
    match g.kind {
        GaussianKind::Static => Ok(*g),
        GaussianKind::Dynamic => {
            let ctrl = ctrl.ok_or(SceneError::MissingControlPoints)?;
            let mut out = *g;
            out.mean = spline_eval(ctrl, t, n_frames);
            Ok(out)
        }
    }
}

/// Rotation matrix of a (not necessarily unit) quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Backpropagates `dL/dR` through normalization and `quat_to_matrix`.
pub fn quat_to_matrix_backward(q: &[f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let g = |r: usize, c: usize| d_r[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let du = [dw, dx, dy, dz];
    let dot: f64 = du.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (du[i] - u[i] * dot) / n;
    }
    out
}

/// `Sigma = R S S^T R^T`.
pub fn covariance_3d(g: &Gaussian) -> Matrix3<f64> {
    let m = quat_to_matrix(&g.rot_quat) * Matrix3::from_diagonal(&g.scale());
    m * m.transpose()
}

/// Gradients of `covariance_3d` with respect to the quaternion and log-scales.
pub fn covariance_3d_backward(g: &Gaussian, d_sigma: &Matrix3<f64>) -> ([f64; 4], Vector3<f64>) {
    let r = quat_to_matrix(&g.rot_quat);
    let s = g.scale();
    let m = r * Matrix3::from_diagonal(&s);
    let d_m = (d_sigma + d_sigma.transpose()) * m;
    let rt_dm = r.transpose() * d_m;
    let d_log_scale = Vector3::new(rt_dm[(0, 0)] * s.x, rt_dm[(1, 1)] * s.y, rt_dm[(2, 2)] * s.z);
    let d_r = d_m * Matrix3::from_diagonal(&s);
    (quat_to_matrix_backward(&g.rot_quat, &d_r), d_log_scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicGaussian {
    pub gaussian: Gaussian,
    pub control: ControlPoints,
}

/// Static and spline-deformed dynamic Gaussians sharing one camera model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneModel {
    pub statics: Vec<Gaussian>,
    pub dynamics: Vec<DynamicGaussian>,
    pub intrinsics: Intrinsics,
    pub n_frames: usize,
}

impl SceneModel {
    pub fn new(
        statics: Vec<Gaussian>,
        dynamics: Vec<DynamicGaussian>,
        intrinsics: Intrinsics,
        n_frames: usize,
    ) -> Result<Self, SceneError> {
        if statics.is_empty() {
            return Err(SceneError::NoStaticGaussians);
        }
        if n_frames < 3 {
            return Err(SceneError::TooFewFrames(n_frames));
        }
        Ok(Self::unchecked(statics, dynamics, intrinsics, n_frames))
    }

    /// Builds a scene without the static-count and frame-count checks, for
    /// rendering-only uses such as ground-truth layers.
    pub fn unchecked(
        statics: Vec<Gaussian>,
        dynamics: Vec<DynamicGaussian>,
        intrinsics: Intrinsics,
        n_frames: usize,
    ) -> Self {
        Self {
            statics,
            dynamics,
            intrinsics,
            n_frames,
        }
    }

    pub fn len(&self) -> usize {
        self.statics.len() + self.dynamics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All Gaussians evaluated at time `t`, statics first.
    pub fn gaussians_at(&self, t: f64) -> Vec<Gaussian> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.statics.iter().copied());
        for d in &self.dynamics {
            let mut g = d.gaussian;
            g.mean = spline_eval(&d.control, t, self.n_frames);
            out.push(g);
        }
        out
    }
}
