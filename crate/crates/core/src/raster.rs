//! CPU rasterizer for 3D Gaussians with an analytic backward pass.
//!
//! Splats are depth-sorted (ties broken by source index) and composited
//! front to back inside a 3-sigma box around each projected mean. The forward
//! pass records every (pixel, splat) contribution in blending order so the
//! backward pass can walk them in reverse without dividing by `1 - alpha`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::geometry::{Intrinsics, Pose, DEFAULT_NEAR};
use crate::image::Image;
use crate::scene::{covariance_3d, covariance_3d_backward, spline_basis, Gaussian, SceneModel};

/// Added to the projected covariance diagonal (pixels squared).
pub const COV2D_BLUR: f64 = 0.3;
/// Contributions weaker than this are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// A pixel stops accepting splats once its transmittance drops below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const BBOX_SIGMAS: f64 = 3.0;

/// A Gaussian after projection to the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub pixel_mean: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub source_index: usize,
}

/// Color, alpha-weighted depth and accumulated alpha over a black background.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub color: Image,
    pub depth: Image,
    pub alpha: Image,
}

impl RenderedImage {
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            color: Image::zeros(width, height, 3),
            depth: Image::zeros(width, height, 1),
            alpha: Image::zeros(width, height, 1),
        }
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    /// Elementwise mean of all three buffers.
    pub fn mean_of(images: &[RenderedImage]) -> RenderedImage {
        let c: Vec<&Image> = images.iter().map(|i| &i.color).collect();
        let d: Vec<&Image> = images.iter().map(|i| &i.depth).collect();
        let a: Vec<&Image> = images.iter().map(|i| &i.alpha).collect();
        RenderedImage {
            color: Image::mean_of(&c),
            depth: Image::mean_of(&d),
            alpha: Image::mean_of(&a),
        }
    }
}

#[derive(Clone, Debug)]
struct ProjectedSplat {
    splat: Splat2D,
    conic: [f64; 3],
    /// Inclusive pixel box `(x0, x1, y0, y1)`.
    bbox: [usize; 4],
    /// Quadratic form value beyond which alpha falls under `MIN_ALPHA`.
    q_max: f64,
    cam: Vector3<f64>,
    jac: Matrix2x3<f64>,
    cov_cam: Matrix3<f64>,
    cov_world: Matrix3<f64>,
}

fn project_full(
    g: &Gaussian,
    index: usize,
    w: &Matrix3<f64>,
    tw: &Vector3<f64>,
    intr: &Intrinsics,
) -> Option<ProjectedSplat> {
    let cam = w * g.mean + tw;
    if cam.z <= DEFAULT_NEAR {
        return None;
    }
    let (x, y, z) = (cam.x, cam.y, cam.z);
    let jac = Matrix2x3::new(
        intr.fx / z,
        0.0,
        -intr.fx * x / (z * z),
        0.0,
        intr.fy / z,
        -intr.fy * y / (z * z),
    );
    let cov_world = covariance_3d(g);
    let cov_cam = w * cov_world * w.transpose();
    let mut cov2d = jac * cov_cam * jac.transpose();
    cov2d[(0, 0)] += COV2D_BLUR;
    cov2d[(1, 1)] += COV2D_BLUR;
    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let radius = BBOX_SIGMAS * lambda_max.sqrt();
    let mean = Vector2::new(intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy);

    let (w_px, h_px) = (intr.width as f64, intr.height as f64);
    let x0 = (mean.x - radius).ceil().max(0.0);
    let x1 = (mean.x + radius).floor().min(w_px - 1.0);
    let y0 = (mean.y - radius).ceil().max(0.0);
    let y1 = (mean.y + radius).floor().min(h_px - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    let opacity = g.opacity();
    // alpha = opacity * exp(-q / 2) >= MIN_ALPHA  <=>  q <= 2 ln(opacity / MIN_ALPHA)
    let q_max = 2.0 * (opacity / MIN_ALPHA).ln();
    if q_max < 0.0 {
        return None;
    }
    Some(ProjectedSplat {
        splat: Splat2D {
            pixel_mean: mean,
            cov2d,
            depth: z,
            color: g.color,
            opacity,
            source_index: index,
        },
        conic,
        bbox: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
        q_max,
        cam,
        jac,
        cov_cam,
        cov_world,
    })
}

/// Projects one Gaussian; `None` when it is behind the near plane or its
/// footprint misses the image.
pub fn project_gaussian(g: &Gaussian, pose: &Pose, intr: &Intrinsics) -> Option<Splat2D> {
    let (w, tw) = pose.world_to_camera();
    project_full(g, 0, &w, &tw, intr).map(|p| p.splat)
}

#[derive(Clone, Copy, Debug)]
struct Contribution {
    pixel: u32,
    splat: u32,
    alpha: f64,
    trans: f64,
}

/// Everything the backward pass needs from one forward render.
#[derive(Clone, Debug)]
pub struct RenderTape {
    splats: Vec<ProjectedSplat>,
    entries: Vec<Contribution>,
    w2c: Matrix3<f64>,
    pose: Pose,
    intr: Intrinsics,
    n_gaussians: usize,
}

/// Upstream gradients on the rendered buffers.
#[derive(Clone, Debug)]
pub struct RenderAdjoint {
    pub color: Image,
    pub depth: Option<Image>,
    pub alpha: Option<Image>,
}

impl RenderAdjoint {
    pub fn color_only(color: Image) -> Self {
        Self {
            color,
            depth: None,
            alpha: None,
        }
    }
}

/// Gradient with respect to one Gaussian's attributes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vector3<f64>,
    pub rot_quat: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub logit_opacity: f64,
    pub color: Vector3<f64>,
}

impl GaussianGrad {
    pub fn add_assign(&mut self, o: &GaussianGrad) {
        self.mean += o.mean;
        for i in 0..4 {
            self.rot_quat[i] += o.rot_quat[i];
        }
        self.log_scale += o.log_scale;
        self.logit_opacity += o.logit_opacity;
        self.color += o.color;
    }
}

/// Gradient with respect to a camera-to-world pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseGrad {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseGrad {
    fn default() -> Self {
        Self {
            rotation: Matrix3::zeros(),
            translation: Vector3::zeros(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RasterGrads {
    pub gaussians: Vec<GaussianGrad>,
    pub pose: PoseGrad,
}

/// Renders a flat list of already time-evaluated Gaussians.
pub fn rasterize(gaussians: &[Gaussian], pose: &Pose, intr: &Intrinsics) -> RenderedImage {
    rasterize_impl(gaussians, pose, intr, false).0
}

/// Forward render that also records the tape for [`RenderTape::backward`].
pub fn rasterize_with_tape(
    gaussians: &[Gaussian],
    pose: &Pose,
    intr: &Intrinsics,
) -> (RenderedImage, RenderTape) {
    rasterize_impl(gaussians, pose, intr, true)
}

fn rasterize_impl(
    gaussians: &[Gaussian],
    pose: &Pose,
    intr: &Intrinsics,
    record: bool,
) -> (RenderedImage, RenderTape) {
    let (w, tw) = pose.world_to_camera();
    let mut splats: Vec<ProjectedSplat> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_full(g, i, &w, &tw, intr))
        .collect();
    splats.sort_by(|a, b| {
        a.splat
            .depth
            .total_cmp(&b.splat.depth)
            .then(a.splat.source_index.cmp(&b.splat.source_index))
    });

    let (width, height) = (intr.width, intr.height);
    let n_px = width * height;
    let mut color = vec![0.0; n_px * 3];
    let mut depth = vec![0.0; n_px];
    let mut trans = vec![1.0; n_px];
    let mut done = vec![false; n_px];
    let mut entries = Vec::new();

    for (si, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.bbox;
        let [ca, cb, cc] = s.conic;
        let (mx, my) = (s.splat.pixel_mean.x, s.splat.pixel_mean.y);
        for py in y0..=y1 {
            let dy = py as f64 - my;
            let row = py * width;
            for px in x0..=x1 {
                let p = row + px;
                if done[p] {
                    continue;
                }
                let dx = px as f64 - mx;
                let q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy;
                if q > s.q_max {
                    continue;
                }
                let alpha = s.splat.opacity * (-0.5 * q).exp();
                if alpha < MIN_ALPHA {
                    continue;
                }
                let t = trans[p];
                let wgt = alpha * t;
                color[p * 3] += wgt * s.splat.color.x;
                color[p * 3 + 1] += wgt * s.splat.color.y;
                color[p * 3 + 2] += wgt * s.splat.color.z;
                depth[p] += wgt * s.splat.depth;
                if record {
                    entries.push(Contribution {
                        pixel: p as u32,
                        splat: si as u32,
                        alpha,
                        trans: t,
                    });
                }
                let nt = t * (1.0 - alpha);
                trans[p] = nt;
                if nt < MIN_TRANSMITTANCE {
                    done[p] = true;
                }
            }
        }
    }

    let alpha = trans.iter().map(|t| 1.0 - t).collect();
    let image = RenderedImage {
        color: Image::from_data(width, height, 3, color),
        depth: Image::from_data(width, height, 1, depth),
        alpha: Image::from_data(width, height, 1, alpha),
    };
    let tape = RenderTape {
        splats: if record { splats } else { Vec::new() },
        entries,
        w2c: w,
        pose: *pose,
        intr: *intr,
        n_gaussians: gaussians.len(),
    };
    (image, tape)
}

#[derive(Clone, Copy, Default)]
struct SplatAccum {
    conic: [f64; 3],
    mean: [f64; 2],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

impl RenderTape {
    pub fn contribution_count(&self) -> usize {
        self.entries.len()
    }

    /// Gradients of `<adjoint, rendered>` with respect to the Gaussians that
    /// were rendered (same order as the input slice) and the camera pose.
    pub fn backward(&self, gaussians: &[Gaussian], adjoint: &RenderAdjoint) -> RasterGrads {
        assert_eq!(gaussians.len(), self.n_gaussians);
        let (width, height) = (self.intr.width, self.intr.height);
        let n_px = width * height;
        let g_color = &adjoint.color.data;
        let g_depth = adjoint.depth.as_ref().map(|d| &d.data);
        let g_alpha = adjoint.alpha.as_ref().map(|d| &d.data);

        // Suffix accumulators: what lies behind the current splat, normalized
        // by the transmittance just after it.
        let mut rest_color = vec![0.0; n_px * 3];
        let mut rest_depth = vec![0.0; n_px];
        let mut rest_alpha = vec![0.0; n_px];
        let mut acc = vec![SplatAccum::default(); self.splats.len()];

        for e in self.entries.iter().rev() {
            let p = e.pixel as usize;
            let s = &self.splats[e.splat as usize];
            let a = &mut acc[e.splat as usize];
            let (alpha, t) = (e.alpha, e.trans);
            let c = s.splat.color;
            let gc = [g_color[p * 3], g_color[p * 3 + 1], g_color[p * 3 + 2]];
            let gd = g_depth.map_or(0.0, |d| d[p]);
            let ga = g_alpha.map_or(0.0, |d| d[p]);
            let rc = [rest_color[p * 3], rest_color[p * 3 + 1], rest_color[p * 3 + 2]];

            let mut d_alpha = gc[0] * (c.x - rc[0]) + gc[1] * (c.y - rc[1]) + gc[2] * (c.z - rc[2]);
            d_alpha += gd * (s.splat.depth - rest_depth[p]);
            d_alpha += ga * (1.0 - rest_alpha[p]);
            d_alpha *= t;

            let w = alpha * t;
            a.color[0] += w * gc[0];
            a.color[1] += w * gc[1];
            a.color[2] += w * gc[2];
            a.depth += w * gd;

            // alpha = o exp(-q/2)
            a.opacity += d_alpha * alpha / s.splat.opacity;
            let d_q = -0.5 * alpha * d_alpha;
            let px = (p % width) as f64;
            let py = (p / width) as f64;
            let dx = px - s.splat.pixel_mean.x;
            let dy = py - s.splat.pixel_mean.y;
            let [ca, cb, cc] = s.conic;
            a.conic[0] += d_q * dx * dx;
            a.conic[1] += d_q * 2.0 * dx * dy;
            a.conic[2] += d_q * dy * dy;
            a.mean[0] -= d_q * (2.0 * ca * dx + 2.0 * cb * dy);
            a.mean[1] -= d_q * (2.0 * cb * dx + 2.0 * cc * dy);

            let keep = 1.0 - alpha;
            rest_color[p * 3] = c.x * alpha + keep * rc[0];
            rest_color[p * 3 + 1] = c.y * alpha + keep * rc[1];
            rest_color[p * 3 + 2] = c.z * alpha + keep * rc[2];
            rest_depth[p] = s.splat.depth * alpha + keep * rest_depth[p];
            rest_alpha[p] = alpha + keep * rest_alpha[p];
        }
        let _ = height;

        let w = &self.w2c;
        let mut grads = vec![GaussianGrad::default(); self.n_gaussians];
        let mut d_w = Matrix3::zeros();
        let mut d_tw = Vector3::zeros();
        let (fx, fy) = (self.intr.fx, self.intr.fy);

        for (s, a) in self.splats.iter().zip(&acc) {
            let gi = s.splat.source_index;
            let g = &gaussians[gi];
            let out = &mut grads[gi];
            out.color = Vector3::new(a.color[0], a.color[1], a.color[2]);
            let o = s.splat.opacity;
            out.logit_opacity = a.opacity * o * (1.0 - o);

            // conic = inverse(cov2d); gradient of the full symmetric matrix
            let q = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
            let g_q = Matrix2::new(a.conic[0], 0.5 * a.conic[1], 0.5 * a.conic[1], a.conic[2]);
            let g_cov2d = -(q * g_q * q);
            let g_jac = 2.0 * g_cov2d * s.jac * s.cov_cam;
            let g_cov_cam = s.jac.transpose() * g_cov2d * s.jac;
            let g_sigma = w.transpose() * g_cov_cam * w;
            d_w += 2.0 * g_cov_cam * w * s.cov_world;
            let (d_quat, d_ls) = covariance_3d_backward(g, &g_sigma);
            out.rot_quat = d_quat;
            out.log_scale = d_ls;

            let (x, y, z) = (s.cam.x, s.cam.y, s.cam.z);
            let (z2, z3) = (z * z, z * z * z);
            let mut d_cam = Vector3::zeros();
            // Jacobian entries
            d_cam.z += g_jac[(0, 0)] * (-fx / z2);
            d_cam.x += g_jac[(0, 2)] * (-fx / z2);
            d_cam.z += g_jac[(0, 2)] * (2.0 * fx * x / z3);
            d_cam.z += g_jac[(1, 1)] * (-fy / z2);
            d_cam.y += g_jac[(1, 2)] * (-fy / z2);
            d_cam.z += g_jac[(1, 2)] * (2.0 * fy * y / z3);
            // projected mean
            d_cam.x += a.mean[0] * fx / z;
            d_cam.z -= a.mean[0] * fx * x / z2;
            d_cam.y += a.mean[1] * fy / z;
            d_cam.z -= a.mean[1] * fy * y / z2;
            d_cam.z += a.depth;

            out.mean = w.transpose() * d_cam;
            d_w += d_cam * g.mean.transpose();
            d_tw += d_cam;
        }

        // w = R^T, tw = -R^T t
        let t_c = self.pose.translation;
        let d_w_total = d_w - d_tw * t_c.transpose();
        let pose = PoseGrad {
            rotation: d_w_total.transpose(),
            translation: -(self.pose.rotation * d_tw),
        };
        RasterGrads {
            gaussians: grads,
            pose,
        }
    }
}

/// Renders `scene` at time `t` from `pose`.
pub fn render(scene: &SceneModel, pose: &Pose, t: f64) -> RenderedImage {
    rasterize(&scene.gaussians_at(t), pose, &scene.intrinsics)
}

/// Gradients of a scene render, mapped back to scene parameters.
#[derive(Clone, Debug)]
pub struct SceneGrads {
    pub statics: Vec<GaussianGrad>,
    /// Attribute gradients of dynamic Gaussians; `mean` is the gradient with
    /// respect to the spline-evaluated mean at render time.
    pub dynamics: Vec<GaussianGrad>,
    pub control: Vec<Vec<Vector3<f64>>>,
    /// Derivative with respect to the render time (through the splines).
    pub time: f64,
    pub pose: PoseGrad,
}

impl SceneGrads {
    pub fn zeros(scene: &SceneModel) -> Self {
        Self {
            statics: vec![GaussianGrad::default(); scene.statics.len()],
            dynamics: vec![GaussianGrad::default(); scene.dynamics.len()],
            control: scene
                .dynamics
                .iter()
                .map(|d| vec![Vector3::zeros(); d.control.len()])
                .collect(),
            time: 0.0,
            pose: PoseGrad::default(),
        }
    }

    pub fn add_assign(&mut self, o: &SceneGrads) {
        for (a, b) in self.statics.iter_mut().zip(&o.statics) {
            a.add_assign(b);
        }
        for (a, b) in self.dynamics.iter_mut().zip(&o.dynamics) {
            a.add_assign(b);
        }
        for (a, b) in self.control.iter_mut().zip(&o.control) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.time += o.time;
        self.pose.rotation += o.pose.rotation;
        self.pose.translation += o.pose.translation;
    }
}

/// A scene render that can be differentiated later.
pub struct SceneRender {
    pub image: RenderedImage,
    tape: RenderTape,
    gaussians: Vec<Gaussian>,
    time: f64,
}

impl SceneRender {
    pub fn forward(scene: &SceneModel, pose: &Pose, t: f64) -> Self {
        let gaussians = scene.gaussians_at(t);
        let (image, tape) = rasterize_with_tape(&gaussians, pose, &scene.intrinsics);
        Self {
            image,
            tape,
            gaussians,
            time: t,
        }
    }

    pub fn backward(&self, scene: &SceneModel, adjoint: &RenderAdjoint) -> SceneGrads {
        let raster = self.tape.backward(&self.gaussians, adjoint);
        let n_st = scene.statics.len();
        let mut out = SceneGrads::zeros(scene);
        out.statics.copy_from_slice(&raster.gaussians[..n_st]);
        out.pose = raster.pose;
        for (i, d) in scene.dynamics.iter().enumerate() {
            let g = raster.gaussians[n_st + i];
            out.dynamics[i] = g;
            if g.mean == Vector3::zeros() {
                continue;
            }
            let basis = spline_basis(d.control.len(), self.time, scene.n_frames);
            let mut velocity = Vector3::zeros();
            for s in 0..4 {
                out.control[i][basis.index[s]] += g.mean * basis.weight[s];
                velocity += d.control.points()[basis.index[s]] * basis.weight_dt[s];
            }
            out.time += g.mean.dot(&velocity);
        }
        out
    }
}

/// Render plus the gradient of `<adjoint, color>` in one call.
pub fn render_with_grads(
    scene: &SceneModel,
    pose: &Pose,
    t: f64,
    loss_adjoint: &Image,
) -> (RenderedImage, SceneGrads) {
    let r = SceneRender::forward(scene, pose, t);
    let g = r.backward(scene, &RenderAdjoint::color_only(loss_adjoint.clone()));
    (r.image, g)
}
