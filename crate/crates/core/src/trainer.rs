//! Per-scene optimization: latent trajectory, latent exposure, blurry
//! re-rendering, L1 photometric and depth losses, and Adam updates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blce::{blur_score, Blce, BlceConfig, BlceError, BlceParams, LatentMode, LatentTrajectory};
use crate::blursynth::{render_blurry_traced, BlurRenderResult, Dataset, SynthError};
use crate::geometry::{Intrinsics, Pose};
use crate::grad::{write_f64_le, read_f64_le, Adam, AdamConfig, ParamError, ParamStore};
use crate::image::Image;
use crate::io::{self, IoError};
use crate::lcee::{
    estimate_exposure, latent_timestamps, timestamp_offsets, travel_direction, LatentTimestamps, LceeError, NeighborSpan,
};
use crate::raster::{render, RenderAdjoint, RenderedImage, SceneGrads};
use crate::scene::{sigmoid, ControlPoints, DynamicGaussian, Gaussian, GaussianKind, SceneModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("image shapes differ")]
    ShapeMismatch,
    #[error("no valid pixels under the mask")]
    EmptyMask,
    #[error("diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Blce(#[from] BlceError),
    #[error(transparent)]
    Lcee(#[from] LceeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Fs(#[from] std::io::Error),
}

/// How the latent exposure of each frame is obtained after the warm-up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureMode {
    Lcee,
    Fixed(f64),
    /// `softplus(raw_t)` with one free parameter per frame.
    Learnable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_iters: usize,
    pub lcee_start: usize,
    pub n_latent: usize,
    pub crop: usize,
    pub lambda_rgb: f64,
    pub lambda_depth: f64,
    pub n_ctrl: usize,
    pub seed: u64,
    pub lr_net: f64,
    /// Multiplied by the scene extent.
    pub lr_mean: f64,
    pub lr_rot: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub lr_exposure: f64,
    pub exposure: ExposureMode,
    pub latent_mode: LatentMode,
    pub init_stride: usize,
    pub init_opacity: f64,
    /// Initial standard deviation in units of the seeding stride.
    pub init_scale: f64,
    pub epsilon: f64,
    pub max_t_hat: f64,
    pub max_screw: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_iters: 10_000,
            lcee_start: 2_000,
            n_latent: 9,
            crop: 20,
            lambda_rgb: 1.0,
            lambda_depth: 0.2,
            n_ctrl: 12,
            seed: 0,
            lr_net: 1e-3,
            lr_mean: 1.6e-4,
            lr_rot: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            lr_exposure: 1e-2,
            exposure: ExposureMode::Lcee,
            latent_mode: LatentMode::BlurAdaptive,
            init_stride: 2,
            init_opacity: 0.9,
            init_scale: 0.4,
            epsilon: crate::lcee::DEFAULT_EPSILON,
            max_t_hat: 10.0,
            max_screw: crate::geometry::DEFAULT_MAX_SCREW,
        }
    }
}

impl TrainConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut c = Self::default();
        let mut fixed = None;
        let mut learnable = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| TrainError::Config { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            fn num<T: FromStr>(v: &str) -> Result<T, String> {
                v.parse().map_err(|_| format!("cannot parse `{v}`"))
            }
            let r: Result<(), String> = (|| {
                match key {
                    "n_iters" => c.n_iters = num(value)?,
                    "lcee_start" => c.lcee_start = num(value)?,
                    "n_latent" => c.n_latent = num(value)?,
                    "crop" | "s" => c.crop = num(value)?,
                    "lambda_rgb" => c.lambda_rgb = num(value)?,
                    "lambda_depth" => c.lambda_depth = num(value)?,
                    "n_ctrl" => c.n_ctrl = num(value)?,
                    "seed" => c.seed = num(value)?,
                    "lr_net" => c.lr_net = num(value)?,
                    "lr_mean" => c.lr_mean = num(value)?,
                    "lr_rot" => c.lr_rot = num(value)?,
                    "lr_scale" => c.lr_scale = num(value)?,
                    "lr_opacity" => c.lr_opacity = num(value)?,
                    "lr_color" => c.lr_color = num(value)?,
                    "lr_exposure" => c.lr_exposure = num(value)?,
                    "init_stride" => c.init_stride = num(value)?,
                    "init_opacity" => c.init_opacity = num(value)?,
                    "init_scale" => c.init_scale = num(value)?,
                    "epsilon" => c.epsilon = num(value)?,
                    "max_t_hat" => c.max_t_hat = num(value)?,
                    "max_screw" => c.max_screw = num(value)?,
                    "fixed_exposure" => fixed = Some(num::<f64>(value)?),
                    "learnable_exposure" => learnable = num(value)?,
                    "latent_mode" => c.latent_mode = value.parse().map_err(|e: BlceError| e.to_string())?,
                    other => return Err(format!("unknown key `{other}`")),
                }
                Ok(())
            })();
            r.map_err(err)?;
        }
        c.exposure = match (fixed, learnable) {
            (Some(_), true) => {
                return Err(TrainError::InvalidConfig(
                    "fixed_exposure and learnable_exposure are mutually exclusive".into(),
                ))
            }
            (Some(v), false) => ExposureMode::Fixed(v),
            (None, true) => ExposureMode::Learnable,
            (None, false) => ExposureMode::Lcee,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.n_latent < 2 || self.n_ctrl < 4 || self.crop == 0 || self.init_stride == 0 {
            return bad("counts must be positive (n_latent >= 2, n_ctrl >= 4)");
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0 && self.init_scale > 0.0) {
            return bad("init_opacity must lie in (0, 1) and init_scale must be positive");
        }
        if !(self.lambda_rgb >= 0.0 && self.lambda_depth >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if let ExposureMode::Fixed(v) = self.exposure {
            if !(v >= 0.0 && v.is_finite()) {
                return bad("fixed_exposure must be finite and non-negative");
            }
        }
        Ok(())
    }

    fn blce_config(&self) -> BlceConfig {
        BlceConfig {
            n_latent: self.n_latent,
            max_screw: self.max_screw,
            mode: self.latent_mode,
            ..BlceConfig::default()
        }
    }
}

/// Mean absolute difference over all entries.
pub fn loss_rgb(rendered: &Image, observed: &Image) -> Result<f64, TrainError> {
    if !rendered.same_shape(observed) {
        return Err(TrainError::ShapeMismatch);
    }
    let s: f64 = rendered.data.iter().zip(&observed.data).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / rendered.data.len() as f64)
}

/// Mean absolute difference over pixels where `valid` is positive.
pub fn loss_depth(rendered: &Image, gt: &Image, valid: &Image) -> Result<f64, TrainError> {
    if !rendered.same_shape(gt) || rendered.pixel_count() != valid.pixel_count() {
        return Err(TrainError::ShapeMismatch);
    }
    let (mut s, mut n) = (0.0, 0usize);
    for ((r, g), v) in rendered.data.iter().zip(&gt.data).zip(&valid.data) {
        if *v > 0.0 {
            s += (r - g).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok(s / n as f64)
}

/// Pixels with rendered alpha above one half and a finite reference depth.
pub fn depth_mask(alpha: &Image, gt: &Image) -> Image {
    let data = alpha
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, g)| if *a > 0.5 && g.is_finite() { 1.0 } else { 0.0 })
        .collect();
    Image::from_data(alpha.width, alpha.height, 1, data)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub frame: usize,
    pub l_rgb: f64,
    pub l_depth: f64,
    pub total: f64,
    pub beta: f64,
    pub t_hat: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub n_static: usize,
    pub n_dynamic: usize,
    pub n_ctrl: usize,
    pub n_frames: usize,
}

const STATIC: [&str; 5] = ["static.mean", "static.rot", "static.scale", "static.opacity", "static.color"];
const DYNAMIC: [&str; 5] = ["dynamic.control", "dynamic.rot", "dynamic.scale", "dynamic.opacity", "dynamic.color"];
const NETS: [&str; 5] = ["net.feature", "net.encoder", "net.field", "net.decoder", "net.spline"];
const EXPOSURE: &str = "exposure.raw";

/// Packs Gaussians, control points, networks and exposure parameters into
/// one store with named slices.
pub fn build_store(
    statics: &[Gaussian],
    dynamics: &[DynamicGaussian],
    nets: &BlceParams,
    exposure_raw: Vec<f64>,
) -> Result<ParamStore, ParamError> {
    let mut s = ParamStore::new();
    let flat3 = |v: &mut Vec<f64>, x: &Vector3<f64>| v.extend_from_slice(x.as_slice());
    let mut cols: [Vec<f64>; 5] = Default::default();
    for g in statics {
        flat3(&mut cols[0], &g.mean);
        cols[1].extend_from_slice(&g.rot_quat);
        flat3(&mut cols[2], &g.log_scale);
        cols[3].push(g.logit_opacity);
        flat3(&mut cols[4], &g.color);
    }
    for (name, c) in STATIC.iter().zip(cols) {
        s.add(name, c)?;
    }
    let mut cols: [Vec<f64>; 5] = Default::default();
    for d in dynamics {
        for p in d.control.points() {
            flat3(&mut cols[0], p);
        }
        let g = &d.gaussian;
        cols[1].extend_from_slice(&g.rot_quat);
        flat3(&mut cols[2], &g.log_scale);
        cols[3].push(g.logit_opacity);
        flat3(&mut cols[4], &g.color);
    }
    for (name, c) in DYNAMIC.iter().zip(cols) {
        s.add(name, c)?;
    }
    let net_vals = [&nets.feature, &nets.encoder, &nets.field, &nets.decoder, &nets.spline];
    for (name, v) in NETS.iter().zip(net_vals) {
        s.add(name, v.clone())?;
    }
    s.add(EXPOSURE, exposure_raw)?;
    Ok(s)
}

fn v3(s: &[f64], i: usize) -> Vector3<f64> {
    Vector3::new(s[3 * i], s[3 * i + 1], s[3 * i + 2])
}

fn q4(s: &[f64], i: usize) -> [f64; 4] {
    [s[4 * i], s[4 * i + 1], s[4 * i + 2], s[4 * i + 3]]
}

/// Rebuilds the scene from the store.
pub fn scene_from_store(store: &ParamStore, layout: &SceneLayout, intr: &Intrinsics) -> SceneModel {
    let g = |n: &str| store.get(n).expect("layout slice");
    let [mean, rot, scale, op, col] = STATIC.map(g);
    let statics = (0..layout.n_static)
        .map(|i| Gaussian {
            mean: v3(mean, i),
            rot_quat: q4(rot, i),
            log_scale: v3(scale, i),
            logit_opacity: op[i],
            color: v3(col, i),
            kind: GaussianKind::Static,
        })
        .collect();
    let [ctrl, rot, scale, op, col] = DYNAMIC.map(g);
    let dynamics = (0..layout.n_dynamic)
        .map(|i| DynamicGaussian {
            gaussian: Gaussian {
                mean: v3(ctrl, i * layout.n_ctrl),
                rot_quat: q4(rot, i),
                log_scale: v3(scale, i),
                logit_opacity: op[i],
                color: v3(col, i),
                kind: GaussianKind::Dynamic,
            },
            control: ControlPoints::new((0..layout.n_ctrl).map(|j| v3(ctrl, i * layout.n_ctrl + j)).collect())
                .expect("control point count"),
        })
        .collect();
    SceneModel::unchecked(statics, dynamics, *intr, layout.n_frames)
}

pub fn nets_from_store(store: &ParamStore) -> BlceParams {
    let g = |n: &str| store.get(n).expect("layout slice").to_vec();
    BlceParams {
        feature: g(NETS[0]),
        encoder: g(NETS[1]),
        field: g(NETS[2]),
        decoder: g(NETS[3]),
        spline: g(NETS[4]),
    }
}

/// Adds scene and network gradients into `store.grads`.
pub fn scatter_grads(store: &mut ParamStore, layout: &SceneLayout, sg: &SceneGrads, ng: &BlceParams) {
    let add = |store: &mut ParamStore, name: &str, f: &mut dyn FnMut(&mut [f64])| {
        f(store.grad_mut(name).expect("layout slice"));
    };
    add(store, STATIC[0], &mut |d| {
        for (i, g) in sg.statics.iter().enumerate() {
            for k in 0..3 {
                d[3 * i + k] += g.mean[k];
            }
        }
    });
    let attrs = |store: &mut ParamStore, names: &[&str], grads: &[crate::raster::GaussianGrad]| {
        add(store, names[1], &mut |d| {
            for (i, g) in grads.iter().enumerate() {
                for k in 0..4 {
                    d[4 * i + k] += g.rot_quat[k];
                }
            }
        });
        add(store, names[2], &mut |d| {
            for (i, g) in grads.iter().enumerate() {
                for k in 0..3 {
                    d[3 * i + k] += g.log_scale[k];
                }
            }
        });
        add(store, names[3], &mut |d| {
            for (i, g) in grads.iter().enumerate() {
                d[i] += g.logit_opacity;
            }
        });
        add(store, names[4], &mut |d| {
            for (i, g) in grads.iter().enumerate() {
                for k in 0..3 {
                    d[3 * i + k] += g.color[k];
                }
            }
        });
    };
    attrs(store, &STATIC, &sg.statics);
    attrs(store, &DYNAMIC, &sg.dynamics);
    add(store, DYNAMIC[0], &mut |d| {
        for (i, pts) in sg.control.iter().enumerate() {
            for (j, p) in pts.iter().enumerate() {
                for k in 0..3 {
                    d[3 * (i * layout.n_ctrl + j) + k] += p[k];
                }
            }
        }
    });
    let nets = [&ng.feature, &ng.encoder, &ng.field, &ng.decoder, &ng.spline];
    for (name, v) in NETS.iter().zip(nets) {
        add(store, name, &mut |d| {
            for (a, b) in d.iter_mut().zip(v.iter()) {
                *a += b;
            }
        });
    }
}

/// Serializable part of the trainer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub config: TrainConfig,
    pub layout: SceneLayout,
    pub intrinsics: Intrinsics,
    pub poses: Vec<[f64; 12]>,
    pub betas: Vec<f64>,
    pub t_hat: Vec<f64>,
    pub iteration: usize,
    pub adam_step: u64,
    pub extent: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub layout: SceneLayout,
    pub intrinsics: Intrinsics,
    pub poses: Vec<Pose>,
    pub betas: Vec<f64>,
    /// Most recent exposure used for each frame.
    pub t_hat: Vec<f64>,
    pub store: ParamStore,
    pub adam: Adam,
    pub blce: Blce,
    pub iteration: usize,
    pub extent: f64,
    /// Number of exposure estimates evaluated so far.
    pub lcee_calls: usize,
}

/// Per-iteration forward state kept for the backward pass.
pub struct StepForward {
    pub scene: SceneModel,
    pub nets: BlceParams,
    pub render: BlurRenderResult,
    pub t_hat: f64,
    pub report: LossReport,
    /// `-1.0` when the timestamps were laid out against the latent index.
    pub direction: f64,
    fwd: crate::blce::BlceForward,
    renders: Vec<crate::raster::SceneRender>,
}

impl Trainer {
    /// Initializes Gaussians by back-projecting reference depth maps.
    pub fn new(dataset: &Dataset, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let n_frames = dataset.n_frames();
        if n_frames < 3 {
            return Err(TrainError::Dataset(format!("need at least 3 frames, got {n_frames}")));
        }
        let intr = dataset.manifest.intrinsics;
        let poses = dataset.poses();
        let betas = dataset
            .frames
            .iter()
            .enumerate()
            .map(|(t, f)| blur_score(&f.blurry, config.crop, t).map(|s| s.beta))
            .collect::<Result<Vec<_>, _>>()?;
        let (statics, dynamics) = init_gaussians(dataset, &poses, &config)?;
        if statics.is_empty() {
            return Err(TrainError::Dataset("no static pixels to initialize from".into()));
        }
        let blce = Blce::new(config.blce_config())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let nets = blce.init(&mut rng, n_frames);
        let raw0 = (0.5f64.exp() - 1.0).ln();
        let store = build_store(&statics, &dynamics, &nets, vec![raw0; n_frames])?;
        let centroid = poses.iter().map(|p| p.translation).sum::<Vector3<f64>>() / n_frames as f64;
        let extent = statics.iter().map(|g| (g.mean - centroid).norm()).sum::<f64>() / statics.len() as f64;
        let layout = SceneLayout {
            n_static: statics.len(),
            n_dynamic: dynamics.len(),
            n_ctrl: config.n_ctrl,
            n_frames,
        };
        let adam = make_adam(&config, store.len(), extent);
        Ok(Self {
            layout,
            intrinsics: intr,
            poses,
            betas,
            t_hat: vec![0.0; n_frames],
            store,
            adam,
            blce,
            iteration: 0,
            extent,
            lcee_calls: 0,
            config,
        })
    }

    pub fn scene(&self) -> SceneModel {
        scene_from_store(&self.store, &self.layout, &self.intrinsics)
    }

    pub fn nets(&self) -> BlceParams {
        nets_from_store(&self.store)
    }

    /// Frame visited at `iteration`: epochs are seeded shuffles of all frames.
    pub fn frame_for(&self, iteration: usize) -> usize {
        epoch_order(self.config.seed, iteration / self.layout.n_frames, self.layout.n_frames)
            [iteration % self.layout.n_frames]
    }

    pub fn latent_trajectory(&self, t: usize) -> LatentTrajectory {
        self.blce.forward(&self.nets(), &self.poses[t], self.betas[t], t).trajectory
    }

    /// Exposure for frame `t` at the current iteration.
    fn exposure_for(
        &mut self,
        t: usize,
        traj: &LatentTrajectory,
        scene: &SceneModel,
    ) -> Result<f64, TrainError> {
        if self.iteration < self.config.lcee_start {
            return Ok(0.0);
        }
        let v = match self.config.exposure {
            ExposureMode::Fixed(v) => v,
            ExposureMode::Learnable => softplus(self.store.get(EXPOSURE)?[t]),
            ExposureMode::Lcee => {
                self.lcee_calls += 1;
                let span = NeighborSpan::for_frame(&self.poses, t)?;
                let means: Vec<Vector3<f64>> = scene.statics.iter().map(|g| g.mean).collect();
                match estimate_exposure(traj, &span, &means, &self.intrinsics, self.config.epsilon) {
                    Ok(e) => e.t_hat,
                    Err(LceeError::NoUsableStatics) => {
                        log::warn!("frame {t}: no static Gaussian visible in all four poses, keeping previous exposure");
                        self.t_hat[t]
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        if !v.is_finite() || v > self.config.max_t_hat {
            return Err(TrainError::Diverged {
                iteration: self.iteration,
                reason: format!("latent exposure {v} for frame {t}"),
            });
        }
        Ok(v)
    }

    /// Renders frame `t` through the full latent model and evaluates the loss.
    pub fn forward(&mut self, dataset: &Dataset, t: usize) -> Result<StepForward, TrainError> {
        let scene = self.scene();
        let nets = self.nets();
        let fwd = self.blce.forward(&nets, &self.poses[t], self.betas[t], t);
        let t_hat = self.exposure_for(t, &fwd.trajectory, &scene)?;
        let direction = self.direction(t, &fwd.trajectory, &scene, t_hat);
        let taus = latent_timestamps(t as f64, direction * t_hat, self.config.n_latent);
        let (render, renders) = render_blurry_traced(&scene, &fwd.trajectory, &taus)?;
        let frame = &dataset.frames[t];
        let l_rgb = loss_rgb(&render.blurry.color, &frame.blurry)?;
        let mask = depth_mask(&render.blurry.alpha, &frame.depth);
        let l_depth = match loss_depth(&render.blurry.depth, &frame.depth, &mask) {
            Ok(v) => v,
            Err(TrainError::EmptyMask) => 0.0,
            Err(e) => return Err(e),
        };
        let total = self.config.lambda_rgb * l_rgb + self.config.lambda_depth * l_depth;
        if !total.is_finite() {
            return Err(TrainError::Diverged {
                iteration: self.iteration,
                reason: "loss is not finite".into(),
            });
        }
        let report = LossReport {
            iteration: self.iteration,
            frame: t,
            l_rgb,
            l_depth,
            total,
            beta: self.betas[t],
            t_hat,
        };
        Ok(StepForward {
            scene,
            nets,
            render,
            t_hat,
            report,
            fwd,
            renders,
            direction,
        })
    }

    /// Which way the latent poses of frame `t` run in time; the timestamps
    /// are laid out in that order.
    fn direction(&self, t: usize, traj: &LatentTrajectory, scene: &SceneModel, t_hat: f64) -> f64 {
        if t_hat == 0.0 {
            return 1.0;
        }
        let Ok(span) = NeighborSpan::for_frame(&self.poses, t) else {
            return 1.0;
        };
        let means: Vec<Vector3<f64>> = scene.statics.iter().map(|g| g.mean).collect();
        travel_direction(traj, &span, &means, &self.intrinsics)
    }

    /// Latent timestamps of frame `t` for the current model and exposure snapshot.
    pub fn timestamps(&self, t: usize, traj: &LatentTrajectory) -> LatentTimestamps {
        let d = self.direction(t, traj, &self.scene(), self.t_hat[t]);
        latent_timestamps(t as f64, d * self.t_hat[t], self.config.n_latent)
    }

    /// Accumulates the gradient of the total loss into `store.grads`.
    pub fn backward(&mut self, dataset: &Dataset, t: usize, sf: &StepForward) {
        let frame = &dataset.frames[t];
        let n_l = self.config.n_latent as f64;
        let b = &sf.render.blurry;
        let n_rgb = b.color.data.len() as f64;
        let w_rgb = self.config.lambda_rgb / (n_rgb * n_l);
        let d_color: Vec<f64> = b.color.data.iter().zip(&frame.blurry.data).map(|(r, o)| w_rgb * sign(r - o)).collect();
        let mask = depth_mask(&b.alpha, &frame.depth);
        let n_valid = mask.data.iter().filter(|&&v| v > 0.0).count();
        let depth_adj = (n_valid > 0 && self.config.lambda_depth > 0.0).then(|| {
            let w = self.config.lambda_depth / (n_valid as f64 * n_l);
            let data = b
                .depth
                .data
                .iter()
                .zip(&frame.depth.data)
                .zip(&mask.data)
                .map(|((r, g), m)| if *m > 0.0 { w * sign(r - g) } else { 0.0 })
                .collect();
            Image::from_data(b.depth.width, b.depth.height, 1, data)
        });
        let adjoint = RenderAdjoint {
            color: Image::from_data(b.color.width, b.color.height, 3, d_color),
            depth: depth_adj,
            alpha: None,
        };

        let mut total = SceneGrads::zeros(&sf.scene);
        let mut d_poses = Vec::with_capacity(sf.renders.len());
        let offsets = timestamp_offsets(self.config.n_latent);
        let mut d_t_hat = 0.0;
        for (k, r) in sf.renders.iter().enumerate() {
            let g = r.backward(&sf.scene, &adjoint);
            d_t_hat += g.time * offsets[k] * sf.direction;
            d_poses.push(g.pose);
            total.add_assign(&g);
        }
        let ng = self.blce.backward(&sf.nets, &sf.fwd, &d_poses);
        scatter_grads(&mut self.store, &self.layout, &total, &ng);
        if self.config.exposure == ExposureMode::Learnable && self.iteration >= self.config.lcee_start {
            let raw = self.store.get(EXPOSURE).expect("exposure slice")[t];
            self.store.grad_mut(EXPOSURE).expect("exposure slice")[t] += d_t_hat * sigmoid(raw);
        }
    }

    /// One optimization step on frame `t`.
    pub fn step(&mut self, dataset: &Dataset, t: usize) -> Result<LossReport, TrainError> {
        self.store.zero_grads();
        let sf = self.forward(dataset, t)?;
        self.backward(dataset, t, &sf);
        self.adam.step(&mut self.store);
        self.project_params();
        self.t_hat[t] = sf.t_hat;
        self.iteration += 1;
        Ok(sf.report)
    }

    /// Keeps colors in `[0, 1]` and quaternions at unit length.
    fn project_params(&mut self) {
        for name in [STATIC[4], DYNAMIC[4]] {
            for v in self.store.get_mut(name).expect("slice") {
                *v = v.clamp(0.0, 1.0);
            }
        }
        for name in [STATIC[1], DYNAMIC[1]] {
            for q in self.store.get_mut(name).expect("slice").chunks_exact_mut(4) {
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    q.iter_mut().for_each(|v| *v /= n);
                } else {
                    q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
                }
            }
        }
    }

    /// Runs until `config.n_iters`, calling `on_step` after every iteration.
    pub fn train(
        &mut self,
        dataset: &Dataset,
        mut on_step: impl FnMut(&Trainer, &LossReport),
    ) -> Result<(), TrainError> {
        while self.iteration < self.config.n_iters {
            let t = self.frame_for(self.iteration);
            let r = self.step(dataset, t)?;
            on_step(self, &r);
        }
        Ok(())
    }

    pub fn mean_t_hat(&self) -> f64 {
        self.t_hat.iter().sum::<f64>() / self.t_hat.len() as f64
    }

    /// Exposure of every frame under the current parameters, without
    /// advancing the iteration counter.
    pub fn current_exposures(&mut self) -> Result<Vec<f64>, TrainError> {
        let scene = self.scene();
        let calls = self.lcee_calls;
        let out = (0..self.layout.n_frames)
            .map(|t| {
                let traj = self.latent_trajectory(t);
                self.exposure_for(t, &traj, &scene)
            })
            .collect();
        self.lcee_calls = calls;
        out
    }

    /// Sharp render at time `t` from `pose`.
    pub fn render_sharp(&self, pose: &Pose, t: f64) -> RenderedImage {
        render(&self.scene(), pose, t)
    }

    /// Re-rendered blurry frame `t` using the stored exposure snapshot.
    pub fn render_blurry(&self, t: usize) -> Result<BlurRenderResult, TrainError> {
        let traj = self.latent_trajectory(t);
        let taus = self.timestamps(t, &traj);
        Ok(crate::blursynth::render_blurry(&self.scene(), &traj, &taus)?)
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            config: self.config.clone(),
            layout: self.layout,
            intrinsics: self.intrinsics,
            poses: self.poses.iter().map(|p| p.to_rows()).collect(),
            betas: self.betas.clone(),
            t_hat: self.t_hat.clone(),
            iteration: self.iteration,
            adam_step: self.adam.step,
            extent: self.extent,
        }
    }

    /// Writes `params.bin`/`params.manifest`, Adam moments and `model.json`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        io::create_dir(dir)?;
        self.store.save(dir, "params")?;
        write_f64_le(&dir.join("adam_m.bin"), &self.adam.m)?;
        write_f64_le(&dir.join("adam_v.bin"), &self.adam.v)?;
        io::write_json(&self.info(), &dir.join("model.json"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let info: ModelInfo = io::read_json(&dir.join("model.json"))?;
        let store = ParamStore::load(dir, "params")?;
        let mut adam = make_adam(&info.config, store.len(), info.extent);
        adam.m = read_f64_le(&dir.join("adam_m.bin"))?;
        adam.v = read_f64_le(&dir.join("adam_v.bin"))?;
        adam.step = info.adam_step;
        if adam.m.len() != store.len() || adam.v.len() != store.len() {
            return Err(TrainError::Param(ParamError::Malformed("optimizer state size".into())));
        }
        Ok(Self {
            blce: Blce::new(info.config.blce_config())?,
            layout: info.layout,
            intrinsics: info.intrinsics,
            poses: info.poses.iter().map(Pose::from_rows).collect(),
            betas: info.betas,
            t_hat: info.t_hat,
            store,
            adam,
            iteration: info.iteration,
            extent: info.extent,
            lcee_calls: 0,
            config: info.config,
        })
    }
}

fn make_adam(config: &TrainConfig, n: usize, extent: f64) -> Adam {
    let mut adam = Adam::new(n, config.lr_net, AdamConfig::default());
    for (names, off) in [(&STATIC, 0), (&DYNAMIC, 0)] {
        let _ = off;
        adam.set_lr(names[0], config.lr_mean * extent);
        adam.set_lr(names[1], config.lr_rot);
        adam.set_lr(names[2], config.lr_scale);
        adam.set_lr(names[3], config.lr_opacity);
        adam.set_lr(names[4], config.lr_color);
    }
    for n in NETS {
        adam.set_lr(n, config.lr_net);
    }
    adam.set_lr(EXPOSURE, config.lr_exposure);
    adam
}

/// Frame order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n_frames: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n_frames).collect();
    order.shuffle(&mut rng);
    order
}

fn backproject(pose: &Pose, intr: &Intrinsics, x: f64, y: f64, depth: f64) -> Vector3<f64> {
    let cam = Vector3::new((x - intr.cx) / intr.fx * depth, (y - intr.cy) / intr.fy * depth, depth);
    pose.transform_point(&cam)
}

/// Static Gaussians from strided pixels of a few reference frames; dynamic
/// Gaussians from the masked pixels of the frame where the object is largest,
/// with control points following the back-projected mask centroid.
fn init_gaussians(
    dataset: &Dataset,
    poses: &[Pose],
    config: &TrainConfig,
) -> Result<(Vec<Gaussian>, Vec<DynamicGaussian>), TrainError> {
    let intr = &dataset.manifest.intrinsics;
    let n = dataset.n_frames();
    let stride = config.init_stride;
    let mut statics: Vec<Gaussian> = vec![];
    let off = stride / 2;
    let (gw, gh) = (intr.width.div_ceil(stride), intr.height.div_ceil(stride));
    for t in 0..n {
        let f = &dataset.frames[t];
        // cells already covered by Gaussians seeded from earlier frames
        let mut taken = vec![false; gw * gh];
        for g in &statics {
            if let Ok((px, _)) = crate::geometry::project(&poses[t], intr, &g.mean) {
                if intr.contains(&px) {
                    let (cx, cy) = (px.x.round() as usize / stride, px.y.round() as usize / stride);
                    if cx < gw && cy < gh {
                        taken[cy * gw + cx] = true;
                    }
                }
            }
        }
        for y in (off..intr.height).step_by(stride) {
            for x in (off..intr.width).step_by(stride) {
                let d = f.depth.get(x, y, 0);
                if !(d.is_finite() && d > 0.0) || f.mask.get(x, y, 0) > 0.5 || taken[(y / stride) * gw + x / stride] {
                    continue;
                }
                let mean = backproject(&poses[t], intr, x as f64, y as f64, d);
                let scale = config.init_scale * stride as f64 * d / intr.fx;
                let color = Vector3::new(f.blurry.get(x, y, 0), f.blurry.get(x, y, 1), f.blurry.get(x, y, 2));
                let g = Gaussian::isotropic(mean, scale, config.init_opacity, color);
                statics.push(g);
            }
        }
    }

    let areas: Vec<usize> = dataset
        .frames
        .iter()
        .map(|f| f.mask.data.iter().filter(|&&m| m > 0.5).count())
        .collect();
    let Some((r, &area)) = areas.iter().enumerate().max_by_key(|&(i, a)| (*a, std::cmp::Reverse(i))) else {
        return Ok((statics, vec![]));
    };
    if area == 0 {
        return Ok((statics, vec![]));
    }
    let centroids: Vec<Option<Vector3<f64>>> = (0..n)
        .map(|t| mask_centroid(&dataset.frames[t], &poses[t], intr))
        .collect();
    let c_ref = centroids[r].expect("reference frame has a mask");
    let track = |time: f64| -> Vector3<f64> {
        let lo = time.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let s = time - lo as f64;
        match (nearest_centroid(&centroids, lo), nearest_centroid(&centroids, hi)) {
            (Some(a), Some(b)) => a * (1.0 - s) + b * s,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => c_ref,
        }
    };
    let ctrl_times: Vec<f64> = (0..config.n_ctrl)
        .map(|j| j as f64 * (n - 1) as f64 / (config.n_ctrl - 1) as f64)
        .collect();
    let offsets: Vec<Vector3<f64>> = ctrl_times.iter().map(|&tc| track(tc) - c_ref).collect();

    let f = &dataset.frames[r];
    let dstride = stride.div_ceil(2).max(1);
    let mut dynamics = vec![];
    for y in (0..intr.height).step_by(dstride) {
        for x in (0..intr.width).step_by(dstride) {
            let d = f.depth.get(x, y, 0);
            if f.mask.get(x, y, 0) <= 0.5 || !(d.is_finite() && d > 0.0) {
                continue;
            }
            let mean = backproject(&poses[r], intr, x as f64, y as f64, d);
            let scale = config.init_scale * dstride as f64 * d / intr.fx;
            let color = Vector3::new(f.blurry.get(x, y, 0), f.blurry.get(x, y, 1), f.blurry.get(x, y, 2));
            let g = Gaussian::isotropic(mean, scale, config.init_opacity, color).with_kind(GaussianKind::Dynamic);
            let pts = offsets.iter().map(|o| mean + o).collect();
            dynamics.push(DynamicGaussian {
                gaussian: g,
                control: ControlPoints::new(pts).map_err(|e| TrainError::Dataset(e.to_string()))?,
            });
        }
    }
    Ok((statics, dynamics))
}

fn nearest_centroid(c: &[Option<Vector3<f64>>], t: usize) -> Option<Vector3<f64>> {
    (0..c.len())
        .flat_map(|d| [t.checked_sub(d), Some(t + d)])
        .flatten()
        .filter(|&i| i < c.len())
        .find_map(|i| c[i])
}

fn mask_centroid(f: &crate::blursynth::OracleFrame, pose: &Pose, intr: &Intrinsics) -> Option<Vector3<f64>> {
    let (mut sx, mut sy, mut sd, mut n) = (0.0, 0.0, 0.0, 0.0);
    for y in 0..intr.height {
        for x in 0..intr.width {
            if f.mask.get(x, y, 0) > 0.5 {
                sx += x as f64;
                sy += y as f64;
                sd += f.depth.get(x, y, 0);
                n += 1.0;
            }
        }
    }
    (n > 0.0).then(|| backproject(pose, intr, sx / n, sy / n, sd / n))
}

/// Comma-separated metrics log with one row per iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub text: String,
}

impl MetricsLog {
    pub const HEADER: &'static str = "iter,l_rgb,l_depth,total,mean_t_hat";

    pub fn new() -> Self {
        Self {
            text: format!("{}\n", Self::HEADER),
        }
    }

    pub fn push(&mut self, r: &LossReport, mean_t_hat: f64) {
        let _ = writeln!(self.text, "{},{},{},{},{}", r.iteration, r.l_rgb, r.l_depth, r.total, mean_t_hat);
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, &self.text)?;
        Ok(())
    }
}
