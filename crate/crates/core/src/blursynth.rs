//! Blur formation by latent-frame averaging, the dense ground-truth blur
//! oracle, and the synthetic dataset generator.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blce::LatentTrajectory;
use crate::geometry::{screw_exp, Intrinsics, Pose, ScrewAxis};
use crate::image::Image;
use crate::io::{self, IoError};
use crate::lcee::LatentTimestamps;
use crate::raster::{rasterize, RenderedImage, SceneRender};
use crate::scene::{logit, Gaussian, GaussianKind, SceneModel};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{poses} latent poses but {taus} timestamps")]
    LengthMismatch { poses: usize, taus: usize },
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Debug)]
pub struct BlurRenderResult {
    pub blurry: RenderedImage,
    pub latents: Vec<RenderedImage>,
    pub timestamps: LatentTimestamps,
    pub trajectory: LatentTrajectory,
}

/// Renders every latent frame at its own pose and time and averages them.
pub fn render_blurry(
    scene: &SceneModel,
    traj: &LatentTrajectory,
    taus: &LatentTimestamps,
) -> Result<BlurRenderResult, SynthError> {
    render_blurry_traced(scene, traj, taus).map(|(r, _)| r)
}

/// [`render_blurry`] that also keeps the per-latent tapes for backprop.
pub fn render_blurry_traced(
    scene: &SceneModel,
    traj: &LatentTrajectory,
    taus: &LatentTimestamps,
) -> Result<(BlurRenderResult, Vec<SceneRender>), SynthError> {
    if traj.poses.len() != taus.taus.len() || traj.poses.is_empty() {
        return Err(SynthError::LengthMismatch {
            poses: traj.poses.len(),
            taus: taus.taus.len(),
        });
    }
    let renders: Vec<SceneRender> = traj
        .poses
        .iter()
        .zip(&taus.taus)
        .map(|(p, &t)| SceneRender::forward(scene, p, t))
        .collect();
    let latents: Vec<RenderedImage> = renders.iter().map(|r| r.image.clone()).collect();
    let result = BlurRenderResult {
        blurry: RenderedImage::mean_of(&latents),
        latents,
        timestamps: taus.clone(),
        trajectory: traj.clone(),
    };
    Ok((result, renders))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub position: [f64; 3],
    pub scale: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl BlobSpec {
    fn gaussian(&self, offset: Vector3<f64>, kind: GaussianKind) -> Gaussian {
        let mut g = Gaussian::isotropic(
            Vector3::from(self.position) + offset,
            self.scale,
            self.opacity,
            Vector3::from(self.color),
        );
        g.logit_opacity = logit(self.opacity);
        g.with_kind(kind)
    }
}

/// Camera shake: each translation and rotation component is a sinusoid of
/// frame time with a shared period and per-axis phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPathSpec {
    pub center: [f64; 3],
    pub amplitude: [f64; 3],
    pub phase: [f64; 3],
    pub rot_amplitude: [f64; 3],
    pub period: f64,
}

impl CameraPathSpec {
    pub fn pose(&self, t: f64) -> Pose {
        let w = 2.0 * PI * t / self.period;
        let tr = Vector3::from_fn(|i, _| self.center[i] + self.amplitude[i] * (w + self.phase[i]).sin());
        let rot = Vector3::from_fn(|i, _| self.rot_amplitude[i] * (w + self.phase[i] + 0.7).sin());
        let mut p = screw_exp(&ScrewAxis::new(rot, Vector3::zeros()));
        p.translation = tr;
        p
    }
}

/// A rigid cluster of blobs whose centre follows an ellipse in a plane of
/// constant depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicObjectSpec {
    pub center: [f64; 3],
    pub radius: [f64; 2],
    pub period: f64,
    pub phase: f64,
    /// Blob positions are offsets from the moving centre.
    pub blobs: Vec<BlobSpec>,
}

impl DynamicObjectSpec {
    pub fn center_at(&self, t: f64) -> Vector3<f64> {
        let a = 2.0 * PI * t / self.period + self.phase;
        Vector3::new(
            self.center[0] + self.radius[0] * a.cos(),
            self.center[1] + self.radius[1] * a.sin(),
            self.center[2],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub n_frames: usize,
    /// True exposure per frame, in inter-frame intervals.
    pub exposures: Vec<f64>,
    pub oversample: usize,
    pub statics: Vec<BlobSpec>,
    pub dynamic: DynamicObjectSpec,
    pub camera: CameraPathSpec,
}

/// Knobs of the generated presets.
#[derive(Clone, Debug)]
pub struct PresetParams {
    pub size: usize,
    pub n_frames: usize,
    pub exposures: Vec<f64>,
    pub backdrop_depth: f64,
    pub backdrop_spacing: f64,
    pub foreground: usize,
    pub camera_amplitude: [f64; 3],
    pub rot_amplitude: [f64; 3],
    pub camera_period: f64,
    pub object_radius: [f64; 2],
    pub object_period: f64,
}

impl SyntheticSceneSpec {
    pub fn preset(name: &str, seed: u64) -> Result<Self, SynthError> {
        Ok(Self::generate(&Self::preset_params(name)?, seed))
    }

    pub fn preset_params(name: &str) -> Result<PresetParams, SynthError> {
        let base = PresetParams {
            size: 64,
            n_frames: 24,
            exposures: vec![0.6; 24],
            backdrop_depth: 5.0,
            backdrop_spacing: 0.3,
            foreground: 6,
            camera_amplitude: [0.25, 0.18, 0.0],
            rot_amplitude: [0.2, 0.16, 0.04],
            camera_period: 8.0,
            object_radius: [0.5, 0.35],
            object_period: 12.0,
        };
        let params = match name {
            "shake" => base,
            "alternating" => PresetParams {
                exposures: (0..24).map(|i| if i % 2 == 0 { 0.3 } else { 0.8 }).collect(),
                ..base
            },
            "smoke" => PresetParams {
                size: 32,
                n_frames: 8,
                exposures: vec![0.6; 8],
                backdrop_spacing: 0.4,
                foreground: 3,
                ..base
            },
            other => return Err(SynthError::UnknownPreset(other.to_string())),
        };
        Ok(params)
    }

    pub fn generate(p: &PresetParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let focal = p.size as f64;
        let half = 0.5 * p.backdrop_depth;
        let sway = p.backdrop_depth * p.rot_amplitude[0].max(p.rot_amplitude[1]);
        let reach = half + p.camera_amplitude[0].max(p.camera_amplitude[1]) + sway + 0.6;
        // Splats that overlap on screen sit on separate depth layers so that the
        // shake never swaps their order, which would make the blur integrand jump.
        let n = (2.0 * reach / p.backdrop_spacing).ceil() as i64;
        let mut statics = vec![];
        for iy in 0..=n {
            for ix in 0..=n {
                let jitter = p.backdrop_spacing * 0.1;
                statics.push(BlobSpec {
                    position: [
                        -reach + ix as f64 * p.backdrop_spacing + rng.random_range(-jitter..jitter),
                        -reach + iy as f64 * p.backdrop_spacing + rng.random_range(-jitter..jitter),
                        p.backdrop_depth + 0.15 * ((ix + iy) % 2) as f64,
                    ],
                    scale: p.backdrop_spacing * rng.random_range(0.2..0.3),
                    opacity: 0.95,
                    color: random_color(&mut rng),
                });
            }
        }
        // opaque low-contrast layer behind the spots
        let base = 2.0 * p.backdrop_spacing;
        let m = (2.0 * reach / base).ceil() as i64;
        for iy in 0..=m {
            for ix in 0..=m {
                let g = rng.random_range(0.35..0.45);
                statics.push(BlobSpec {
                    position: [
                        -reach + ix as f64 * base,
                        -reach + iy as f64 * base,
                        p.backdrop_depth + 0.6 + 0.3 * ((ix + iy) % 2) as f64,
                    ],
                    scale: 0.6 * base,
                    opacity: 0.99,
                    color: [g, g, g + rng.random_range(-0.03..0.03)],
                });
            }
        }
        for i in 0..p.foreground {
            let z = 3.2 + 0.8 * i as f64 / p.foreground as f64;
            let lim = 0.35 * z;
            statics.push(BlobSpec {
                position: [rng.random_range(-lim..lim), rng.random_range(-lim..lim), z],
                scale: rng.random_range(0.1..0.16),
                opacity: 0.9,
                color: random_color(&mut rng),
            });
        }
        let obj_color = random_color(&mut rng).map(|c| if c < 0.5 { 0.5 * c } else { 0.5 + 0.5 * c });
        let blobs = (0..7)
            .map(|i| {
                let a = i as f64 * 2.0 * PI / 6.0;
                let r = if i == 0 { 0.0 } else { 0.16 };
                let tint = rng.random_range(-0.1..0.1);
                // alternate with the complementary colour so the object has inner edges
                let c = if i % 2 == 0 { obj_color } else { obj_color.map(|c| 1.0 - c) };
                BlobSpec {
                    position: [r * a.cos(), r * a.sin(), if i == 0 { -0.1 } else { 0.05 * i as f64 }],
                    scale: 0.08,
                    opacity: 0.95,
                    color: c.map(|c: f64| (c + tint).clamp(0.0, 1.0)),
                }
            })
            .collect();
        Self {
            width: p.size,
            height: p.size,
            focal,
            n_frames: p.n_frames,
            exposures: p.exposures.clone(),
            oversample: 64,
            statics,
            dynamic: DynamicObjectSpec {
                center: [0.0, 0.0, 2.6],
                radius: p.object_radius,
                period: p.object_period,
                phase: rng.random_range(0.0..2.0 * PI),
                blobs,
            },
            camera: CameraPathSpec {
                center: [0.0, 0.0, 0.0],
                amplitude: p.camera_amplitude,
                phase: [0.0, PI / 2.0, 0.0],
                rot_amplitude: p.rot_amplitude,
                period: p.camera_period,
            },
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.exposures.len() != self.n_frames {
            return bad("one exposure per frame required");
        }
        if self.exposures.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
            return bad("exposures must be finite and non-negative");
        }
        if self.oversample < 16 {
            return bad("oversampling factor must be at least 16");
        }
        if self.n_frames < 3 {
            return bad("at least three frames required");
        }
        if self.statics.is_empty() {
            return bad("at least one static blob required");
        }
        self.intrinsics().map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics, crate::geometry::GeometryError> {
        let c = |n: usize| (n as f64 - 1.0) / 2.0;
        Intrinsics::new(self.focal, self.focal, c(self.width), c(self.height), self.width, self.height)
    }

    pub fn camera_pose(&self, t: f64) -> Pose {
        self.camera.pose(t)
    }

    pub fn static_gaussians(&self) -> Vec<Gaussian> {
        self.statics
            .iter()
            .map(|b| b.gaussian(Vector3::zeros(), GaussianKind::Static))
            .collect()
    }

    pub fn dynamic_gaussians(&self, t: f64) -> Vec<Gaussian> {
        let c = self.dynamic.center_at(t);
        self.dynamic
            .blobs
            .iter()
            .map(|b| b.gaussian(c, GaussianKind::Dynamic))
            .collect()
    }

    /// Ground-truth sharp render at time `t` from `pose`.
    pub fn render(&self, pose: &Pose, t: f64) -> RenderedImage {
        let mut gs = self.static_gaussians();
        gs.extend(self.dynamic_gaussians(t));
        rasterize(&gs, pose, &self.intrinsics().expect("valid intrinsics"))
    }

    pub fn render_sharp(&self, t: f64) -> RenderedImage {
        self.render(&self.camera_pose(t), t)
    }

    /// Pixels covered by the moving object at time `t`.
    pub fn dynamic_mask(&self, t: f64) -> Image {
        let r = rasterize(
            &self.dynamic_gaussians(t),
            &self.camera_pose(t),
            &self.intrinsics().expect("valid intrinsics"),
        );
        let mut m = r.alpha;
        for v in m.data.iter_mut() {
            *v = if *v > 0.5 { 1.0 } else { 0.0 };
        }
        m
    }

    /// Mean of `m` sharp renders at the midpoints of `m` equal slices of the
    /// exposure window centred on `t`.
    pub fn blur_with(&self, t: f64, exposure: f64, m: usize) -> Image {
        if exposure == 0.0 {
            return self.render_sharp(t).color;
        }
        let renders: Vec<Image> = (0..m)
            .map(|j| {
                let tau = t - 0.5 * exposure + (j as f64 + 0.5) * exposure / m as f64;
                self.render_sharp(tau).color
            })
            .collect();
        Image::mean_of(&renders.iter().collect::<Vec<_>>())
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

/// Ground truth for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleFrame {
    pub sharp: Image,
    pub blurry: Image,
    pub depth: Image,
    pub mask: Image,
}

pub fn oracle_blur(spec: &SyntheticSceneSpec, t: usize) -> OracleFrame {
    let sharp = spec.render_sharp(t as f64);
    OracleFrame {
        blurry: spec.blur_with(t as f64, spec.exposures[t], spec.oversample),
        sharp: sharp.color,
        depth: sharp.depth,
        mask: spec.dynamic_mask(t as f64),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub intrinsics: Intrinsics,
    /// Top three rows of each camera-to-world matrix, row-major.
    pub poses: Vec<[f64; 12]>,
    pub exposures: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SyntheticSceneSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: Vec<OracleFrame>,
}

impl Dataset {
    /// In-memory dataset, with images rounded exactly as they are stored.
    pub fn synthesize(spec: &SyntheticSceneSpec) -> Result<Self, SynthError> {
        spec.validate()?;
        let intrinsics = spec.intrinsics().map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        let frames = (0..spec.n_frames)
            .map(|t| {
                let f = oracle_blur(spec, t);
                OracleFrame {
                    sharp: io::quantize_f32(&f.sharp),
                    blurry: io::quantize_f32(&f.blurry),
                    depth: io::quantize_f32(&f.depth),
                    mask: f.mask,
                }
            })
            .collect();
        Ok(Self {
            manifest: Manifest {
                width: spec.width,
                height: spec.height,
                n_frames: spec.n_frames,
                intrinsics,
                poses: (0..spec.n_frames).map(|t| spec.camera_pose(t as f64).to_rows()).collect(),
                exposures: spec.exposures.clone(),
                spec: Some(spec.clone()),
            },
            frames,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.manifest.poses.iter().map(Pose::from_rows).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        io::create_dir(&dir.join("frames"))?;
        for (t, f) in self.frames.iter().enumerate() {
            let fr = dir.join("frames");
            io::write_png(&f.blurry, &fr.join(format!("blur_{t:04}.png")))?;
            io::write_f32(&f.blurry, &fr.join(format!("blur_{t:04}.f32")))?;
            io::write_png(&f.sharp, &fr.join(format!("sharp_{t:04}.png")))?;
            io::write_f32(&f.sharp, &fr.join(format!("sharp_{t:04}.f32")))?;
            io::write_f32(&f.depth, &dir.join(format!("depth_{t:04}.f32")))?;
            io::write_png(&f.mask, &dir.join(format!("mask_{t:04}.png")))?;
        }
        io::write_json(&self.manifest, &dir.join("manifest.json"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SynthError> {
        let manifest: Manifest = io::read_json(&dir.join("manifest.json"))?;
        if manifest.poses.len() != manifest.n_frames {
            return Err(SynthError::InvalidSpec(format!(
                "{} poses for {} frames",
                manifest.poses.len(),
                manifest.n_frames
            )));
        }
        let frames = (0..manifest.n_frames)
            .map(|t| {
                let fr = dir.join("frames");
                Ok(OracleFrame {
                    blurry: io::read_f32(&fr.join(format!("blur_{t:04}.f32")))?,
                    sharp: io::read_f32(&fr.join(format!("sharp_{t:04}.f32")))?,
                    depth: io::read_f32(&dir.join(format!("depth_{t:04}.f32")))?,
                    mask: io::read_png(&dir.join(format!("mask_{t:04}.png")))?,
                })
            })
            .collect::<Result<Vec<_>, IoError>>()?;
        Ok(Self { manifest, frames })
    }
}

/// Generates the dataset for `spec` and writes it under `out_dir`.
pub fn write_dataset(spec: &SyntheticSceneSpec, out_dir: &Path) -> Result<Dataset, SynthError> {
    let ds = Dataset::synthesize(spec)?;
    ds.write(out_dir)?;
    Ok(ds)
}
