//! Blur-adaptive latent camera estimation: spectral blur score, blur
//! feature, a blur-conditioned neural ODE over latent features, and decoding
//! of the latent states into camera poses.

use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{screw_exp_jacobian, Pose, ScrewAxis, DEFAULT_MAX_SCREW};
use crate::image::Image;
use crate::nn::{
    mlp_backward, mlp_forward, positional_encoding, Activation, MlpSpec, MlpTrace, NnError,
};
use crate::raster::PoseGrad;

#[derive(Debug, Error, PartialEq)]
pub enum BlceError {
    #[error("image {width}x{height} is smaller than the {crop}x{crop} crop")]
    ImageSmallerThanCrop { width: usize, height: usize, crop: usize },
    #[error("unsupported channel count {0}")]
    Channels(usize),
    #[error("need at least two latent poses, got {0}")]
    TooFewLatents(usize),
    #[error("unknown latent mode `{0}`")]
    UnknownMode(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurScore {
    pub beta: f64,
    pub frame_index: usize,
}

/// In-place 2D DFT of a row-major `height x width` buffer.
pub fn fft2(data: &mut [Complex<f64>], width: usize, height: usize) {
    let mut planner = FftPlanner::<f64>::new();
    let row = planner.plan_fft_forward(width);
    for r in data.chunks_exact_mut(width) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(height);
    let mut buf = vec![Complex::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            buf[y] = data[y * width + x];
        }
        col.process(&mut buf);
        for y in 0..height {
            data[y * width + x] = buf[y];
        }
    }
}

/// Magnitude spectrum with the zero frequency moved to `(width/2, height/2)`.
pub fn shifted_magnitude(lum: &Image) -> Image {
    let (w, h) = (lum.width, lum.height);
    let mut data: Vec<Complex<f64>> = lum.data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut data, w, h);
    Image::from_fn(w, h, 1, |x, y, _| {
        let sx = (x + w - w / 2) % w;
        let sy = (y + h - h / 2) % h;
        data[sy * w + sx].norm()
    })
}

/// Fraction of spectral magnitude inside the centred `crop x crop` square.
pub fn blur_score(frame: &Image, crop: usize, frame_index: usize) -> Result<BlurScore, BlceError> {
    if frame.width < crop || frame.height < crop {
        return Err(BlceError::ImageSmallerThanCrop {
            width: frame.width,
            height: frame.height,
            crop,
        });
    }
    let lum = match frame.channels {
        1 => frame.clone(),
        3 => frame.luminance(),
        c => return Err(BlceError::Channels(c)),
    };
    let mag = shifted_magnitude(&lum);
    let (x0, y0) = (mag.width / 2 - crop / 2, mag.height / 2 - crop / 2);
    let mut inside = 0.0;
    for y in y0..y0 + crop {
        for x in x0..x0 + crop {
            inside += mag.get(x, y, 0);
        }
    }
    let total: f64 = mag.data.iter().sum();
    let beta = if total > 0.0 { inside / total } else { 1.0 };
    Ok(BlurScore { beta, frame_index })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlurFeature {
    pub phi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub u: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTrajectory {
    pub poses: Vec<Pose>,
    pub screw_axes: Vec<ScrewAxis>,
    pub frame_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// Neural ODE conditioned on the blur feature.
    BlurAdaptive,
    /// Neural ODE with the blur feature replaced by zeros.
    NeuralOde,
    /// Per-frame learnable start and end screw axes, linearly interpolated.
    Spline,
}

impl FromStr for LatentMode {
    type Err = BlceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blur_adaptive" => Ok(Self::BlurAdaptive),
            "neural_ode" => Ok(Self::NeuralOde),
            "spline" => Ok(Self::Spline),
            other => Err(BlceError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlceConfig {
    pub n_latent: usize,
    pub bands: usize,
    pub feature_dim: usize,
    pub feature_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub field_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub substeps: usize,
    pub max_screw: f64,
    pub mode: LatentMode,
}

impl Default for BlceConfig {
    fn default() -> Self {
        Self {
            n_latent: 9,
            bands: 6,
            feature_dim: 32,
            feature_hidden: vec![64, 64],
            latent_dim: 64,
            encoder_hidden: vec![64, 64],
            field_hidden: vec![128, 128],
            decoder_hidden: vec![64],
            substeps: 4,
            max_screw: DEFAULT_MAX_SCREW,
            mode: LatentMode::BlurAdaptive,
        }
    }
}

/// Network parameters, or gradients of the same shape. `spline` holds twelve
/// values per frame and is only used by [`LatentMode::Spline`].
#[derive(Clone, Debug, PartialEq)]
pub struct BlceParams {
    pub feature: Vec<f64>,
    pub encoder: Vec<f64>,
    pub field: Vec<f64>,
    pub decoder: Vec<f64>,
    pub spline: Vec<f64>,
}

impl BlceParams {
    pub fn zeros_like(other: &BlceParams) -> Self {
        Self {
            feature: vec![0.0; other.feature.len()],
            encoder: vec![0.0; other.encoder.len()],
            field: vec![0.0; other.field.len()],
            decoder: vec![0.0; other.decoder.len()],
            spline: vec![0.0; other.spline.len()],
        }
    }
}

/// Evenly spaced temporal coordinates `u_k` in `[0, 1]`.
pub fn latent_knots(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
}

/// Classic fixed-step RK4 of `dz/du = f(z, u)` from `knots[0]`, returning
/// the state at every knot with `substeps` steps per interval.
pub fn rk4_integrate(
    mut f: impl FnMut(&[f64], f64) -> Vec<f64>,
    z0: &[f64],
    knots: &[f64],
    substeps: usize,
) -> Vec<Vec<f64>> {
    let mut out = vec![z0.to_vec()];
    let mut z = z0.to_vec();
    for pair in knots.windows(2) {
        let h = (pair[1] - pair[0]) / substeps as f64;
        for s in 0..substeps {
            let u = pair[0] + s as f64 * h;
            let k1 = f(&z, u);
            let k2 = f(&axpy(&z, 0.5 * h, &k1), u + 0.5 * h);
            let k3 = f(&axpy(&z, 0.5 * h, &k2), u + 0.5 * h);
            let k4 = f(&axpy(&z, h, &k3), u + h);
            for i in 0..z.len() {
                z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        out.push(z.clone());
    }
    out
}

fn axpy(z: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    z.iter().zip(k).map(|(z, k)| z + a * k).collect()
}

/// Scales `raw` back onto the ball of radius `max` when it leaves it.
fn clamp_axis(raw: &[f64; 6], max: f64) -> [f64; 6] {
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n <= max {
        return *raw;
    }
    raw.map(|v| v * max / n)
}

fn clamp_axis_backward(raw: &[f64; 6], max: f64, d_out: &[f64; 6]) -> [f64; 6] {
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n <= max {
        return *d_out;
    }
    let dot: f64 = raw.iter().zip(d_out).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 6];
    for i in 0..6 {
        out[i] = max / n * (d_out[i] - raw[i] * dot / (n * n));
    }
    out
}

struct Rk4Step {
    stages: [MlpTrace; 4],
}

/// Everything the backward pass needs from one frame's forward pass.
pub struct BlceForward {
    pub trajectory: LatentTrajectory,
    pub states: Vec<LatentState>,
    pub feature: BlurFeature,
    pose: Pose,
    pe: Vec<f64>,
    feature_trace: Option<MlpTrace>,
    encoder_trace: Option<MlpTrace>,
    steps: Vec<Rk4Step>,
    decoder_traces: Vec<MlpTrace>,
    raw_axes: Vec<[f64; 6]>,
    jacobians: Vec<[[f64; 6]; 12]>,
}

/// The four networks and their shapes.
#[derive(Clone, Debug)]
pub struct Blce {
    pub config: BlceConfig,
    pub feature: MlpSpec,
    pub encoder: MlpSpec,
    pub field: MlpSpec,
    pub decoder: MlpSpec,
}

impl Blce {
    pub fn new(config: BlceConfig) -> Result<Self, BlceError> {
        if config.n_latent < 2 {
            return Err(BlceError::TooFewLatents(config.n_latent));
        }
        let relu = Activation::Relu;
        let feature = MlpSpec::new(2 * config.bands, config.feature_hidden.clone(), config.feature_dim, relu)?;
        let encoder = MlpSpec::new(12, config.encoder_hidden.clone(), config.latent_dim, relu)?;
        let field = MlpSpec::new(
            config.latent_dim + 1 + config.feature_dim,
            config.field_hidden.clone(),
            config.latent_dim,
            relu,
        )?;
        let decoder = MlpSpec::new(config.latent_dim, config.decoder_hidden.clone(), 6, relu)?;
        Ok(Self {
            config,
            feature,
            encoder,
            field,
            decoder,
        })
    }

    /// Random network weights with a zero decoder output layer, and zero
    /// spline axes for `n_frames` frames.
    pub fn init(&self, rng: &mut impl Rng, n_frames: usize) -> BlceParams {
        BlceParams {
            feature: self.feature.init(rng, false),
            encoder: self.encoder.init(rng, false),
            field: self.field.init(rng, false),
            decoder: self.decoder.init(rng, true),
            spline: vec![0.0; 12 * n_frames],
        }
    }

    pub fn knots(&self) -> Vec<f64> {
        latent_knots(self.config.n_latent)
    }

    fn feature_input(&self, beta: f64) -> Vec<f64> {
        positional_encoding(&[beta], self.config.bands)
    }

    pub fn blur_feature(&self, params: &BlceParams, score: &BlurScore) -> BlurFeature {
        let trace = mlp_forward(&self.feature, &params.feature, &self.feature_input(score.beta))
            .expect("feature network shape");
        BlurFeature {
            phi: trace.output().to_vec(),
        }
    }

    fn field_input(&self, z: &[f64], u: f64, phi: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.field.input);
        x.extend_from_slice(z);
        x.push(u);
        x.extend_from_slice(phi);
        x
    }

    /// Latent states at every knot, starting from the encoded pose.
    pub fn integrate_latents(
        &self,
        params: &BlceParams,
        pose: &Pose,
        feature: &BlurFeature,
    ) -> Vec<LatentState> {
        let z0 = mlp_forward(&self.encoder, &params.encoder, &pose.to_rows())
            .expect("encoder shape")
            .output()
            .to_vec();
        let knots = self.knots();
        let f = |z: &[f64], u: f64| {
            mlp_forward(&self.field, &params.field, &self.field_input(z, u, &feature.phi))
                .expect("field shape")
                .output()
                .to_vec()
        };
        rk4_integrate(f, &z0, &knots, self.config.substeps)
            .into_iter()
            .zip(knots)
            .map(|(z, u)| LatentState { z, u })
            .collect()
    }

    /// Decodes each state into a bounded screw axis and right-composes it
    /// onto `pose`.
    pub fn decode_latent_poses(
        &self,
        params: &BlceParams,
        states: &[LatentState],
        pose: &Pose,
        frame_index: usize,
    ) -> LatentTrajectory {
        let axes: Vec<[f64; 6]> = states
            .iter()
            .map(|s| {
                let out = mlp_forward(&self.decoder, &params.decoder, &s.z).expect("decoder shape");
                clamp_axis(&out.output().try_into().unwrap(), self.config.max_screw)
            })
            .collect();
        trajectory_from_axes(pose, &axes, frame_index)
    }

    /// Full traced forward pass for one frame.
    pub fn forward(&self, params: &BlceParams, pose: &Pose, beta: f64, frame_index: usize) -> BlceForward {
        let n = self.config.n_latent;
        let knots = self.knots();
        let pe = self.feature_input(beta);
        let mut fwd = BlceForward {
            trajectory: LatentTrajectory {
                poses: vec![],
                screw_axes: vec![],
                frame_index,
            },
            states: vec![],
            feature: BlurFeature {
                phi: vec![0.0; self.config.feature_dim],
            },
            pose: *pose,
            pe,
            feature_trace: None,
            encoder_trace: None,
            steps: vec![],
            decoder_traces: vec![],
            raw_axes: vec![],
            jacobians: vec![],
        };

        let raw: Vec<[f64; 6]> = if self.config.mode == LatentMode::Spline {
            let s = &params.spline[12 * frame_index..12 * frame_index + 12];
            knots
                .iter()
                .map(|&u| std::array::from_fn(|i| (1.0 - u) * s[i] + u * s[6 + i]))
                .collect()
        } else {
            if self.config.mode == LatentMode::BlurAdaptive {
                let tr = mlp_forward(&self.feature, &params.feature, &fwd.pe).expect("feature shape");
                fwd.feature.phi = tr.output().to_vec();
                fwd.feature_trace = Some(tr);
            }
            let enc = mlp_forward(&self.encoder, &params.encoder, &pose.to_rows()).expect("encoder shape");
            let mut z = enc.output().to_vec();
            fwd.encoder_trace = Some(enc);
            fwd.states.push(LatentState { z: z.clone(), u: knots[0] });
            let phi = fwd.feature.phi.clone();
            for k in 0..n - 1 {
                let h = (knots[k + 1] - knots[k]) / self.config.substeps as f64;
                for s in 0..self.config.substeps {
                    let u = knots[k] + s as f64 * h;
                    let eval = |zz: &[f64], uu: f64| {
                        mlp_forward(&self.field, &params.field, &self.field_input(zz, uu, &phi))
                            .expect("field shape")
                    };
                    let t1 = eval(&z, u);
                    let t2 = eval(&axpy(&z, 0.5 * h, t1.output()), u + 0.5 * h);
                    let t3 = eval(&axpy(&z, 0.5 * h, t2.output()), u + 0.5 * h);
                    let t4 = eval(&axpy(&z, h, t3.output()), u + h);
                    for i in 0..z.len() {
                        z[i] += h / 6.0
                            * (t1.output()[i] + 2.0 * t2.output()[i] + 2.0 * t3.output()[i] + t4.output()[i]);
                    }
                    fwd.steps.push(Rk4Step {
                        stages: [t1, t2, t3, t4],
                    });
                }
                fwd.states.push(LatentState {
                    z: z.clone(),
                    u: knots[k + 1],
                });
            }
            fwd.states
                .iter()
                .map(|s| {
                    let tr = mlp_forward(&self.decoder, &params.decoder, &s.z).expect("decoder shape");
                    let a: [f64; 6] = tr.output().try_into().unwrap();
                    fwd.decoder_traces.push(tr);
                    a
                })
                .collect()
        };

        for r in &raw {
            let axis = ScrewAxis::from_array(&clamp_axis(r, self.config.max_screw));
            let (e, jac) = screw_exp_jacobian(&axis);
            fwd.trajectory.poses.push(pose.compose(&e));
            fwd.trajectory.screw_axes.push(axis);
            fwd.jacobians.push(jac);
        }
        fwd.raw_axes = raw;
        fwd
    }

    /// Backpropagates camera-to-world gradients of every latent pose into
    /// the network (or spline) parameters.
    pub fn backward(&self, params: &BlceParams, fwd: &BlceForward, d_poses: &[PoseGrad]) -> BlceParams {
        let mut g = BlceParams::zeros_like(params);
        let n = self.config.n_latent;
        let r_t: Matrix3<f64> = fwd.pose.rotation;

        let d_raw: Vec<[f64; 6]> = (0..n)
            .map(|k| {
                let dp = &d_poses[k];
                let d_re = r_t.transpose() * dp.rotation;
                let d_te: Vector3<f64> = r_t.transpose() * dp.translation;
                let mut flat = [0.0; 12];
                for i in 0..3 {
                    for j in 0..3 {
                        flat[i * 3 + j] = d_re[(i, j)];
                    }
                    flat[9 + i] = d_te[i];
                }
                let jac = &fwd.jacobians[k];
                let mut d_axis = [0.0; 6];
                for (row, f) in jac.iter().zip(flat) {
                    for c in 0..6 {
                        d_axis[c] += row[c] * f;
                    }
                }
                clamp_axis_backward(&fwd.raw_axes[k], self.config.max_screw, &d_axis)
            })
            .collect();

        if self.config.mode == LatentMode::Spline {
            let knots = self.knots();
            let off = 12 * fwd.trajectory.frame_index;
            for (k, d) in d_raw.iter().enumerate() {
                for i in 0..6 {
                    g.spline[off + i] += (1.0 - knots[k]) * d[i];
                    g.spline[off + 6 + i] += knots[k] * d[i];
                }
            }
            return g;
        }

        let dim = self.config.latent_dim;
        let d_state: Vec<Vec<f64>> = (0..n)
            .map(|k| mlp_backward(&self.decoder, &params.decoder, &fwd.decoder_traces[k], &d_raw[k], &mut g.decoder))
            .collect();

        let knots = self.knots();
        let mut a = d_state[n - 1].clone();
        let mut d_phi = vec![0.0; self.config.feature_dim];
        let sub = self.config.substeps;
        for k in (0..n - 1).rev() {
            let h = (knots[k + 1] - knots[k]) / sub as f64;
            for s in (0..sub).rev() {
                let step = &fwd.steps[k * sub + s];
                let mut dk = [
                    a.iter().map(|v| v * h / 6.0).collect::<Vec<_>>(),
                    a.iter().map(|v| v * h / 3.0).collect::<Vec<_>>(),
                    a.iter().map(|v| v * h / 3.0).collect::<Vec<_>>(),
                    a.iter().map(|v| v * h / 6.0).collect::<Vec<_>>(),
                ];
                let coef = [0.5 * h, 0.5 * h, h];
                for st in (0..4).rev() {
                    let d_in = mlp_backward(&self.field, &params.field, &step.stages[st], &dk[st], &mut g.field);
                    let dz = &d_in[..dim];
                    for (p, v) in d_phi.iter_mut().zip(&d_in[dim + 1..]) {
                        *p += v;
                    }
                    for i in 0..dim {
                        a[i] += dz[i];
                    }
                    if st > 0 {
                        let c = coef[st - 1];
                        for i in 0..dim {
                            dk[st - 1][i] += c * dz[i];
                        }
                    }
                }
            }
            for (ai, d) in a.iter_mut().zip(&d_state[k]) {
                *ai += d;
            }
        }

        if let Some(tr) = &fwd.encoder_trace {
            mlp_backward(&self.encoder, &params.encoder, tr, &a, &mut g.encoder);
        }
        if let Some(tr) = &fwd.feature_trace {
            mlp_backward(&self.feature, &params.feature, tr, &d_phi, &mut g.feature);
        }
        g
    }
}

/// Composes `pose` with the exponential of each (already bounded) axis.
pub fn trajectory_from_axes(pose: &Pose, axes: &[[f64; 6]], frame_index: usize) -> LatentTrajectory {
    let screw_axes: Vec<ScrewAxis> = axes.iter().map(ScrewAxis::from_array).collect();
    LatentTrajectory {
        poses: screw_axes
            .iter()
            .map(|a| pose.compose(&crate::geometry::screw_exp(a)))
            .collect(),
        screw_axes,
        frame_index,
    }
}
