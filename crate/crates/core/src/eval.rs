//! Image metrics and per-frame evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blursynth::Dataset;
use crate::image::Image;
use crate::io::{self, IoError};
use crate::trainer::{TrainError, Trainer};

pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image shapes differ")]
    ShapeMismatch,
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("correlation needs non-zero variance in both series")]
    DegenerateVariance,
    #[error("need at least two paired samples, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// `10 log10(1 / MSE)` over all channels of the pixels where `mask > 0.5`.
pub fn psnr(a: &Image, b: &Image, mask: Option<&Image>) -> Result<f64, EvalError> {
    if !a.same_shape(b) {
        return Err(EvalError::ShapeMismatch);
    }
    if let Some(m) = mask {
        if m.pixel_count() != a.pixel_count() {
            return Err(EvalError::ShapeMismatch);
        }
    }
    let ch = a.channels;
    let (mut se, mut n) = (0.0, 0usize);
    for p in 0..a.pixel_count() {
        if mask.is_some_and(|m| m.data[p * m.channels] <= 0.5) {
            continue;
        }
        for c in 0..ch {
            let d = a.data[p * ch + c] - b.data[p * ch + c];
            se += d * d;
        }
        n += ch;
    }
    if n == 0 {
        return Err(EvalError::EmptyMask);
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    let n = xs.len().min(ys.len());
    if n < 2 || xs.len() != ys.len() {
        return Err(EvalError::TooFewSamples(n));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::DegenerateVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub frame: usize,
    /// Sharp render at the training pose and time against the sharp reference.
    pub psnr_full: f64,
    /// Same, restricted to the moving-object mask; `None` when it is empty.
    pub psnr_dynamic: Option<f64>,
    /// The blurry input against the sharp reference.
    pub psnr_blurry: f64,
    /// Held-out view halfway to the next frame, when the dataset carries its
    /// generating scene.
    pub psnr_novel: Option<f64>,
    pub beta: f64,
    pub t_hat: f64,
    pub exposure: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<FrameRow>,
    pub mean_psnr: f64,
    pub mean_dynamic_psnr: f64,
    pub mean_blurry_psnr: f64,
    pub mean_novel_psnr: Option<f64>,
    /// Correlation of blur score and latent exposure.
    pub corr_beta_t_hat: Option<f64>,
    /// Correlation of latent and true exposure.
    pub corr_t_hat_exposure: Option<f64>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<FrameRow>) -> Self {
        let betas: Vec<f64> = rows.iter().map(|r| r.beta).collect();
        let t_hats: Vec<f64> = rows.iter().map(|r| r.t_hat).collect();
        let exps: Vec<f64> = rows.iter().map(|r| r.exposure).collect();
        let novel: Vec<f64> = rows.iter().filter_map(|r| r.psnr_novel).collect();
        Self {
            mean_psnr: mean(rows.iter().map(|r| r.psnr_full)),
            mean_dynamic_psnr: mean(rows.iter().filter_map(|r| r.psnr_dynamic)),
            mean_blurry_psnr: mean(rows.iter().map(|r| r.psnr_blurry)),
            mean_novel_psnr: (!novel.is_empty()).then(|| mean(novel.into_iter())),
            corr_beta_t_hat: pearson(&betas, &t_hats).ok(),
            corr_t_hat_exposure: pearson(&t_hats, &exps).ok(),
            rows,
        }
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut s = String::from("frame,psnr_full,psnr_dynamic,psnr_blurry,psnr_novel,beta,t_hat,exposure\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.frame,
                r.psnr_full,
                opt(r.psnr_dynamic),
                r.psnr_blurry,
                opt(r.psnr_novel),
                r.beta,
                r.t_hat,
                r.exposure
            );
        }
        let _ = writeln!(s, "# mean_psnr,{}", self.mean_psnr);
        let _ = writeln!(s, "# mean_dynamic_psnr,{}", self.mean_dynamic_psnr);
        let _ = writeln!(s, "# mean_blurry_psnr,{}", self.mean_blurry_psnr);
        let _ = writeln!(s, "# mean_novel_psnr,{}", opt(self.mean_novel_psnr));
        let _ = writeln!(s, "# corr_beta_t_hat,{}", opt(self.corr_beta_t_hat));
        let _ = writeln!(s, "# corr_t_hat_exposure,{}", opt(self.corr_t_hat_exposure));
        s
    }
}

fn clamp01(img: &Image) -> Image {
    Image::from_data(
        img.width,
        img.height,
        img.channels,
        img.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
}

/// Scores every frame of `dataset` against the trained model. Exposures are
/// re-estimated from the current parameters.
pub fn evaluate(trainer: &mut Trainer, dataset: &Dataset) -> Result<EvalReport, EvalError> {
    let t_hats = trainer.current_exposures()?;
    let spec = dataset.manifest.spec.as_ref();
    let n = dataset.n_frames();
    let mut rows = Vec::with_capacity(n);
    for (t, frame) in dataset.frames.iter().enumerate() {
        let sharp = clamp01(&trainer.render_sharp(&trainer.poses[t], t as f64).color);
        let psnr_dynamic = match psnr(&sharp, &frame.sharp, Some(&frame.mask)) {
            Ok(v) => Some(v),
            Err(EvalError::EmptyMask) => None,
            Err(e) => return Err(e),
        };
        let psnr_novel = match spec {
            Some(spec) if t + 1 < n => {
                let time = t as f64 + 0.5;
                let pose = spec.camera_pose(time);
                let gt = spec.render(&pose, time).color;
                let img = clamp01(&trainer.render_sharp(&pose, time).color);
                Some(psnr(&img, &gt, None)?)
            }
            _ => None,
        };
        rows.push(FrameRow {
            frame: t,
            psnr_full: psnr(&sharp, &frame.sharp, None)?,
            psnr_dynamic,
            psnr_blurry: psnr(&frame.blurry, &frame.sharp, None)?,
            psnr_novel,
            beta: trainer.betas[t],
            t_hat: t_hats[t],
            exposure: dataset.manifest.exposures.get(t).copied().unwrap_or(f64::NAN),
        });
    }
    Ok(EvalReport::from_rows(rows))
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let m = mean(v.iter().copied());
    let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt();
    v.iter().map(|x| if sd > 0.0 { (x - m) / sd } else { 0.0 }).collect()
}

/// Scatter of standardized blur score (x) against standardized latent
/// exposure (y) on a white canvas, with axes through the origin.
pub fn scatter_image(report: &EvalReport, size: usize) -> Image {
    let mut img = Image::filled(size, size, 3, 1.0);
    let half = size / 2;
    for i in 0..size {
        for c in 0..3 {
            img.set(i, half, c, 0.75);
            img.set(half, i, c, 0.75);
        }
    }
    let xs = standardize(&report.rows.iter().map(|r| r.beta).collect::<Vec<_>>());
    let ys = standardize(&report.rows.iter().map(|r| r.t_hat).collect::<Vec<_>>());
    let scale = size as f64 / 7.0;
    for (x, y) in xs.iter().zip(&ys) {
        let px = (half as f64 + x * scale).round() as i64;
        let py = (half as f64 - y * scale).round() as i64;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (u, v) = (px + dx, py + dy);
                if u >= 0 && v >= 0 && (u as usize) < size && (v as usize) < size {
                    img.set(u as usize, v as usize, 0, 0.8);
                    img.set(u as usize, v as usize, 1, 0.1);
                    img.set(u as usize, v as usize, 2, 0.1);
                }
            }
        }
    }
    img
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, report.to_csv()).map_err(|source| IoError::Fs {
        path: path.display().to_string(),
        source,
    })?;
    io::write_png(&scatter_image(report, 160), &path.with_extension("png"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_examples() {
        let a = Image::filled(5, 4, 3, 0.4);
        assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_CAP);
        let b = Image::filled(5, 4, 3, 0.5);
        assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-9);
        assert!(matches!(psnr(&a, &Image::zeros(4, 4, 3), None), Err(EvalError::ShapeMismatch)));
        assert!(matches!(psnr(&a, &b, Some(&Image::zeros(5, 4, 1))), Err(EvalError::EmptyMask)));
    }

    #[test]
    fn psnr_random_pair_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Image::from_fn(7, 6, 3, |_, _, _| rng.random::<f64>());
        let b = Image::from_fn(7, 6, 3, |_, _, _| rng.random::<f64>());
        let mask = Image::from_fn(7, 6, 1, |x, y, _| if (x + y) % 3 == 0 { 1.0 } else { 0.0 });
        let mut se = 0.0;
        let mut n = 0.0;
        for y in 0..6 {
            for x in 0..7 {
                if (x + y) % 3 != 0 {
                    continue;
                }
                for c in 0..3 {
                    se += (a.get(x, y, c) - b.get(x, y, c)).powi(2);
                    n += 1.0;
                }
            }
        }
        let expected = -10.0 * (se / n).log10();
        assert!((psnr(&a, &b, Some(&mask)).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 4.0, 7.0, 8.5];
        let lin: Vec<f64> = xs.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson(&xs, &lin).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        // sums: dx = [-3.5,-2.5,-0.5,2.5,4], ys mean 3, dy = [-1,1,-2,2,0]
        // sxy = 3.5-2.5+1+5 = 7; sxx = 12.25+6.25+0.25+6.25+16 = 41; syy = 10
        let ys = [2.0, 4.0, 1.0, 5.0, 3.0];
        let expected = 7.0 / (41.0f64.sqrt() * 10.0f64.sqrt());
        assert!((pearson(&xs, &ys).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(pearson(&xs, &[1.0; 5]), Err(EvalError::DegenerateVariance)));
        assert!(matches!(pearson(&[1.0], &[2.0]), Err(EvalError::TooFewSamples(1))));
    }

    #[test]
    fn report_means_and_csv() {
        let row = |f: usize, p: f64, d: Option<f64>| FrameRow {
            frame: f,
            psnr_full: p,
            psnr_dynamic: d,
            psnr_blurry: 20.0,
            psnr_novel: None,
            beta: f as f64,
            t_hat: 0.1 * f as f64,
            exposure: 0.5,
        };
        let r = EvalReport::from_rows(vec![row(0, 30.0, Some(25.0)), row(1, 32.0, None), row(2, 34.0, Some(27.0))]);
        assert_eq!(r.mean_psnr, 32.0);
        assert_eq!(r.mean_dynamic_psnr, 26.0);
        assert!((r.corr_beta_t_hat.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.corr_t_hat_exposure, None);
        assert_eq!(r.to_csv().lines().filter(|l| !l.starts_with('#')).count(), 4);
        let img = scatter_image(&r, 64);
        assert_eq!((img.width, img.height, img.channels), (64, 64, 3));
    }
}
