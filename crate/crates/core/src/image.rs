//! Interleaved floating-point image buffers.

use serde::{Deserialize, Serialize};

/// Row-major, channel-interleaved image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![v; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels, "image buffer size mismatch");
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::from_data(width, height, channels, data)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = (y * self.width + x) * self.channels + c;
        self.data[i] = v;
    }

    /// Rec. 601 luma of an RGB image.
    pub fn luminance(&self) -> Image {
        assert_eq!(self.channels, 3);
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Image::from_data(self.width, self.height, 1, data)
    }

    /// Per-channel mean.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += v;
            }
        }
        let n = self.pixel_count() as f64;
        sums.into_iter().map(|s| s / n).collect()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Elementwise mean of equally shaped images.
    pub fn mean_of(images: &[&Image]) -> Image {
        assert!(!images.is_empty());
        let mut out = Image::zeros(images[0].width, images[0].height, images[0].channels);
        for img in images {
            assert!(img.same_shape(&out));
            for (o, v) in out.data.iter_mut().zip(&img.data) {
                *o += v;
            }
        }
        let inv = 1.0 / images.len() as f64;
        for o in out.data.iter_mut() {
            *o *= inv;
        }
        out
    }

    /// Separable Gaussian blur with clamp-to-edge borders. `sigma == 0` copies.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        let (w, h, ch) = (self.width as isize, self.height as isize, self.channels);
        let pass = |src: &Image, horizontal: bool| {
            Image::from_fn(src.width, src.height, ch, |x, y, c| {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let o = k as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x as isize + o).clamp(0, w - 1), y as isize)
                    } else {
                        (x as isize, (y as isize + o).clamp(0, h - 1))
                    };
                    acc += kv * src.get(sx as usize, sy as usize, c);
                }
                acc
            })
        };
        pass(&pass(self, true), false)
    }
}
