//! Small dense networks and the sinusoidal positional encoding, each with a
//! hand-written backward pass.

use std::f64::consts::PI;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("an MLP needs at least one hidden layer and positive widths")]
    InvalidSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and output.
    #[inline]
    fn grad(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

/// Widths of a fully connected network. Hidden layers use `activation`; the
/// output layer is affine.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input: usize,
        hidden: Vec<usize>,
        output: usize,
        activation: Activation,
    ) -> Result<Self, NnError> {
        if hidden.is_empty() || input == 0 || output == 0 || hidden.contains(&0) {
            return Err(NnError::InvalidSpec);
        }
        Ok(Self {
            input,
            hidden,
            output,
            activation,
        })
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }

    /// `(weights offset, bias offset, fan_in, fan_out)` per layer. Weights are
    /// row-major `fan_out x fan_in`.
    fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let w = self.widths();
        let mut off = 0;
        w.windows(2)
            .map(|p| {
                let (fi, fo) = (p[0], p[1]);
                let layer = (off, off + fi * fo, fi, fo);
                off += fi * fo + fo;
                layer
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// Uniform fan-in initialization. With `zero_last` the output layer
    /// starts at zero so the network initially outputs exactly zero.
    pub fn init(&self, rng: &mut impl Rng, zero_last: bool) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count()];
        let layers = self.layers();
        let n = layers.len();
        for (li, &(w_off, b_off, fi, fo)) in layers.iter().enumerate() {
            if zero_last && li == n - 1 {
                continue;
            }
            let bound = (if li == n - 1 { 1.0 } else { 6.0 } / fi as f64).sqrt();
            for p in &mut params[w_off..w_off + fi * fo] {
                *p = rng.random_range(-bound..bound);
            }
            let b_bound = 1.0 / (fi as f64).sqrt();
            for p in &mut params[b_off..b_off + fo] {
                *p = rng.random_range(-b_bound..b_bound) * 0.1;
            }
        }
        params
    }
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpTrace {
    /// Input followed by each layer's post-activation output.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of every layer.
    pre: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

pub fn mlp_forward(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Result<MlpTrace, NnError> {
    check_len(spec.param_count(), params.len())?;
    check_len(spec.input, input.len())?;
    let layers = spec.layers();
    let n = layers.len();
    let mut trace = MlpTrace {
        acts: Vec::with_capacity(n + 1),
        pre: Vec::with_capacity(n),
    };
    trace.acts.push(input.to_vec());
    for (li, &(w_off, b_off, fi, fo)) in layers.iter().enumerate() {
        let x = &trace.acts[li];
        let w = &params[w_off..w_off + fi * fo];
        let b = &params[b_off..b_off + fo];
        let pre: Vec<f64> = (0..fo)
            .map(|o| {
                let row = &w[o * fi..(o + 1) * fi];
                b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let out = if li + 1 == n {
            pre.clone()
        } else {
            pre.iter().map(|&v| spec.activation.apply(v)).collect()
        };
        trace.pre.push(pre);
        trace.acts.push(out);
    }
    Ok(trace)
}

/// Accumulates `dL/dparams` into `d_params` and returns `dL/dinput`.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &[f64],
    trace: &MlpTrace,
    d_out: &[f64],
    d_params: &mut [f64],
) -> Vec<f64> {
    let layers = spec.layers();
    let n = layers.len();
    let mut delta = d_out.to_vec();
    for li in (0..n).rev() {
        let (w_off, b_off, fi, fo) = layers[li];
        if li + 1 != n {
            let (pre, out) = (&trace.pre[li], &trace.acts[li + 1]);
            for o in 0..fo {
                delta[o] *= spec.activation.grad(pre[o], out[o]);
            }
        }
        let x = &trace.acts[li];
        let w = &params[w_off..w_off + fi * fo];
        let mut d_x = vec![0.0; fi];
        for o in 0..fo {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            d_params[b_off + o] += d;
            let dw = &mut d_params[w_off + o * fi..w_off + (o + 1) * fi];
            for (g, xi) in dw.iter_mut().zip(x) {
                *g += d * xi;
            }
            for (dx, wi) in d_x.iter_mut().zip(&w[o * fi..(o + 1) * fi]) {
                *dx += d * wi;
            }
        }
        delta = d_x;
    }
    delta
}

fn check_len(expected: usize, got: usize) -> Result<(), NnError> {
    if expected != got {
        return Err(NnError::ShapeMismatch { expected, got });
    }
    Ok(())
}

/// `(sin(2^l pi x_d), cos(2^l pi x_d))` for each band `l`, then each
/// dimension `d`. Output length is `2 * bands * x.len()`.
pub fn positional_encoding(x: &[f64], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * bands * x.len());
    for l in 0..bands {
        let freq = (1u64 << l) as f64 * PI;
        for &xd in x {
            let a = freq * xd;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Chain rule through [`positional_encoding`].
pub fn positional_encoding_backward(x: &[f64], bands: usize, d_out: &[f64]) -> Vec<f64> {
    let mut d_x = vec![0.0; x.len()];
    let mut k = 0;
    for l in 0..bands {
        let freq = (1u64 << l) as f64 * PI;
        for (d, &xd) in x.iter().enumerate() {
            let a = freq * xd;
            d_x[d] += d_out[k] * freq * a.cos() - d_out[k + 1] * freq * a.sin();
            k += 2;
        }
    }
    d_x
}
