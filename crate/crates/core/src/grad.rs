//! Flat parameter storage, Adam, and the central-difference gradient oracle.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("unknown parameter slice `{0}`")]
    UnknownSlice(String),
    #[error("duplicate parameter slice `{0}`")]
    DuplicateSlice(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlice {
    pub name: String,
    pub range: Range<usize>,
}

/// Named, disjoint, contiguous slices over one value/gradient buffer pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    slices: Vec<ParamSlice>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a slice and returns its range.
    pub fn add(&mut self, name: &str, values: Vec<f64>) -> Result<Range<usize>, ParamError> {
        if self.slices.iter().any(|s| s.name == name) {
            return Err(ParamError::DuplicateSlice(name.to_string()));
        }
        let start = self.values.len();
        self.values.extend(values);
        self.grads.resize(self.values.len(), 0.0);
        let range = start..self.values.len();
        self.slices.push(ParamSlice {
            name: name.to_string(),
            range: range.clone(),
        });
        Ok(range)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn range(&self, name: &str) -> Result<Range<usize>, ParamError> {
        self.slices
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.range.clone())
            .ok_or_else(|| ParamError::UnknownSlice(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&[f64], ParamError> {
        Ok(&self.values[self.range(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f64], ParamError> {
        let r = self.range(name)?;
        Ok(&mut self.values[r])
    }

    pub fn grad(&self, name: &str) -> Result<&[f64], ParamError> {
        Ok(&self.grads[self.range(name)?])
    }

    pub fn grad_mut(&mut self, name: &str) -> Result<&mut [f64], ParamError> {
        let r = self.range(name)?;
        Ok(&mut self.grads[r])
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Writes `<stem>.bin` (little-endian f64) and `<stem>.manifest`
    /// (`name offset length` per line).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), ParamError> {
        write_f64_le(&dir.join(format!("{stem}.bin")), &self.values)?;
        let mut manifest = fs::File::create(dir.join(format!("{stem}.manifest")))?;
        writeln!(manifest, "# name offset length")?;
        for s in &self.slices {
            writeln!(manifest, "{} {} {}", s.name, s.range.start, s.range.len())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, ParamError> {
        let values = read_f64_le(&dir.join(format!("{stem}.bin")))?;
        let manifest = fs::File::open(dir.join(format!("{stem}.manifest")))?;
        let mut slices = Vec::new();
        let mut cursor = 0;
        for line in io::BufReader::new(manifest).lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, offset, len] = parts[..] else {
                return Err(ParamError::Malformed(format!("bad manifest line `{line}`")));
            };
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| ParamError::Malformed(format!("bad number `{s}`")))
            };
            let (offset, len) = (parse(offset)?, parse(len)?);
            if offset != cursor {
                return Err(ParamError::Malformed("slices must be contiguous".into()));
            }
            cursor += len;
            slices.push(ParamSlice {
                name: name.to_string(),
                range: offset..offset + len,
            });
        }
        if cursor != values.len() {
            return Err(ParamError::Malformed(format!(
                "manifest covers {cursor} values, binary holds {}",
                values.len()
            )));
        }
        Ok(Self {
            grads: vec![0.0; values.len()],
            values,
            slices,
        })
    }
}

pub fn write_f64_le(path: &Path, values: &[f64]) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)
}

pub fn read_f64_le(path: &Path) -> io::Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "length not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// Adam with bias correction and a learning rate per named slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    lrs: BTreeMap<String, f64>,
    default_lr: f64,
}

impl Adam {
    pub fn new(n: usize, default_lr: f64, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lrs: BTreeMap::new(),
            default_lr,
        }
    }

    pub fn set_lr(&mut self, slice: &str, lr: f64) {
        self.lrs.insert(slice.to_string(), lr);
    }

    pub fn lr_for(&self, slice: &str) -> f64 {
        self.lrs.get(slice).copied().unwrap_or(self.default_lr)
    }

    /// One update using `store.grads`.
    pub fn step(&mut self, store: &mut ParamStore) {
        assert_eq!(self.m.len(), store.len());
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for s in store.slices.clone() {
            let lr = self.lr_for(&s.name);
            for i in s.range {
                adam_update(
                    &mut store.values[i],
                    store.grads[i],
                    &mut self.m[i],
                    &mut self.v[i],
                    lr,
                    beta1,
                    beta2,
                    eps,
                    bc1,
                    bc2,
                );
            }
        }
    }
}

/// Scalar Adam update with precomputed bias corrections.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn adam_update(
    value: &mut f64,
    grad: f64,
    m: &mut f64,
    v: &mut f64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    *m = beta1 * *m + (1.0 - beta1) * grad;
    *v = beta2 * *v + (1.0 - beta2) * grad * grad;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *value -= lr * m_hat / (v_hat.sqrt() + eps);
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdOptions {
    pub h: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// gradient is numerically zero are judged on absolute error.
    pub floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-6,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl FdReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of `f` over `indices` (all coordinates when `None`)
/// compared against `analytic`. `values` is restored afterwards.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    values: &mut [f64],
    analytic: &[f64],
    indices: Option<&[usize]>,
    opts: FdOptions,
) -> FdReport {
    assert_eq!(values.len(), analytic.len());
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..values.len()).collect();
            &all
        }
    };
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: idx.len(),
    };
    for &i in idx {
        let x = values[i];
        values[i] = x + opts.h;
        let fp = f(values);
        values[i] = x - opts.h;
        let fm = f(values);
        values[i] = x;
        let numeric = (fp - fm) / (2.0 * opts.h);
        let err = relative_error(analytic[i], numeric, opts.floor);
        if !(err <= report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_index = Some(i);
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report
}

/// [`finite_diff_check`] over a whole store, using its `grads` as the
/// analytic side.
pub fn finite_diff_check_store(
    mut f: impl FnMut(&ParamStore) -> f64,
    store: &mut ParamStore,
    indices: Option<&[usize]>,
    opts: FdOptions,
) -> FdReport {
    let analytic = store.grads.clone();
    let mut values = store.values.clone();
    let mut scratch = store.clone();
    let report = finite_diff_check(
        |v| {
            scratch.values.copy_from_slice(v);
            f(&scratch)
        },
        &mut values,
        &analytic,
        indices,
        opts,
    );
    store.values = values;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_are_disjoint_and_covering() {
        let mut s = ParamStore::new();
        s.add("a", vec![1.0, 2.0]).unwrap();
        s.add("b", vec![3.0]).unwrap();
        assert_eq!(s.range("a").unwrap(), 0..2);
        assert_eq!(s.range("b").unwrap(), 2..3);
        assert!(s.add("a", vec![0.0]).is_err());
        assert!(s.get("c").is_err());
        assert_eq!(s.grads.len(), s.values.len());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.add("net.w", vec![0.1, -2.5, f64::MIN_POSITIVE]).unwrap();
        s.add("exposure", vec![1e300]).unwrap();
        s.save(dir.path(), "params").unwrap();
        let back = ParamStore::load(dir.path(), "params").unwrap();
        assert_eq!(back.values, s.values);
        assert_eq!(back.slices(), s.slices());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut s = ParamStore::new();
        s.add("w", vec![1.0, -3.0]).unwrap();
        let mut adam = Adam::new(2, 0.1, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut s);
        }
        assert_eq!(s.values, vec![1.0, -3.0]);
    }

    #[test]
    fn adam_moves_against_constant_gradient() {
        let mut s = ParamStore::new();
        s.add("w", vec![0.0, 0.0]).unwrap();
        let mut adam = Adam::new(2, 0.01, AdamConfig::default());
        for _ in 0..100 {
            s.grads = vec![2.0, -0.5];
            adam.step(&mut s);
        }
        assert!(s.values[0] < -0.9 && s.values[1] > 0.9);
    }

    #[test]
    fn adam_descends_quadratic() {
        // f(w) = w^2 from w = 1 with lr 0.1: scalar simulation
        let mut s = ParamStore::new();
        s.add("w", vec![1.0]).unwrap();
        let mut adam = Adam::new(1, 0.1, AdamConfig { eps: 1e-8, ..Default::default() });
        let mut prev = 1.0f64;
        for step in 0..8 {
            s.grads[0] = 2.0 * s.values[0];
            adam.step(&mut s);
            let w = s.values[0].abs();
            if step >= 2 {
                assert!(w < prev, "step {step}: {w} >= {prev}");
            }
            prev = w;
        }
        assert!(prev < 0.4);
    }

    #[test]
    fn adam_is_invariant_to_slice_order() {
        let grads = [0.3, -1.2, 0.7];
        let mut a = ParamStore::new();
        a.add("x", vec![1.0]).unwrap();
        a.add("y", vec![2.0, 3.0]).unwrap();
        let mut b = ParamStore::new();
        b.add("y", vec![2.0, 3.0]).unwrap();
        b.add("x", vec![1.0]).unwrap();
        let mut oa = Adam::new(3, 0.05, AdamConfig::default());
        let mut ob = Adam::new(3, 0.05, AdamConfig::default());
        for _ in 0..3 {
            a.grads.copy_from_slice(&grads);
            b.grads.copy_from_slice(&[grads[1], grads[2], grads[0]]);
            oa.step(&mut a);
            ob.step(&mut b);
        }
        assert_eq!(a.get("x").unwrap(), b.get("x").unwrap());
        assert_eq!(a.get("y").unwrap(), b.get("y").unwrap());
    }

    #[test]
    fn fd_linear_is_exact() {
        let coeffs = [2.0, -3.0, 0.5];
        let mut x = vec![0.3, 0.1, -4.0];
        let r = finite_diff_check(
            |v| v.iter().zip(coeffs).map(|(a, b)| a * b).sum(),
            &mut x,
            &coeffs,
            None,
            FdOptions::default(),
        );
        assert!(r.max_rel_error < 1e-9);
        assert_eq!(x, vec![0.3, 0.1, -4.0]);
    }

    #[test]
    fn fd_cubic() {
        let mut x = vec![1.0];
        let r = finite_diff_check(|v| v[0].powi(3), &mut x, &[3.0], None, FdOptions::default());
        assert!((r.numeric - 3.0).abs() < 1e-8);
    }

    #[test]
    fn fd_flags_discontinuity() {
        let mut x = vec![0.0];
        let r = finite_diff_check(
            |v| if v[0] >= 0.0 { 1.0 } else { 0.0 },
            &mut x,
            &[0.0],
            None,
            FdOptions::default(),
        );
        assert!(!r.passed(1e-3));
        assert_eq!(r.worst_index, Some(0));
    }
}
