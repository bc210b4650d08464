//! Fractional Brownian motion on the uniform grid `t_k = k/N` of `[0, 1]`.
//!
//! Paths are built from exact samples of the stationary increment sequence
//! (fractional Gaussian noise) followed by a cumulative sum. Two exact
//! samplers are available: circulant embedding (Davies–Harte, `O(N log N)`)
//! and a dense Cholesky factor of the increment covariance.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::mc::path_rng;
use crate::{Error, Result};

/// Covariance `R(s,t) = ½(s^{2H} + t^{2H} − |t−s|^{2H})` on `[0,1]²`.
pub fn covariance(s: f64, t: f64, hurst: f64) -> Result<f64> {
    if !(hurst > 0.0 && hurst < 1.0) {
        return Err(Error::Domain(format!("Hurst parameter {hurst} outside (0,1)")));
    }
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("times ({s}, {t}) outside [0,1]")));
    }
    let h2 = 2.0 * hurst;
    Ok(0.5 * (s.powf(h2) + t.powf(h2) - (t - s).abs().powf(h2)))
}

/// Autocovariance of unit-step fractional Gaussian noise at lag `k`.
pub fn fgn_autocovariance(k: usize, hurst: f64) -> f64 {
    let h2 = 2.0 * hurst;
    let k = k as f64;
    0.5 * ((k + 1.0).powf(h2) - 2.0 * k.powf(h2) + (k - 1.0).abs().powf(h2))
}

pub(crate) fn check_hurst(hurst: f64) -> Result<()> {
    if hurst > 0.25 && hurst < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("Hurst parameter {hurst} outside (1/4, 1)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMethod {
    Cholesky,
    Circulant,
}

impl fmt::Display for SamplingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMethod::Cholesky => "cholesky",
            SamplingMethod::Circulant => "circulant",
        })
    }
}

impl FromStr for SamplingMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cholesky" => Ok(SamplingMethod::Cholesky),
            "circulant" => Ok(SamplingMethod::Circulant),
            other => Err(Error::Config(format!("unknown sampling method {other:?}"))),
        }
    }
}

/// One `d`-dimensional fBm sample on `N + 1` grid points.
#[derive(Clone, Debug, PartialEq)]
pub struct FbmPath {
    hurst: f64,
    n: usize,
    d: usize,
    // (n + 1) × d, row-major by grid index
    values: Vec<f64>,
}

impl FbmPath {
    /// Wraps explicit grid values; `values[0..d]` must be zero.
    pub fn from_values(hurst: f64, d: usize, values: Vec<f64>) -> Result<Self> {
        if d == 0 || values.len() % d != 0 || values.len() < 2 * d {
            return Err(Error::GridMismatch(format!(
                "{} values do not form a grid of {d}-vectors with at least one cell",
                values.len()
            )));
        }
        if values[..d].iter().any(|&v| v != 0.0) {
            return Err(Error::Domain("fBm paths start at the origin".into()));
        }
        let n = values.len() / d - 1;
        Ok(FbmPath { hurst, n, d, values })
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    /// Number of grid cells `N`.
    pub fn grid_size(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.n as f64
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.values[k * self.d..(k + 1) * self.d]
    }

    pub fn value(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.d + j]
    }

    /// `B_{t_{k+1}} − B_{t_k}` written into `out`.
    pub fn increment_into(&self, k: usize, out: &mut [f64]) {
        for j in 0..self.d {
            out[j] = self.values[(k + 1) * self.d + j] - self.values[k * self.d + j];
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn component(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(j).step_by(self.d).copied()
    }

    /// Largest Euclidean norm over the grid.
    pub fn sup_norm(&self) -> f64 {
        sup_norm_grid(&self.values, self.d)
    }

    /// Discrete Hölder-γ norm: sup over grid pairs of
    /// `|B_t − B_s| / |t−s|^γ` plus the sup norm.
    pub fn holder_norm(&self, gamma: f64) -> f64 {
        holder_norm_grid(&self.values, self.d, gamma)
    }

    /// CSV with header `t,B1,…,Bd` and round-trip float formatting.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t")?;
        for j in 1..=self.d {
            write!(w, ",B{j}")?;
        }
        writeln!(w)?;
        for k in 0..=self.n {
            write!(w, "{}", self.time(k))?;
            for &v in self.point(k) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// JSON sidecar describing how a path file was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSidecar {
    #[serde(rename = "H")]
    pub hurst: f64,
    #[serde(rename = "N")]
    pub grid_size: usize,
    pub d: usize,
    pub seed: u64,
    pub method: SamplingMethod,
}

/// Sup of Euclidean norms over a grid of `dim`-vectors.
pub fn sup_norm_grid(values: &[f64], dim: usize) -> f64 {
    values
        .chunks(dim)
        .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Hölder-γ norm of a function sampled on the uniform grid of `[0,1]`
/// (`values.len() / dim` points).
pub fn holder_norm_grid(values: &[f64], dim: usize, gamma: f64) -> f64 {
    let points = values.len() / dim;
    let n = (points - 1) as f64;
    // |t-s|^γ depends only on the lag
    let lag_pow: Vec<f64> = (0..points).map(|m| (m as f64 / n).powf(gamma)).collect();
    let mut best = 0.0f64;
    for a in 0..points {
        let pa = &values[a * dim..(a + 1) * dim];
        for b in a + 1..points {
            let pb = &values[b * dim..(b + 1) * dim];
            let dist: f64 = pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let ratio = dist / lag_pow[b - a];
            if ratio > best {
                best = ratio;
            }
        }
    }
    best + sup_norm_grid(values, dim)
}

enum Engine {
    Circulant {
        // sqrt(λ_k / M) for k = 0..=N
        scale: Vec<f64>,
        fft: Arc<dyn Fft<f64>>,
    },
    Cholesky {
        lower: DMatrix<f64>,
    },
}

/// Precomputed sampler for a fixed `(H, N, d, method)`.
pub struct FbmSampler {
    hurst: f64,
    n: usize,
    d: usize,
    method: SamplingMethod,
    engine: Engine,
}

impl fmt::Debug for FbmSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FbmSampler")
            .field("hurst", &self.hurst)
            .field("n", &self.n)
            .field("d", &self.d)
            .field("method", &self.method)
            .finish()
    }
}

impl FbmSampler {
    /// Builds the sampler. A circulant embedding that fails to be
    /// nonnegative-definite falls back to Cholesky with a warning.
    pub fn new(hurst: f64, n: usize, d: usize, method: SamplingMethod) -> Result<Self> {
        check_hurst(hurst)?;
        if n == 0 || d == 0 {
            return Err(Error::Domain("grid size and dimension must be positive".into()));
        }
        let engine = match method {
            SamplingMethod::Circulant => {
                if !n.is_power_of_two() {
                    return Err(Error::Domain(format!(
                        "circulant sampling needs a power-of-two grid, got N = {n}"
                    )));
                }
                match circulant_engine(hurst, n) {
                    Some(e) => e,
                    None => {
                        log::warn!(
                            "circulant embedding for H = {hurst}, N = {n} is not nonnegative-definite; falling back to Cholesky"
                        );
                        return Self::new(hurst, n, d, SamplingMethod::Cholesky);
                    }
                }
            }
            SamplingMethod::Cholesky => cholesky_engine(hurst, n)?,
        };
        Ok(FbmSampler {
            hurst,
            n,
            d,
            method,
            engine,
        })
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn grid_size(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Method actually in use (after any fallback).
    pub fn method(&self) -> SamplingMethod {
        self.method
    }

    /// Path number `index` of the ensemble seeded by `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> FbmPath {
        let mut rng = path_rng(seed, index);
        let (n, d) = (self.n, self.d);
        let step_scale = (1.0 / n as f64).powf(self.hurst);
        let mut values = vec![0.0; (n + 1) * d];
        let mut noise = vec![0.0; n];
        let mut buf = match self.engine {
            Engine::Circulant { .. } => vec![Complex64::new(0.0, 0.0); 2 * n],
            Engine::Cholesky { .. } => Vec::new(),
        };
        for j in 0..d {
            match &self.engine {
                Engine::Circulant { scale, fft } => {
                    let m = 2 * n;
                    buf[0] = Complex64::new(scale[0] * rng.sample::<f64, _>(StandardNormal), 0.0);
                    buf[n] = Complex64::new(scale[n] * rng.sample::<f64, _>(StandardNormal), 0.0);
                    for k in 1..n {
                        let s = scale[k] * std::f64::consts::FRAC_1_SQRT_2;
                        let re = s * rng.sample::<f64, _>(StandardNormal);
                        let im = s * rng.sample::<f64, _>(StandardNormal);
                        buf[k] = Complex64::new(re, im);
                        buf[m - k] = Complex64::new(re, -im);
                    }
                    fft.process(&mut buf);
                    for k in 0..n {
                        noise[k] = buf[k].re;
                    }
                }
                Engine::Cholesky { lower } => {
                    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let x = lower * z;
                    noise.copy_from_slice(x.as_slice());
                }
            }
            let mut acc = 0.0;
            for k in 0..n {
                acc += step_scale * noise[k];
                values[(k + 1) * d + j] = acc;
            }
        }
        FbmPath {
            hurst: self.hurst,
            n,
            d,
            values,
        }
    }
}

fn circulant_engine(hurst: f64, n: usize) -> Option<Engine> {
    let m = 2 * n;
    let mut c: Vec<Complex64> = (0..m)
        .map(|k| {
            let lag = if k <= n { k } else { m - k };
            Complex64::new(fgn_autocovariance(lag, hurst), 0.0)
        })
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(m);
    fft.process(&mut c);
    let max = c.iter().map(|z| z.re).fold(0.0, f64::max);
    let mut scale = Vec::with_capacity(n + 1);
    for z in c.iter().take(n + 1) {
        let lambda = z.re;
        if lambda < -1e-10 * max {
            return None;
        }
        scale.push((lambda.max(0.0) / m as f64).sqrt());
    }
    Some(Engine::Circulant { scale, fft })
}

fn cholesky_engine(hurst: f64, n: usize) -> Result<Engine> {
    let gamma: Vec<f64> = (0..n).map(|k| fgn_autocovariance(k, hurst)).collect();
    let cov = DMatrix::from_fn(n, n, |i, j| gamma[i.abs_diff(j)]);
    let chol = nalgebra::Cholesky::new(cov).ok_or(Error::Cholesky(n))?;
    Ok(Engine::Cholesky { lower: chol.l() })
}

/// Convenience wrapper: path 0 of the ensemble `(H, N, d, seed, method)`.
pub fn sample(hurst: f64, n: usize, d: usize, seed: u64, method: SamplingMethod) -> Result<FbmPath> {
    Ok(FbmSampler::new(hurst, n, d, method)?.sample(seed, 0))
}
