//! Cameron–Martin inner products for step functions on the simulation grid.
//!
//! For step functions `f = Σ_k f[k] 1_{[t_k, t_{k+1})}` the ℋ pairing is the
//! quadratic form of the increment covariance,
//! `⟨f, g⟩_ℋ = Σ_{k,l} Σ_j f_j[k] g_j[l] Cov(ΔB_k, ΔB_l)`, which is exact for
//! every Hurst parameter in (1/4, 1). On a uniform grid the covariance is
//! Toeplitz, `Cov(ΔB_k, ΔB_l) = N^{-2H} γ(|k−l|)`, so applying it to a vector
//! can be done with one circulant FFT of size `2N`.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::fbm::{fgn_autocovariance, holder_norm_grid, sup_norm_grid};
use crate::{Error, Result};

/// `ℝ^d`-valued function, constant on each cell `[t_k, t_{k+1})` of the
/// uniform grid with `N` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct StepFunction {
    n: usize,
    d: usize,
    // n × d, row-major by cell
    values: Vec<f64>,
}

impl StepFunction {
    pub fn zeros(n: usize, d: usize) -> Self {
        StepFunction {
            n,
            d,
            values: vec![0.0; n * d],
        }
    }

    pub fn from_values(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * d {
            return Err(Error::GridMismatch(format!(
                "{} values for a {n}-cell grid of {d}-vectors",
                values.len()
            )));
        }
        Ok(StepFunction { n, d, values })
    }

    /// Scalar step function from per-cell values.
    pub fn scalar(values: Vec<f64>) -> Self {
        StepFunction {
            n: values.len(),
            d: 1,
            values,
        }
    }

    /// `1_{[0, t_cells/N)}` in component `component`.
    pub fn indicator(n: usize, d: usize, cells: usize, component: usize) -> Self {
        let mut f = StepFunction::zeros(n, d);
        for k in 0..cells.min(n) {
            f.values[k * d + component] = 1.0;
        }
        f
    }

    /// Step approximation of a function known at the `N + 1` grid points:
    /// each cell takes the mean of its two endpoint values.
    pub fn from_grid_values(points: &[f64], d: usize) -> Self {
        let n = points.len() / d - 1;
        let mut values = vec![0.0; n * d];
        for k in 0..n {
            for j in 0..d {
                values[k * d + j] = 0.5 * (points[k * d + j] + points[(k + 1) * d + j]);
            }
        }
        StepFunction { n, d, values }
    }

    pub fn grid_size(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.d + j]
    }

    pub fn set(&mut self, k: usize, j: usize, v: f64) {
        self.values[k * self.d + j] = v;
    }

    /// Component `j` as a contiguous vector over cells.
    pub fn component(&self, j: usize) -> Vec<f64> {
        self.values.iter().skip(j).step_by(self.d).copied().collect()
    }

    /// Copy with every cell at index `>= cells` set to zero.
    pub fn truncated(&self, cells: usize) -> Self {
        let mut out = self.clone();
        for v in &mut out.values[cells.min(self.n) * self.d..] {
            *v = 0.0;
        }
        out
    }

    /// `L²([0,1])` norm (exact for step functions).
    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() / self.n as f64).sqrt()
    }

    /// Exact `L²` pairing `Σ_k f[k]·g[k] / N`.
    pub fn l2_inner(&self, other: &StepFunction) -> Result<f64> {
        check_same_grid(self, other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>() / self.n as f64)
    }
}

fn check_same_grid(f: &StepFunction, g: &StepFunction) -> Result<()> {
    if f.n != g.n || f.d != g.d {
        return Err(Error::GridMismatch(format!(
            "step functions on ({}, d={}) and ({}, d={})",
            f.n, f.d, g.n, g.d
        )));
    }
    Ok(())
}

/// Lag weights `w(m) = Cov(ΔB_k, ΔB_{k+m})` for a fixed `(H, N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IncrementCovariance {
    hurst: f64,
    n: usize,
    weights: Vec<f64>,
}

impl IncrementCovariance {
    pub fn new(hurst: f64, n: usize) -> Self {
        let scale = (1.0 / n as f64).powf(2.0 * hurst);
        let weights = (0..n).map(|m| scale * fgn_autocovariance(m, hurst)).collect();
        IncrementCovariance { hurst, n, weights }
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn grid_size(&self) -> usize {
        self.n
    }

    pub fn weight(&self, lag: usize) -> f64 {
        self.weights[lag]
    }

    /// Text cache format: a header line `increment-covariance H N`, then one
    /// weight per line in round-trip precision.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "increment-covariance {} {}", self.hurst, self.n)?;
        for v in &self.weights {
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| parse_err(1, "empty file"))??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "increment-covariance" {
            return Err(parse_err(1, "expected `increment-covariance H N`"));
        }
        let hurst: f64 = parts[1].parse().map_err(|_| parse_err(1, "bad H"))?;
        let n: usize = parts[2].parse().map_err(|_| parse_err(1, "bad N"))?;
        let mut weights = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            weights.push(line.trim().parse().map_err(|_| parse_err(i + 2, "bad weight"))?);
        }
        if weights.len() != n {
            return Err(parse_err(0, &format!("expected {n} weights, found {}", weights.len())));
        }
        Ok(IncrementCovariance { hurst, n, weights })
    }

    /// Direct `O(N² d)` evaluation of `⟨f, g⟩_ℋ`.
    pub fn inner_h(&self, f: &StepFunction, g: &StepFunction) -> Result<f64> {
        check_same_grid(f, g)?;
        if f.n != self.n {
            return Err(Error::GridMismatch(format!(
                "step functions have {} cells, covariance has {}",
                f.n, self.n
            )));
        }
        let d = f.d;
        let mut total = 0.0;
        for k in 0..self.n {
            let fk = &f.values[k * d..(k + 1) * d];
            if fk.iter().all(|&v| v == 0.0) {
                continue;
            }
            for l in 0..self.n {
                let gl = &g.values[l * d..(l + 1) * d];
                let dot: f64 = fk.iter().zip(gl).map(|(a, b)| a * b).sum();
                total += dot * self.weights[k.abs_diff(l)];
            }
        }
        Ok(total)
    }
}

fn parse_err(line: usize, msg: &str) -> Error {
    Error::Parse {
        line,
        msg: msg.to_string(),
    }
}

/// Convenience wrapper building the weights on the fly.
pub fn inner_h(f: &StepFunction, g: &StepFunction, hurst: f64) -> Result<f64> {
    IncrementCovariance::new(hurst, f.grid_size()).inner_h(f, g)
}

/// FFT application of the increment covariance, for many pairings on the
/// same grid.
#[derive(Clone)]
pub struct ToeplitzOperator {
    n: usize,
    // FFT of the circulant first column, divided by 2N
    symbol: Vec<Complex64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for ToeplitzOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToeplitzOperator").field("n", &self.n).finish()
    }
}

impl ToeplitzOperator {
    pub fn new(cov: &IncrementCovariance) -> Self {
        let n = cov.n;
        let m = 2 * n;
        let mut planner = FftPlanner::<f64>::new();
        let forward = planner.plan_fft_forward(m);
        let inverse = planner.plan_fft_inverse(m);
        let mut symbol = vec![Complex64::new(0.0, 0.0); m];
        for k in 0..n {
            symbol[k].re = cov.weights[k];
        }
        for k in 1..n {
            symbol[m - k].re = cov.weights[k];
        }
        forward.process(&mut symbol);
        for z in &mut symbol {
            *z /= m as f64;
        }
        ToeplitzOperator {
            n,
            symbol,
            forward,
            inverse,
        }
    }

    pub fn grid_size(&self) -> usize {
        self.n
    }

    /// `(T v)_k = Σ_l w(|k−l|) v_l`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n, "vector length must match the grid");
        let mut buf: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        buf.resize(2 * self.n, Complex64::new(0.0, 0.0));
        self.forward.process(&mut buf);
        for (z, s) in buf.iter_mut().zip(&self.symbol) {
            *z *= s;
        }
        self.inverse.process(&mut buf);
        buf.truncate(self.n);
        buf.into_iter().map(|z| z.re).collect()
    }

    /// Gram matrix `G_{ab} = ⟨f_a, f_b⟩_ℋ` (row-major, `fs.len()²` entries).
    pub fn gram(&self, fs: &[StepFunction]) -> Result<Vec<f64>> {
        let w = fs.len();
        let Some(first) = fs.first() else {
            return Ok(Vec::new());
        };
        let d = first.dim();
        for f in fs {
            if f.grid_size() != self.n || f.dim() != d {
                return Err(Error::GridMismatch("Gram inputs must share grid and dimension".into()));
            }
        }
        let mut gram = vec![0.0; w * w];
        for j in 0..d {
            let comps: Vec<Vec<f64>> = fs.iter().map(|f| f.component(j)).collect();
            let applied: Vec<Vec<f64>> = comps.iter().map(|c| self.apply(c)).collect();
            for a in 0..w {
                for b in a..w {
                    let v: f64 = comps[a].iter().zip(&applied[b]).map(|(x, y)| x * y).sum();
                    gram[a * w + b] += v;
                }
            }
        }
        for a in 0..w {
            for b in 0..a {
                gram[a * w + b] = gram[b * w + a];
            }
        }
        Ok(gram)
    }
}

/// Both sides of the two interpolation inequalities evaluated on one
/// function sampled at the `N + 1` grid points.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct InterpolationReport {
    pub h_norm: f64,
    pub sup_norm: f64,
    pub l2_norm: f64,
    pub holder_norm: f64,
    /// `∥f∥_ℋ / (∥f∥_∞^{3+1/γ} / ∥f∥_γ^{2+1/γ})`; `None` when the right
    /// side vanishes.
    pub h_lower_ratio: Option<f64>,
    /// `2 max{∥f∥_{L²}, ∥f∥_{L²}^{2γ/(2γ+1)} ∥f∥_γ^{1/(2γ+1)}}`.
    pub sup_bound: f64,
    pub sup_bound_holds: bool,
}

/// Evaluates the ℋ lower bound and the sup-norm interpolation bound on a
/// grid function (`points.len() = (N+1)·d`). The ℋ norm uses the step
/// approximation of [`StepFunction::from_grid_values`]; the `L²` norm is the
/// trapezoid rule on `|f|²`.
pub fn check_interpolation(points: &[f64], d: usize, hurst: f64, gamma: f64) -> InterpolationReport {
    let step = StepFunction::from_grid_values(points, d);
    let h_norm = inner_h(&step, &step, hurst).unwrap_or(0.0).max(0.0).sqrt();
    let sup_norm = sup_norm_grid(points, d);
    let holder_norm = holder_norm_grid(points, d, gamma);
    let sq: Vec<f64> = points.chunks(d).map(|p| p.iter().map(|v| v * v).sum()).collect();
    let n = (sq.len() - 1) as f64;
    let trap = sq.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum::<f64>() / n;
    let l2_norm = trap.sqrt();
    let rhs = sup_norm.powf(3.0 + 1.0 / gamma) / holder_norm.powf(2.0 + 1.0 / gamma);
    let h_lower_ratio = (rhs > 0.0 && rhs.is_finite()).then(|| h_norm / rhs);
    let e = 2.0 * gamma + 1.0;
    let sup_bound = 2.0 * l2_norm.max(l2_norm.powf(2.0 * gamma / e) * holder_norm.powf(1.0 / e));
    InterpolationReport {
        h_norm,
        sup_norm,
        l2_norm,
        holder_norm,
        h_lower_ratio,
        sup_bound,
        sup_bound_holds: sup_norm <= sup_bound * (1.0 + 1e-12),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::{covariance, FbmSampler, SamplingMethod};
    use crate::mc::path_rng;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn indicators_reproduce_covariance() {
        for h in [0.3, 0.5, 0.75] {
            let n = 32;
            let cov = IncrementCovariance::new(h, n);
            for a in [1, 7, 16, 32] {
                for b in [3, 16, 32] {
                    let f = StepFunction::indicator(n, 1, a, 0);
                    let g = StepFunction::indicator(n, 1, b, 0);
                    let exact = covariance(a as f64 / 32.0, b as f64 / 32.0, h).unwrap();
                    assert_relative_eq!(cov.inner_h(&f, &g).unwrap(), exact, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn indicator_norm_is_t_to_2h() {
        let f = StepFunction::indicator(64, 2, 16, 1);
        assert_relative_eq!(inner_h(&f, &f, 0.7).unwrap(), 0.25f64.powf(1.4), epsilon = 1e-14);
    }

    #[test]
    fn constant_one_has_unit_norm() {
        let one = StepFunction::from_values(128, 1, vec![1.0; 128]).unwrap();
        assert_relative_eq!(inner_h(&one, &one, 0.75).unwrap(), 1.0, epsilon = 1e-12);
        // oracle: H(2H-1)∫∫|s-t|^{2H-2} = 1 for H > 1/2, done by hand for H = 0.75
        // (0.375 · ∫∫|s-t|^{-1/2} ds dt = 0.375 · 8/3)
        assert_relative_eq!(0.375 * 8.0 / 3.0, 1.0, epsilon = 1e-15);
    }

    fn random_step(n: usize, d: usize, seed: u64) -> StepFunction {
        let mut rng = path_rng(seed, 0);
        StepFunction::from_values(n, d, (0..n * d).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()
    }

    #[test]
    fn brownian_case_is_l2() {
        for s in 0..5 {
            let f = random_step(50, 2, s);
            let g = random_step(50, 2, s + 100);
            let h = inner_h(&f, &g, 0.5).unwrap();
            let l2 = f.l2_inner(&g).unwrap();
            assert!((h - l2).abs() <= 1e-12 * f.l2_norm() * g.l2_norm());
        }
    }

    #[test]
    fn fft_matches_direct_and_is_psd() {
        for h in [0.3, 0.5, 0.8] {
            let cov = IncrementCovariance::new(h, 40);
            let op = ToeplitzOperator::new(&cov);
            let fs: Vec<StepFunction> = (0..5).map(|s| random_step(40, 2, s)).collect();
            let gram = op.gram(&fs).unwrap();
            for a in 0..5 {
                for b in 0..5 {
                    let direct = cov.inner_h(&fs[a], &fs[b]).unwrap();
                    assert_relative_eq!(gram[a * 5 + b], direct, epsilon = 1e-12);
                }
            }
            let m = DMatrix::from_row_slice(5, 5, &gram);
            let trace = m.trace();
            let min = m.symmetric_eigenvalues().min();
            assert!(min >= -1e-8 * trace, "min eigenvalue {min}");
        }
    }

    #[test]
    fn symmetric_pairing() {
        let f = random_step(30, 1, 1);
        let g = random_step(30, 1, 2);
        assert_relative_eq!(
            inner_h(&f, &g, 0.35).unwrap(),
            inner_h(&g, &f, 0.35).unwrap(),
            epsilon = 1e-14
        );
        assert!(inner_h(&f, &random_step(31, 1, 3), 0.5).is_err());
    }

    #[test]
    fn l2_norm_examples() {
        let one = StepFunction::scalar(vec![1.0; 10]);
        assert_relative_eq!(one.l2_norm(), 1.0);
        assert_eq!(StepFunction::scalar(vec![0.0; 10]).l2_norm(), 0.0);
        let n = 1000;
        let ramp = StepFunction::scalar((0..n).map(|k| (k as f64 + 0.5) / n as f64).collect());
        assert!((ramp.l2_norm() - (1.0f64 / 3.0).sqrt()).abs() < 1.0 / n as f64);
    }

    #[test]
    fn weights_roundtrip_through_text() {
        let cov = IncrementCovariance::new(0.63, 17);
        let mut buf = Vec::new();
        cov.write_text(&mut buf).unwrap();
        let back = IncrementCovariance::read_text(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, cov);
        assert!(IncrementCovariance::read_text(std::io::Cursor::new("nope 1 2\n")).is_err());
    }

    #[test]
    fn interpolation_trivial_cases() {
        let zero = check_interpolation(&[0.0; 17], 1, 0.7, 0.6);
        assert_eq!(zero.h_lower_ratio, None);
        assert!(zero.sup_bound_holds);
        let one = check_interpolation(&[1.0; 17], 1, 0.7, 0.6);
        assert_relative_eq!(one.sup_norm, 1.0);
        assert_relative_eq!(one.l2_norm, 1.0);
        assert!(one.sup_bound_holds);
    }

    #[test]
    fn sup_bound_holds_on_fbm_paths() {
        let sampler = FbmSampler::new(0.7, 128, 1, SamplingMethod::Circulant).unwrap();
        for i in 0..1000 {
            let p = sampler.sample(21, i);
            let r = check_interpolation(p.values(), 1, 0.7, 0.6);
            assert!(r.sup_bound_holds, "path {i}: {r:?}");
            assert!(r.h_lower_ratio.unwrap() > 0.0);
        }
    }

    fn step_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0..3.0f64, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pairing_is_symmetric_bilinear_and_positive(
            f in step_values(24),
            g in step_values(24),
            a in -2.0..2.0f64,
            h in 0.26..0.99f64,
        ) {
            let (f, g) = (StepFunction::scalar(f), StepFunction::scalar(g));
            let fg = inner_h(&f, &g, h).unwrap();
            let ff = inner_h(&f, &f, h).unwrap();
            let gg = inner_h(&g, &g, h).unwrap();
            let scale = ff.max(gg).max(1e-12);
            prop_assert!((fg - inner_h(&g, &f, h).unwrap()).abs() <= 1e-12 * scale);
            prop_assert!(ff >= -1e-12 * scale);
            prop_assert!(fg * fg <= ff * gg * (1.0 + 1e-9) + 1e-12 * scale * scale);
            let mix: Vec<f64> = f.values().iter().zip(g.values()).map(|(x, y)| a * x + y).collect();
            let lhs = inner_h(&StepFunction::scalar(mix), &f, h).unwrap();
            prop_assert!((lhs - (a * ff + fg)).abs() <= 1e-10 * scale * (1.0 + a.abs()));
        }
    }
}
