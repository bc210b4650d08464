//! Malliavin and Gram matrices, minimal eigenvalues, inverse moments and
//! small-ball probabilities.
//!
//! `M_{IJ} = Σ_j ⟨β^I_{(j)}, β^J_{(j)}⟩_ℋ` where `β^I_{(j)}(s)` is the column
//! `I` of β in the single-letter row `(j)`; rows and columns follow the
//! frame enumeration order.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::cm_space::{IncrementCovariance, StepFunction, ToeplitzOperator};
use crate::fbm::{FbmSampler, SamplingMethod};
use crate::flow::{integrate, FlowBundle, System};
use crate::mc::{par_map, SimSettings};
use crate::signature::{compute_signature, SignaturePath};
use crate::stats::{fit_line, quantile, wilson_interval, LineFit, Summary};
use crate::words::{Word, WordBasis};
use crate::{Error, Result};

/// Symmetric matrix indexed by words.
#[derive(Clone, Debug, PartialEq)]
pub struct MalliavinMatrix {
    pub epsilon: f64,
    pub words: Vec<Word>,
    pub data: DMatrix<f64>,
}

impl MalliavinMatrix {
    pub fn dim(&self) -> usize {
        self.words.len()
    }

    pub fn get(&self, i: &Word, j: &Word) -> Option<f64> {
        let a = self.words.iter().position(|w| w == i)?;
        let b = self.words.iter().position(|w| w == j)?;
        Some(self.data[(a, b)])
    }

    pub fn trace(&self) -> f64 {
        self.data.trace()
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        min_eigenvalue(&self.data)
    }
}

/// `M` on `[0, 1]` with a fresh covariance operator.
pub fn malliavin_matrix(bundle: &FlowBundle, frame: &WordBasis) -> Result<MalliavinMatrix> {
    let op = ToeplitzOperator::new(&IncrementCovariance::new(bundle.hurst(), bundle.grid_size()));
    malliavin_matrix_with(bundle, frame, &op, bundle.grid_size())
}

/// `M(t)` for `t = cells / N`, reusing `op` (built for the bundle's grid).
pub fn malliavin_matrix_with(
    bundle: &FlowBundle,
    frame: &WordBasis,
    op: &ToeplitzOperator,
    cells: usize,
) -> Result<MalliavinMatrix> {
    if frame.len() != bundle.frame_len() {
        return Err(Error::GridMismatch(format!(
            "frame has {} words, bundle β is {}×{}",
            frame.len(),
            bundle.frame_len(),
            bundle.frame_len()
        )));
    }
    if op.grid_size() != bundle.grid_size() {
        return Err(Error::GridMismatch("covariance operator built for another grid".into()));
    }
    let mut fs = bundle.beta_step_functions();
    if cells < bundle.grid_size() {
        fs = fs.iter().map(|f| f.truncated(cells)).collect();
    }
    let w = fs.len();
    let gram = op.gram(&fs)?;
    Ok(MalliavinMatrix {
        epsilon: bundle.epsilon(),
        words: frame.words().to_vec(),
        data: DMatrix::from_row_slice(w, w, &gram),
    })
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::NotSymmetric(f64::INFINITY));
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let asym = (m - m.transpose()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if asym > 1e-10 * scale {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix (dense symmetric eigensolve).
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(m)?;
    Ok(m.clone().symmetric_eigenvalues().min())
}

/// `min { aᵀ M a : Σ w_I a_I² = 1 }`, i.e. the smallest eigenvalue of
/// `W^{-1/2} M W^{-1/2}` for positive weights.
pub fn min_eigenvalue_weighted(m: &DMatrix<f64>, weights: &[f64]) -> Result<f64> {
    check_symmetric(m)?;
    if weights.len() != m.nrows() || weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Domain("weights must be positive, one per row".into()));
    }
    let s: Vec<f64> = weights.iter().map(|w| 1.0 / w.sqrt()).collect();
    let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| s[i] * m[(i, j)] * s[j]);
    Ok(scaled.symmetric_eigenvalues().min())
}

/// `G_{IJ} = ∫_0^1 B^I_t B^J_t dt` by the composite trapezoid rule.
pub fn gram_l2_signature(sig: &SignaturePath, words: &[Word]) -> Result<DMatrix<f64>> {
    let series: Vec<Vec<f64>> = words
        .iter()
        .map(|w| {
            sig.series(w)
                .ok_or_else(|| Error::Domain(format!("word {w} is not in the signature")))
        })
        .collect::<Result<_>>()?;
    Ok(gram_l2_grid(&series))
}

/// Trapezoid Gram matrix of scalar series sampled on the uniform grid.
pub fn gram_l2_grid(series: &[Vec<f64>]) -> DMatrix<f64> {
    let w = series.len();
    let mut g = DMatrix::zeros(w, w);
    for a in 0..w {
        for b in a..w {
            let (x, y) = (&series[a], &series[b]);
            let n = x.len() - 1;
            let mut acc = 0.5 * (x[0] * y[0] + x[n] * y[n]);
            for k in 1..n {
                acc += x[k] * y[k];
            }
            let v = acc / n as f64;
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    g
}

/// Exact `L²` Gram matrix of step functions (componentwise pairing).
pub fn gram_l2_steps(fs: &[StepFunction]) -> Result<DMatrix<f64>> {
    let w = fs.len();
    let mut g = DMatrix::zeros(w, w);
    for a in 0..w {
        for b in a..w {
            let v = fs[a].l2_inner(&fs[b])?;
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    Ok(g)
}

/// Relative floor under which `λ_min(M)` counts as degenerate.
pub const LAMBDA_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, Serialize)]
pub struct InverseMomentRow {
    pub epsilon: f64,
    /// Mean of `λ_min(M^ε)^{-p}` over the usable paths.
    pub estimate: f64,
    pub stderr: f64,
    /// 95th percentile of `λ_min^{-1}`.
    pub q95_inverse: f64,
    pub n_used: usize,
    /// Paths whose integration blew up.
    pub n_excluded: usize,
    /// Paths with `λ_min < LAMBDA_FLOOR · trace`.
    pub n_below_floor: usize,
}

/// Monte Carlo `E λ_min(M^ε(x))^{-p}` for each `ε`. Every `ε` uses the same
/// driving paths.
pub fn inverse_moment_estimate(
    sys: &System,
    x: &[f64],
    epsilons: &[f64],
    p: f64,
    sim: SimSettings,
) -> Result<Vec<InverseMomentRow>> {
    if p < 0.0 {
        return Err(Error::Domain("moment order must be nonnegative".into()));
    }
    let sampler = FbmSampler::new(sim.hurst, sim.grid_size, sys.noise_dim(), SamplingMethod::Circulant)?;
    let op = ToeplitzOperator::new(&IncrementCovariance::new(sim.hurst, sim.grid_size));
    let frame = sys.frame_basis();
    // per path, per epsilon: Ok(Some(λ, trace)), Ok(None) for blowup
    let per_path: Vec<Result<Vec<Option<(f64, f64)>>>> = par_map(sim.n_paths, |i| {
        let path = sampler.sample(sim.seed, i as u64);
        epsilons
            .iter()
            .map(|&eps| match integrate(sys, &path, x, eps, sim.substeps) {
                Ok(b) => {
                    let m = malliavin_matrix_with(&b, frame, &op, b.grid_size())?;
                    Ok(Some((m.min_eigenvalue()?, m.trace())))
                }
                Err(Error::Blowup { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect()
    });
    let per_path: Vec<Vec<Option<(f64, f64)>>> = per_path.into_iter().collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(epsilons.len());
    for (e, &eps) in epsilons.iter().enumerate() {
        let mut summary = Summary::default();
        let mut inverses = Vec::new();
        let (mut excluded, mut below) = (0, 0);
        for path in &per_path {
            match path[e] {
                None => excluded += 1,
                Some((lam, trace)) if !(lam >= LAMBDA_FLOOR * trace) || lam <= 0.0 => below += 1,
                Some((lam, _)) => {
                    summary.push(if p == 0.0 { 1.0 } else { lam.powf(-p) });
                    inverses.push(1.0 / lam);
                }
            }
        }
        rows.push(InverseMomentRow {
            epsilon: eps,
            estimate: summary.mean,
            stderr: summary.stderr(),
            q95_inverse: if inverses.is_empty() { f64::NAN } else { quantile(&inverses, 0.95) },
            n_used: summary.n,
            n_excluded: excluded,
            n_below_floor: below,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct SmallBallRow {
    pub epsilon: f64,
    pub hits: usize,
    pub n_paths: usize,
    pub probability: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SmallBallReport {
    pub rows: Vec<SmallBallRow>,
    /// Weighted log–log fit over cells with at least 5 hits and `p < 1`;
    /// `None` when fewer than two cells qualify.
    pub fit: Option<LineFit>,
}

/// Minimum hits for a cell to enter the slope fit.
pub const MIN_HITS: usize = 5;

/// `P(sup_t |Σ_I a_I B^I_t| < ε)` on the grid for each `ε`.
/// Coefficients must have unit Euclidean norm.
pub fn small_ball_estimate(
    d: usize,
    m: usize,
    coeffs: &[(Word, f64)],
    eps_grid: &[f64],
    sim: SimSettings,
) -> Result<SmallBallReport> {
    let norm2: f64 = coeffs.iter().map(|(_, a)| a * a).sum();
    if (norm2 - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("coefficients have squared norm {norm2}, expected 1")));
    }
    let sampler = FbmSampler::new(sim.hurst, sim.grid_size, d, SamplingMethod::Circulant)?;
    let sups: Vec<Result<f64>> = par_map(sim.n_paths, |i| {
        let path = sampler.sample(sim.seed, i as u64);
        if m == 1 && coeffs.iter().all(|(w, _)| w.len() <= 1) {
            // fast path: level-one combinations are affine in the path
            let mut a0 = 0.0;
            let mut lin = vec![0.0; d];
            for (w, a) in coeffs {
                match w.letters() {
                    [] => a0 += a,
                    [j] if (*j as usize) <= d => lin[*j as usize - 1] += a,
                    _ => return Err(Error::Domain(format!("word {w} outside the alphabet"))),
                }
            }
            let mut sup = 0.0f64;
            for k in 0..=path.grid_size() {
                let v: f64 = a0 + path.point(k).iter().zip(&lin).map(|(b, c)| b * c).sum::<f64>();
                sup = sup.max(v.abs());
            }
            Ok(sup)
        } else {
            compute_signature(&path, m)?.linear_combination_supnorm(coeffs)
        }
    });
    let sups: Vec<f64> = sups.into_iter().collect::<Result<_>>()?;
    let n = sups.len();
    let rows: Vec<SmallBallRow> = eps_grid
        .iter()
        .map(|&eps| {
            let hits = sups.iter().filter(|&&s| s < eps).count();
            let (lo, hi) = wilson_interval(hits, n, 1.96);
            SmallBallRow {
                epsilon: eps,
                hits,
                n_paths: n,
                probability: hits as f64 / n as f64,
                wilson_low: lo,
                wilson_high: hi,
            }
        })
        .collect();
    let usable: Vec<&SmallBallRow> = rows
        .iter()
        .filter(|r| r.hits >= MIN_HITS && r.hits < r.n_paths)
        .collect();
    let x: Vec<f64> = usable.iter().map(|r| r.epsilon.ln()).collect();
    let y: Vec<f64> = usable.iter().map(|r| r.probability.ln()).collect();
    // inverse delta-method variance of ln p̂
    let w: Vec<f64> = usable
        .iter()
        .map(|r| r.n_paths as f64 * r.probability / (1.0 - r.probability))
        .collect();
    Ok(SmallBallReport {
        fit: fit_line(&x, &y, &w),
        rows,
    })
}
