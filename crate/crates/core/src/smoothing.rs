//! Monte Carlo `P_t f(x) = E f(X^x_t)`, finite-difference derivatives along
//! bracket fields, the smoothing-exponent fit and the pathwise
//! integration-by-parts check.
//!
//! Small times are handled through the scaling identity: `X^x_t` has the law
//! of the rescaled flow `X^{ε,x}_1` with `ε = t`, so every estimate integrates
//! on the full `[0, 1]` grid.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cm_space::{IncrementCovariance, StepFunction, ToeplitzOperator};
use crate::fbm::{FbmPath, FbmSampler, SamplingMethod};
use crate::flow::{integrate, malliavin_kernel_grid, terminal_state, System};
use crate::matrices::LAMBDA_FLOOR;
use crate::mc::{par_map, SimSettings};
use crate::stats::{fit_line, median, LineFit, Summary};
use crate::vfields::norm;
use crate::words::Word;
use crate::{Error, Result};

/// Scalar test function with an exact gradient.
pub trait TestFunction: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, y: &[f64]) -> f64;
    fn gradient(&self, y: &[f64], out: &mut [f64]);
    /// `∥f∥_∞` when `f` is bounded.
    fn sup_norm(&self) -> Option<f64>;
}

/// `1 / (1 + exp(−λ u·(y − c)))`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sigmoid {
    pub steepness: f64,
    pub center: Vec<f64>,
    pub direction: Vec<f64>,
}

impl Sigmoid {
    pub fn new(steepness: f64, center: Vec<f64>, direction: Vec<f64>) -> Result<Self> {
        if center.len() != direction.len() {
            return Err(Error::Domain("sigmoid center and direction differ in length".into()));
        }
        Ok(Sigmoid {
            steepness,
            center,
            direction,
        })
    }

    fn argument(&self, y: &[f64]) -> f64 {
        let s: f64 = y
            .iter()
            .zip(&self.center)
            .zip(&self.direction)
            .map(|((y, c), u)| u * (y - c))
            .sum();
        self.steepness * s
    }
}

impl TestFunction for Sigmoid {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn eval(&self, y: &[f64]) -> f64 {
        1.0 / (1.0 + (-self.argument(y)).exp())
    }

    fn gradient(&self, y: &[f64], out: &mut [f64]) {
        let s = self.eval(y);
        let g = self.steepness * s * (1.0 - s);
        for (o, u) in out.iter_mut().zip(&self.direction) {
            *o = g * u;
        }
    }

    fn sup_norm(&self) -> Option<f64> {
        Some(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Constant {
    pub dim: usize,
    pub value: f64,
}

impl TestFunction for Constant {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, _: &[f64]) -> f64 {
        self.value
    }

    fn gradient(&self, _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn sup_norm(&self) -> Option<f64> {
        Some(self.value.abs())
    }
}

/// `a·y + b`, unbounded unless `a = 0`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Linear {
    pub coeffs: Vec<f64>,
    pub offset: f64,
}

impl TestFunction for Linear {
    fn dim(&self) -> usize {
        self.coeffs.len()
    }

    fn eval(&self, y: &[f64]) -> f64 {
        self.offset + y.iter().zip(&self.coeffs).map(|(y, a)| y * a).sum::<f64>()
    }

    fn gradient(&self, _: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.coeffs);
    }

    fn sup_norm(&self) -> Option<f64> {
        self.coeffs.iter().all(|&a| a == 0.0).then_some(self.offset.abs())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub estimate: f64,
    pub stderr: f64,
    pub n_used: usize,
    pub n_excluded: usize,
}

/// Maximum fraction of paths a stencil point may lose to blowups.
pub const MAX_EXCLUSION_RATE: f64 = 1e-3;

fn check_inputs(f: &dyn TestFunction, sys: &System, x: &[f64], t: f64) -> Result<()> {
    if f.dim() != sys.state_dim() || x.len() != sys.state_dim() {
        return Err(Error::Domain(format!(
            "state dimension {} does not match the test function ({}) or point ({})",
            sys.state_dim(),
            f.dim(),
            x.len()
        )));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!("time {t} outside (0, 1]")));
    }
    Ok(())
}

fn sampler(sys: &System, sim: &SimSettings) -> Result<FbmSampler> {
    FbmSampler::new(sim.hurst, sim.grid_size, sys.noise_dim(), SamplingMethod::Circulant)
}

/// Monte Carlo `P_t f(x)`.
pub fn estimate_pt(f: &dyn TestFunction, sys: &System, x: &[f64], t: f64, sim: SimSettings) -> Result<Estimate> {
    check_inputs(f, sys, x, t)?;
    let sampler = sampler(sys, &sim)?;
    let values: Vec<Result<Option<f64>>> = par_map(sim.n_paths, |i| {
        let path = sampler.sample(sim.seed, i as u64);
        match terminal_state(sys, &path, x, t, sim.substeps, path.grid_size()) {
            Ok(y) => Ok(Some(f.eval(&y))),
            Err(Error::Blowup { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let mut s = Summary::default();
    let mut excluded = 0;
    for v in values {
        match v? {
            Some(v) => s.push(v),
            None => excluded += 1,
        }
    }
    Ok(Estimate {
        estimate: s.mean,
        stderr: s.stderr(),
        n_used: s.n,
        n_excluded: excluded,
    })
}

/// Evaluation points and weights of one finite-difference stencil. Point 0
/// is the base point with weight zero (used for the `P_t f²` diagnostic).
#[derive(Clone, Debug)]
struct Stencil {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    step: f64,
}

fn bracket_value(sys: &System, word: &Word, y: &[f64]) -> Result<Vec<f64>> {
    sys.table()
        .get(word)
        .map(|v| v.eval(y))
        .ok_or_else(|| Error::Domain(format!("no bracket field for word {word}")))
}

fn shifted(y: &[f64], v: &[f64], s: f64) -> Vec<f64> {
    y.iter().zip(v).map(|(a, b)| a + s * b).collect()
}

/// Nested central differences: `V_{[I_1]} g(x) ≈ (g(x + s v) − g(x − s v)) / 2s`
/// with `v = V_{[I_1]}(x)` and `s = h / ∥v∥`; for two words the inner
/// derivative is taken along `V_{[I_2]}` evaluated at each outer point.
fn build_stencil(sys: &System, x: &[f64], words: &[Word], h: f64) -> Result<Stencil> {
    let mut st = Stencil {
        points: vec![x.to_vec()],
        weights: vec![0.0],
        step: h,
    };
    match words {
        [w1] => {
            let v = bracket_value(sys, w1, x)?;
            let nv = norm(&v);
            if nv > 0.0 {
                let s = h / nv;
                st.points.push(shifted(x, &v, s));
                st.weights.push(0.5 / s);
                st.points.push(shifted(x, &v, -s));
                st.weights.push(-0.5 / s);
            }
        }
        [w1, w2] => {
            let v1 = bracket_value(sys, w1, x)?;
            let n1 = norm(&v1);
            if n1 > 0.0 {
                let s1 = h / n1;
                let outer = [(shifted(x, &v1, s1), 0.5 / s1), (shifted(x, &v1, -s1), -0.5 / s1)];
                let inner: Vec<Vec<f64>> = outer
                    .iter()
                    .map(|(y, _)| bracket_value(sys, w2, y))
                    .collect::<Result<_>>()?;
                let n2 = norm(&bracket_value(sys, w2, x)?)
                    .max(norm(&inner[0]))
                    .max(norm(&inner[1]));
                if n2 > 0.0 {
                    let s2 = h / n2;
                    for ((y, a), v2) in outer.iter().zip(&inner) {
                        st.points.push(shifted(y, v2, s2));
                        st.weights.push(a * 0.5 / s2);
                        st.points.push(shifted(y, v2, -s2));
                        st.weights.push(-a * 0.5 / s2);
                    }
                }
            }
        }
        _ => {
            return Err(Error::CostGuard(format!(
                "derivatives take one or two words, got {}",
                words.len()
            )))
        }
    }
    Ok(st)
}

/// One row of a derivative table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DerivativeRow {
    pub t: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub n_used: usize,
    pub n_excluded: usize,
    /// `(P_t f²(x))^{1/2}`.
    pub pt_f2_root: f64,
    /// Finite-difference step `h` before division by the direction norm.
    pub step: f64,
}

/// Default step `t^H · 10⁻²`.
pub fn default_step(t: f64, hurst: f64) -> f64 {
    1e-2 * t.powf(hurst)
}

fn derivative_table(
    f: &dyn TestFunction,
    sys: &System,
    x: &[f64],
    t_grid: &[f64],
    words: &[Word],
    h: Option<f64>,
    sim: SimSettings,
) -> Result<Vec<DerivativeRow>> {
    for &t in t_grid {
        check_inputs(f, sys, x, t)?;
    }
    let stencils: Vec<Stencil> = t_grid
        .iter()
        .map(|&t| build_stencil(sys, x, words, h.unwrap_or_else(|| default_step(t, sim.hurst))))
        .collect::<Result<_>>()?;
    let sampler = sampler(sys, &sim)?;
    // per path, per t: f at every stencil point (None on blowup)
    let per_path: Vec<Result<Vec<Vec<Option<f64>>>>> = par_map(sim.n_paths, |i| {
        let path = sampler.sample(sim.seed, i as u64);
        t_grid
            .iter()
            .zip(&stencils)
            .map(|(&t, st)| stencil_values(f, sys, &path, t, st, sim.substeps))
            .collect()
    });
    let per_path: Vec<Vec<Vec<Option<f64>>>> = per_path.into_iter().collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(t_grid.len());
    for (ti, (&t, st)) in t_grid.iter().zip(&stencils).enumerate() {
        let mut point_failures = vec![0usize; st.points.len()];
        let mut deriv = Summary::default();
        let mut sq = Summary::default();
        let mut excluded = 0;
        for path in &per_path {
            let vals = &path[ti];
            for (c, v) in point_failures.iter_mut().zip(vals) {
                *c += v.is_none() as usize;
            }
            if vals.iter().any(Option::is_none) {
                excluded += 1;
                continue;
            }
            let vals: Vec<f64> = vals.iter().map(|v| v.unwrap_or(0.0)).collect();
            deriv.push(vals.iter().zip(&st.weights).map(|(v, w)| v * w).sum());
            sq.push(vals[0] * vals[0]);
        }
        let worst = point_failures.iter().copied().max().unwrap_or(0);
        if worst as f64 > MAX_EXCLUSION_RATE * sim.n_paths as f64 {
            return Err(Error::Stencil(format!(
                "{worst} of {} paths blew up at one stencil point (t = {t})",
                sim.n_paths
            )));
        }
        rows.push(DerivativeRow {
            t,
            estimate: deriv.mean,
            stderr: deriv.stderr(),
            n_used: deriv.n,
            n_excluded: excluded,
            pt_f2_root: sq.mean.sqrt(),
            step: st.step,
        });
    }
    Ok(rows)
}

fn stencil_values(
    f: &dyn TestFunction,
    sys: &System,
    path: &FbmPath,
    t: f64,
    st: &Stencil,
    substeps: usize,
) -> Result<Vec<Option<f64>>> {
    st.points
        .iter()
        .map(|y| match terminal_state(sys, path, y, t, substeps, path.grid_size()) {
            Ok(z) => Ok(Some(f.eval(&z))),
            Err(Error::Blowup { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// `V_{[I_1]}(V_{[I_2]} P_t f)(x)` (one or two words) by central differences
/// with common random numbers across stencil points. `h = None` uses
/// [`default_step`].
pub fn directional_derivative(
    f: &dyn TestFunction,
    sys: &System,
    x: &[f64],
    t: f64,
    words: &[Word],
    h: Option<f64>,
    sim: SimSettings,
) -> Result<DerivativeRow> {
    let mut rows = derivative_table(f, sys, x, &[t], words, h, sim)?;
    Ok(rows.remove(0))
}

/// Derivative estimates over a time grid and the log–log slope of
/// `|estimate|` against `t`.
#[derive(Clone, Debug, Serialize)]
pub struct ExponentFit {
    pub rows: Vec<DerivativeRow>,
    /// Which rows entered the fit (`|estimate| > 3·stderr`).
    pub usable: Vec<bool>,
    /// Ordinary least squares on `(ln t, ln |estimate|)`; `None` when fewer
    /// than three cells are usable.
    pub fit: Option<LineFit>,
    /// `−H Σ|I_j|`.
    pub reference_slope: f64,
    /// `sup_t t^{H Σ|I_j|} |estimate| / ∥f∥_∞` for bounded `f`.
    pub bounded_constant: Option<f64>,
}

impl ExponentFit {
    pub fn slope(&self) -> Option<f64> {
        self.fit.as_ref().map(|f| f.slope)
    }
}

/// Minimum usable cells for a slope fit.
pub const MIN_FIT_CELLS: usize = 3;

pub fn fit_exponent(
    f: &dyn TestFunction,
    sys: &System,
    x: &[f64],
    words: &[Word],
    t_grid: &[f64],
    h: Option<f64>,
    sim: SimSettings,
) -> Result<ExponentFit> {
    if t_grid.len() < 5 {
        return Err(Error::Domain("the time grid needs at least 5 points".into()));
    }
    let rows = derivative_table(f, sys, x, t_grid, words, h, sim)?;
    let total_len: usize = words.iter().map(Word::len).sum();
    let power = sim.hurst * total_len as f64;
    let usable: Vec<bool> = rows.iter().map(|r| r.estimate.abs() > 3.0 * r.stderr).collect();
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for (r, &u) in rows.iter().zip(&usable) {
        if u {
            lx.push(r.t.ln());
            ly.push(r.estimate.abs().ln());
        }
    }
    let fit = if lx.len() >= MIN_FIT_CELLS {
        fit_line(&lx, &ly, &vec![1.0; lx.len()])
    } else {
        None
    };
    let bounded_constant = f.sup_norm().filter(|&s| s > 0.0).map(|s| {
        rows.iter()
            .map(|r| r.t.powf(power) * r.estimate.abs() / s)
            .fold(0.0, f64::max)
    });
    Ok(ExponentFit {
        rows,
        usable,
        fit,
        reference_slope: -power,
        bounded_constant,
    })
}

/// Per-path residuals of the inverted integration-by-parts identity.
#[derive(Clone, Debug, Serialize)]
pub struct IbpReport {
    pub epsilon: f64,
    pub n_paths: usize,
    pub n_used: usize,
    /// Paths whose integration blew up.
    pub n_excluded: usize,
    /// Paths with `λ_min(M) < LAMBDA_FLOOR · trace(M)`.
    pub n_below_floor: usize,
    /// `∥M^{-1}D − L∥ / max(∥L∥, ∥M^{-1}D∥)` with `L_I = ∇f(X_1)·J_1·V^ε_{[I]}(x)`.
    pub direct: Vec<f64>,
    /// Same with `L'_I = Σ_J (β(1)^{-1})_{IJ} ∇f(X_1)·V^ε_{[J]}(X_1)`.
    pub transport: Vec<f64>,
    pub median_direct: f64,
    pub median_transport: f64,
}

impl IbpReport {
    pub fn max_direct(&self) -> f64 {
        self.direct.iter().copied().fold(0.0, f64::max)
    }
}

enum IbpOutcome {
    Blowup,
    BelowFloor,
    Residuals(f64, f64),
}

fn relative(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let denom = a.norm().max(b.norm());
    if denom < f64::MIN_POSITIVE {
        0.0
    } else {
        (a - b).norm() / denom
    }
}

/// Checks `V^ε_{[I]} f(X^{ε,x}_1) = Σ_J (M^{-1})_{IJ} D^{(J)} f(X^{ε,x}_1)`
/// path by path, where `D^{(J)} f = Σ_j ⟨D^j f(X_1), β^J_{(j)}⟩_ℋ`.
pub fn ibp_identity_check(
    f: &dyn TestFunction,
    sys: &System,
    x: &[f64],
    epsilon: f64,
    sim: SimSettings,
) -> Result<IbpReport> {
    check_inputs(f, sys, x, 1.0)?;
    let sampler = sampler(sys, &sim)?;
    let op = ToeplitzOperator::new(&IncrementCovariance::new(sim.hurst, sim.grid_size));
    let (n, d, w) = (sys.state_dim(), sys.noise_dim(), sys.frame_basis().len());
    let frame_at_x: Vec<Vec<f64>> = (0..w).map(|i| sys.frame_value(i, x, epsilon, sim.hurst)).collect();
    let outcomes: Vec<Result<IbpOutcome>> = par_map(sim.n_paths, |i| {
        let path = sampler.sample(sim.seed, i as u64);
        let bundle = match integrate(sys, &path, x, epsilon, sim.substeps) {
            Ok(b) => b,
            Err(Error::Blowup { .. }) => return Ok(IbpOutcome::Blowup),
            Err(e) => return Err(e),
        };
        let cells = bundle.grid_size();
        let x1 = bundle.terminal();
        let mut grad = vec![0.0; n];
        f.gradient(x1, &mut grad);

        // D^j_s f(X_1) = ∇f(X_1)·kernel_j(s), collected as one ℝ^d step function
        let kernel = malliavin_kernel_grid(&bundle, sys);
        let mut pts = vec![0.0; (cells + 1) * d];
        for (j, kj) in kernel.iter().enumerate() {
            for (k, v) in kj.iter().enumerate() {
                pts[k * d + j] = v.iter().zip(&grad).map(|(a, b)| a * b).sum();
            }
        }
        let mut fs = bundle.beta_step_functions();
        fs.push(StepFunction::from_grid_values(&pts, d));
        let g = op.gram(&fs)?;
        let wp = w + 1;
        let m = DMatrix::from_fn(w, w, |a, b| g[a * wp + b]);
        let rhs = DVector::from_fn(w, |b, _| g[w * wp + b]);
        let lam = crate::matrices::min_eigenvalue(&m)?;
        if !(lam >= LAMBDA_FLOOR * m.trace()) || lam <= 0.0 {
            return Ok(IbpOutcome::BelowFloor);
        }
        let Some(c) = m.clone().cholesky().map(|ch| ch.solve(&rhs)) else {
            return Ok(IbpOutcome::BelowFloor);
        };

        let j1 = bundle.jacobian(cells);
        let gj: Vec<f64> = (0..n).map(|c| (0..n).map(|r| grad[r] * j1[r * n + c]).sum()).collect();
        let direct = DVector::from_fn(w, |a, _| gj.iter().zip(&frame_at_x[a]).map(|(p, q)| p * q).sum());

        let at_x1 = DVector::from_fn(w, |a, _| {
            let v = sys.frame_value(a, x1, epsilon, sim.hurst);
            grad.iter().zip(&v).map(|(p, q)| p * q).sum()
        });
        let beta1 = DMatrix::from_row_slice(w, w, bundle.beta(cells));
        let transport = match beta1.lu().solve(&at_x1) {
            Some(v) => v,
            None => return Ok(IbpOutcome::BelowFloor),
        };
        Ok(IbpOutcome::Residuals(relative(&c, &direct), relative(&c, &transport)))
    });
    let mut report = IbpReport {
        epsilon,
        n_paths: sim.n_paths,
        n_used: 0,
        n_excluded: 0,
        n_below_floor: 0,
        direct: Vec::new(),
        transport: Vec::new(),
        median_direct: f64::NAN,
        median_transport: f64::NAN,
    };
    for o in outcomes {
        match o? {
            IbpOutcome::Blowup => report.n_excluded += 1,
            IbpOutcome::BelowFloor => report.n_below_floor += 1,
            IbpOutcome::Residuals(a, b) => {
                report.direct.push(a);
                report.transport.push(b);
            }
        }
    }
    report.n_used = report.direct.len();
    if report.n_used > 0 {
        report.median_direct = median(&report.direct);
        report.median_transport = median(&report.transport);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vfields::{PolyTrig, SmoothField, VectorFieldSet};
    use approx::assert_relative_eq;

    fn system(fields: &[&[&str]], level: usize) -> System {
        let fs = fields
            .iter()
            .map(|c| SmoothField::new(c.iter().map(|s| PolyTrig::parse(s, c.len()).unwrap()).collect()).unwrap())
            .collect();
        System::from_set(VectorFieldSet::new("t", level, fs).unwrap()).unwrap()
    }

    fn sim(hurst: f64, grid_size: usize, n_paths: usize) -> SimSettings {
        SimSettings {
            hurst,
            grid_size,
            substeps: 1,
            n_paths,
            seed: 99,
        }
    }

    fn w(s: &str) -> Word {
        s.parse().unwrap()
    }

    // E g(x + σZ) by composite Simpson on [−12, 12]
    fn gaussian_expectation(g: impl Fn(f64) -> f64, x: f64, sigma: f64) -> f64 {
        let m = 4000;
        let h = 24.0 / m as f64;
        let mut acc = 0.0;
        for i in 0..=m {
            let z = -12.0 + i as f64 * h;
            let c = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += c * g(x + sigma * z) * (-0.5 * z * z).exp();
        }
        acc * h / 3.0 / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn sigmoid_gradient_matches_difference_quotient() {
        let s = Sigmoid::new(8.0, vec![0.1, -0.2], vec![0.6, 0.8]).unwrap();
        let y = [0.3, 0.05];
        let mut g = [0.0; 2];
        s.gradient(&y, &mut g);
        for i in 0..2 {
            let mut a = y;
            let mut b = y;
            a[i] += 1e-6;
            b[i] -= 1e-6;
            assert_relative_eq!(g[i], (s.eval(&a) - s.eval(&b)) / 2e-6, epsilon = 1e-7);
        }
        assert_eq!(s.sup_norm(), Some(1.0));
        assert_eq!(Linear { coeffs: vec![1.0], offset: 0.0 }.sup_norm(), None);
    }

    #[test]
    fn zero_fields_leave_the_state_fixed() {
        let sys = system(&[&["0"]], 1);
        let f = Sigmoid::new(8.0, vec![0.0], vec![1.0]).unwrap();
        let e = estimate_pt(&f, &sys, &[0.3], 0.5, sim(0.7, 16, 50)).unwrap();
        assert_eq!(e.estimate, f.eval(&[0.3]));
        let d = directional_derivative(&f, &sys, &[0.3], 0.5, &[w("(1)")], None, sim(0.7, 16, 50)).unwrap();
        assert_eq!(d.estimate, 0.0);
    }

    #[test]
    fn constant_function_is_exact() {
        let sys = system(&[&["1"]], 1);
        let e = estimate_pt(&Constant { dim: 1, value: 1.0 }, &sys, &[0.0], 0.3, sim(0.6, 32, 200)).unwrap();
        assert_eq!(e.estimate, 1.0);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn constant_field_matches_gaussian_oracle() {
        let sys = system(&[&["1"]], 1);
        let f = Sigmoid::new(8.0, vec![0.0], vec![1.0]).unwrap();
        for (hurst, t) in [(0.5, 0.25f64), (0.7, 0.125)] {
            let s = sim(hurst, 16, 20_000);
            let sigma = t.powf(hurst);
            let e = estimate_pt(&f, &sys, &[0.1], t, s).unwrap();
            let exact = gaussian_expectation(|y| f.eval(&[y]), 0.1, sigma);
            assert!((e.estimate - exact).abs() < 4.0 * e.stderr, "{e:?} vs {exact}");
            let d = directional_derivative(&f, &sys, &[0.1], t, &[w("(1)")], None, s).unwrap();
            let fp = |y: f64| {
                let mut g = [0.0];
                f.gradient(&[y], &mut g);
                g[0]
            };
            let exact = gaussian_expectation(fp, 0.1, sigma);
            assert!((d.estimate - exact).abs() < 4.0 * d.stderr + 1e-4 * exact, "{d:?} vs {exact}");
        }
    }

    #[test]
    fn second_derivative_of_constant_field() {
        let sys = system(&[&["1"]], 1);
        let f = Sigmoid::new(4.0, vec![0.0], vec![1.0]).unwrap();
        let (hurst, t) = (0.5, 0.25f64);
        let d = directional_derivative(&f, &sys, &[0.2], t, &[w("(1)"), w("(1)")], Some(1e-2), sim(hurst, 16, 20_000)).unwrap();
        let f2 = |y: f64| {
            let s = f.eval(&[y]);
            16.0 * s * (1.0 - s) * (1.0 - 2.0 * s)
        };
        let exact = gaussian_expectation(f2, 0.2, t.powf(hurst));
        assert!((d.estimate - exact).abs() < 4.0 * d.stderr + 1e-3, "{d:?} vs {exact}");
    }

    #[test]
    fn commuting_bracket_direction_is_zero() {
        let sys = system(&[&["1", "0"], &["0", "1"]], 1);
        let f = Sigmoid::new(8.0, vec![0.0, 0.0], vec![0.6, 0.8]).unwrap();
        let d = directional_derivative(&f, &sys, &[0.0, 0.0], 0.5, &[w("(1,2)")], None, sim(0.6, 16, 100)).unwrap();
        assert_eq!(d.estimate, 0.0);
        assert_eq!(d.stderr, 0.0);
    }

    #[test]
    fn linear_function_gives_flat_exponent() {
        let sys = system(&[&["0"]], 1);
        let f = Linear { coeffs: vec![2.0], offset: 0.0 };
        let grid: Vec<f64> = (1..=5).map(|k| 0.5f64.powi(k)).collect();
        let fit = fit_exponent(&f, &sys, &[0.0], &[w("(1)")], &grid, None, sim(0.6, 16, 20)).unwrap();
        // zero fields: the directional derivative along V = 0 vanishes
        assert!(fit.fit.is_none());
        let sys = system(&[&["1"]], 1);
        let fit = fit_exponent(&f, &sys, &[0.0], &[w("(1)")], &grid, None, sim(0.6, 16, 20)).unwrap();
        assert_relative_eq!(fit.slope().unwrap(), 0.0, epsilon = 1e-6);
        assert!(fit.bounded_constant.is_none());
    }

    #[test]
    fn exponent_of_bounded_function_is_not_positive() {
        let sys = system(&[&["1"]], 1);
        let f = Sigmoid::new(16.0, vec![0.0], vec![1.0]).unwrap();
        let grid: Vec<f64> = (1..=6).map(|k| 0.5f64.powi(k)).collect();
        let fit = fit_exponent(&f, &sys, &[0.0], &[w("(1)")], &grid, None, sim(0.5, 16, 4000)).unwrap();
        let lf = fit.fit.unwrap();
        assert!(lf.slope <= 2.0 * lf.slope_stderr);
        assert!(fit.bounded_constant.unwrap() > 0.0);
        assert_eq!(fit.reference_slope, -0.5);
    }

    #[test]
    fn derivative_is_deterministic_across_pools() {
        let sys = system(&[&["1", "0"], &["0.5*sin(x1)", "1"]], 1);
        let f = Sigmoid::new(8.0, vec![0.0, 0.0], vec![0.6, 0.8]).unwrap();
        let run = |threads| {
            crate::mc::with_threads(threads, || {
                directional_derivative(&f, &sys, &[0.1, 0.2], 0.25, &[w("(2)")], None, sim(0.6, 64, 64)).unwrap()
            })
        };
        let a = run(1);
        assert_eq!(a, run(4));
    }

    #[test]
    fn ibp_scalar_case_and_constant_function() {
        let sys = system(&[&["1"]], 1);
        let f = Sigmoid::new(4.0, vec![0.0], vec![1.0]).unwrap();
        let rep = ibp_identity_check(&f, &sys, &[0.0], 1.0, sim(0.7, 64, 32)).unwrap();
        assert_eq!(rep.n_used, 32);
        assert!(rep.max_direct() < 1e-10, "{rep:?}");
        let rep = ibp_identity_check(&Constant { dim: 1, value: 3.0 }, &sys, &[0.0], 1.0, sim(0.7, 64, 8)).unwrap();
        assert_eq!(rep.max_direct(), 0.0);
    }

    #[test]
    fn ibp_on_bracket_generating_system() {
        let sys = system(&[&["1", "0", "0"], &["0", "1", "x1"]], 2);
        let f = Sigmoid::new(2.0, vec![0.0; 3], vec![0.6, 0.0, 0.8]).unwrap();
        let rep = ibp_identity_check(&f, &sys, &[0.0; 3], 1.0, sim(0.7, 256, 16)).unwrap();
        assert_eq!(rep.n_below_floor, 0);
        assert!(rep.median_direct < 5e-2 && rep.median_transport < 5e-2, "{rep:?}");
    }

    #[test]
    fn ibp_residual_shrinks_for_a_curved_system() {
        let sys = system(&[&["1", "0.5*sin(x1)"], &["0.5*cos(x2)", "1"]], 1);
        let f = Sigmoid::new(2.0, vec![0.0; 2], vec![0.6, 0.8]).unwrap();
        let meds: Vec<f64> = [32, 128]
            .iter()
            .map(|&n| {
                let mut s = sim(0.7, n, 32);
                s.substeps = 2;
                ibp_identity_check(&f, &sys, &[0.3, -0.2], 1.0, s).unwrap().median_direct
            })
            .collect();
        assert!(meds[1] < meds[0], "{meds:?}");
    }
}
