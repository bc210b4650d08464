//! Co-integration of the state, its Jacobian, the inverse Jacobian and the
//! bracket-transport matrix β along the piecewise-linear interpolation of a
//! sampled driver.
//!
//! On grid cell `k` the driver moves linearly by `ΔB_k`, so every equation
//! becomes an ODE in the cell parameter `u ∈ [0, 1]` with right-hand side
//! `F(s)·ΔB_k`. Each cell is integrated with `substeps` classical RK4 steps.
//! The rescaled system uses `ε^H V_j`; β obeys
//!
//! ```text
//! dβ_I = −Σ_j β_{I∗j} dB^j                       (|I| < l)
//! dβ_I = −Σ_j Σ_K ω^{K,ε}_{I∗j}(X) β_K dB^j        (|I| = l)
//! ```
//!
//! with `β(0) = identity`, rows indexed by `I` and columns by `J`.

use std::io::Write;
use std::path::Path;

use crate::cm_space::StepFunction;
use crate::fbm::{FbmPath, FbmSampler, SamplingMethod};
use crate::mc::{par_map, path_rng, SimSettings};
use crate::signature::{compute_signature, taylor_leading_term};
use crate::stats::{fit_line, LineFit, Summary};
use crate::vfields::{
    fit_structure_functions, norm, BracketTable, CompiledField, OmegaRow, StructureFunctions, UfgReport,
    VectorFieldSet, DEFAULT_DEGREE_CAP,
};
use crate::words::WordBasis;
use crate::{Error, Result};

/// A vector-field set with its bracket table, certified structure functions
/// and compiled evaluators.
#[derive(Clone, Debug)]
pub struct System {
    set: VectorFieldSet,
    table: BracketTable,
    sf: StructureFunctions,
    ufg: UfgReport,
    fields: Vec<CompiledField>,
    frame: Vec<CompiledField>,
    // for each frame row I with |I| < l: frame index of I∗j, per letter j
    children: Vec<Vec<usize>>,
    // for each frame row I with |I| = l: top-word index of I∗j, per letter j
    top_of: Vec<Vec<usize>>,
    omega_trivial: bool,
}

impl System {
    /// Builds the system and certifies UFG at `sample_points`.
    pub fn new(set: VectorFieldSet, sample_points: &[Vec<f64>]) -> Result<Self> {
        let level = set.level;
        let table = BracketTable::build(&set.fields, level, DEFAULT_DEGREE_CAP)?;
        let (sf, ufg) = fit_structure_functions(&table, level, sample_points)?;
        if !ufg.passes() {
            let v = &ufg.violations[0];
            return Err(Error::Ufg(format!(
                "{}: bracket {} leaves the frame at sample point {} (residual {:e} > {:e}); {} violation(s)",
                set.name,
                v.word,
                v.point,
                v.residual,
                v.tolerance,
                ufg.violations.len()
            )));
        }
        let fields = set.fields.iter().map(CompiledField::new).collect();
        let basis = sf.frame_basis().clone();
        let frame = basis
            .words()
            .iter()
            .map(|w| CompiledField::new(table.get(w).expect("frame word")))
            .collect();
        let d = set.noise_dim();
        let mut children = Vec::with_capacity(basis.len());
        let mut top_of = Vec::with_capacity(basis.len());
        for word in basis.words() {
            let mut ch = Vec::new();
            let mut tp = Vec::new();
            for j in 1..=d as u8 {
                let next = word.push(j);
                if word.len() < level {
                    ch.push(basis.index_of(&next).expect("child in frame"));
                } else {
                    tp.push(sf.top_words().iter().position(|w| *w == next).expect("top word"));
                }
            }
            children.push(ch);
            top_of.push(tp);
        }
        let omega_trivial = sf.rows().iter().all(|r| *r == OmegaRow::Zero);
        Ok(System {
            set,
            table,
            sf,
            ufg,
            fields,
            frame,
            children,
            top_of,
            omega_trivial,
        })
    }

    /// Certifies UFG on 100 seeded points in `[-2, 2]ⁿ` plus the origin.
    pub fn from_set(set: VectorFieldSet) -> Result<Self> {
        let points = default_sample_points(set.state_dim());
        System::new(set, &points)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        System::from_set(VectorFieldSet::from_file(path)?)
    }

    pub fn set(&self) -> &VectorFieldSet {
        &self.set
    }

    pub fn name(&self) -> &str {
        &self.set.name
    }

    pub fn state_dim(&self) -> usize {
        self.set.state_dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.set.noise_dim()
    }

    pub fn level(&self) -> usize {
        self.set.level
    }

    pub fn table(&self) -> &BracketTable {
        &self.table
    }

    pub fn structure(&self) -> &StructureFunctions {
        &self.sf
    }

    pub fn ufg_report(&self) -> &UfgReport {
        &self.ufg
    }

    /// `𝒜₁(l)`, the row/column index set of β and M.
    pub fn frame_basis(&self) -> &WordBasis {
        self.sf.frame_basis()
    }

    /// Compiled `V_j` (0-based `j`).
    pub fn field(&self, j: usize) -> &CompiledField {
        &self.fields[j]
    }

    /// Compiled `V_[J]` for frame index `idx`.
    pub fn frame_field(&self, idx: usize) -> &CompiledField {
        &self.frame[idx]
    }

    /// `V^ε_[J](x)` for frame index `idx`.
    pub fn frame_value(&self, idx: usize, x: &[f64], epsilon: f64, hurst: f64) -> Vec<f64> {
        let len = self.frame_basis().word(idx).len();
        let s = epsilon.powf(len as f64 * hurst);
        self.frame[idx].eval(x).into_iter().map(|v| v * s).collect()
    }
}

pub(crate) fn default_sample_points(n: usize) -> Vec<Vec<f64>> {
    use rand::Rng;
    let mut rng = path_rng(0x5eed, 0);
    let mut pts = vec![vec![0.0; n]];
    for _ in 0..100 {
        pts.push((0..n).map(|_| rng.random_range(-2.0..2.0)).collect());
    }
    pts
}

/// What the integrator carries along with the state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    StateOnly,
    Full,
}

struct Integrator<'a> {
    sys: &'a System,
    n: usize,
    d: usize,
    w: usize,
    eps_h: f64,
    // ε^{(l+1−|K|)H} per frame index K
    omega_scale: Vec<f64>,
    mode: Mode,
    // scratch
    v: Vec<f64>,
    dv: Vec<f64>,
    a: Vec<f64>,
    omega: Vec<f64>,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl<'a> Integrator<'a> {
    fn new(sys: &'a System, epsilon: f64, hurst: f64, mode: Mode) -> Self {
        let n = sys.state_dim();
        let d = sys.noise_dim();
        let w = sys.frame_basis().len();
        let l = sys.level();
        let omega_scale = sys
            .frame_basis()
            .words()
            .iter()
            .map(|k| epsilon.powf((l + 1 - k.len()) as f64 * hurst))
            .collect();
        let len = match mode {
            Mode::StateOnly => n,
            Mode::Full => n + 2 * n * n + w * w,
        };
        Integrator {
            sys,
            n,
            d,
            w,
            eps_h: epsilon.powf(hurst),
            omega_scale,
            mode,
            v: vec![0.0; n],
            dv: vec![0.0; n * n],
            a: vec![0.0; n * n],
            omega: vec![0.0; sys.sf.top_words().len() * w],
            k1: vec![0.0; len],
            k2: vec![0.0; len],
            k3: vec![0.0; len],
            k4: vec![0.0; len],
            tmp: vec![0.0; len],
        }
    }

    fn state_len(&self) -> usize {
        self.k1.len()
    }

    fn rhs(&mut self, s: &[f64], inc: &[f64], out: &mut [f64]) {
        let sys = self.sys;
        let (n, w) = (self.n, self.w);
        let x = &s[..n];
        out[..n].iter_mut().for_each(|o| *o = 0.0);
        if self.mode == Mode::Full {
            self.a.iter_mut().for_each(|o| *o = 0.0);
        }
        for j in 0..self.d {
            let c = self.eps_h * inc[j];
            let f = &sys.fields[j];
            if c == 0.0 || f.is_zero() {
                continue;
            }
            f.eval_into(x, &mut self.v);
            for i in 0..n {
                out[i] += c * self.v[i];
            }
            if self.mode == Mode::Full {
                f.jacobian_into(x, &mut self.dv);
                for (a, dv) in self.a.iter_mut().zip(&self.dv) {
                    *a += c * dv;
                }
            }
        }
        if self.mode == Mode::StateOnly {
            return;
        }
        let jm = &s[n..n + n * n];
        let jinv = &s[n + n * n..n + 2 * n * n];
        let (dj, rest) = out[n..].split_at_mut(n * n);
        let (djinv, dbeta) = rest.split_at_mut(n * n);
        // dJ = A J, dJinv = −Jinv A
        for r in 0..n {
            for c in 0..n {
                let mut acc = 0.0;
                let mut acc_inv = 0.0;
                for k in 0..n {
                    acc += self.a[r * n + k] * jm[k * n + c];
                    acc_inv += jinv[r * n + k] * self.a[k * n + c];
                }
                dj[r * n + c] = acc;
                djinv[r * n + c] = -acc_inv;
            }
        }
        let beta = &s[n + 2 * n * n..];
        dbeta.iter_mut().for_each(|o| *o = 0.0);
        let need_omega = !sys.omega_trivial;
        if need_omega {
            sys.sf.eval_top_into(x, &mut self.omega);
        }
        for r in 0..w {
            let row = &mut dbeta[r * w..(r + 1) * w];
            if !sys.children[r].is_empty() {
                for (j, &child) in sys.children[r].iter().enumerate() {
                    let c = inc[j];
                    for (o, b) in row.iter_mut().zip(&beta[child * w..(child + 1) * w]) {
                        *o -= c * b;
                    }
                }
            } else if need_omega {
                for (j, &top) in sys.top_of[r].iter().enumerate() {
                    let c = inc[j];
                    if c == 0.0 {
                        continue;
                    }
                    for k in 0..w {
                        let om = self.omega[top * w + k];
                        if om == 0.0 {
                            continue;
                        }
                        let coef = c * om * self.omega_scale[k];
                        for (o, b) in row.iter_mut().zip(&beta[k * w..(k + 1) * w]) {
                            *o -= coef * b;
                        }
                    }
                }
            }
        }
    }

    /// Advances `s` across one cell with increment `inc`.
    fn cell(&mut self, s: &mut [f64], inc: &[f64], substeps: usize) {
        let h = 1.0 / substeps as f64;
        let len = self.state_len();
        let mut k1 = std::mem::take(&mut self.k1);
        let mut k2 = std::mem::take(&mut self.k2);
        let mut k3 = std::mem::take(&mut self.k3);
        let mut k4 = std::mem::take(&mut self.k4);
        let mut tmp = std::mem::take(&mut self.tmp);
        for _ in 0..substeps {
            self.rhs(s, inc, &mut k1);
            for i in 0..len {
                tmp[i] = s[i] + 0.5 * h * k1[i];
            }
            self.rhs(&tmp, inc, &mut k2);
            for i in 0..len {
                tmp[i] = s[i] + 0.5 * h * k2[i];
            }
            self.rhs(&tmp, inc, &mut k3);
            for i in 0..len {
                tmp[i] = s[i] + h * k3[i];
            }
            self.rhs(&tmp, inc, &mut k4);
            for i in 0..len {
                s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        self.k1 = k1;
        self.k2 = k2;
        self.k3 = k3;
        self.k4 = k4;
        self.tmp = tmp;
    }
}

fn check_inputs(sys: &System, path: &FbmPath, x0: &[f64], epsilon: f64, substeps: usize, cells: usize) -> Result<()> {
    if path.dim() != sys.noise_dim() {
        return Err(Error::GridMismatch(format!(
            "path has {} components, system has {} fields",
            path.dim(),
            sys.noise_dim()
        )));
    }
    if x0.len() != sys.state_dim() || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("x0 must be a finite {}-vector", sys.state_dim())));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Domain(format!("epsilon {epsilon} outside (0, 1]")));
    }
    if substeps == 0 {
        return Err(Error::Domain("substeps must be at least 1".into()));
    }
    if cells > path.grid_size() {
        return Err(Error::GridMismatch(format!(
            "{cells} cells requested from a {}-cell path",
            path.grid_size()
        )));
    }
    Ok(())
}

const BLOWUP_LIMIT: f64 = 1e150;

fn finite(s: &[f64]) -> bool {
    s.iter().all(|v| v.is_finite() && v.abs() < BLOWUP_LIMIT)
}

/// Full bundle over the whole path.
pub fn integrate(sys: &System, path: &FbmPath, x0: &[f64], epsilon: f64, substeps: usize) -> Result<FlowBundle> {
    integrate_prefix(sys, path, x0, epsilon, substeps, path.grid_size())
}

/// Full bundle over the first `cells` cells of the path (times `k/N`).
pub fn integrate_prefix(
    sys: &System,
    path: &FbmPath,
    x0: &[f64],
    epsilon: f64,
    substeps: usize,
    cells: usize,
) -> Result<FlowBundle> {
    check_inputs(sys, path, x0, epsilon, substeps, cells)?;
    let hurst = path.hurst();
    let mut it = Integrator::new(sys, epsilon, hurst, Mode::Full);
    let (n, w) = (it.n, it.w);
    let len = it.state_len();
    let mut s = vec![0.0; len];
    s[..n].copy_from_slice(x0);
    for i in 0..n {
        s[n + i * n + i] = 1.0;
        s[n + n * n + i * n + i] = 1.0;
    }
    for i in 0..w {
        s[n + 2 * n * n + i * w + i] = 1.0;
    }
    let mut states = Vec::with_capacity((cells + 1) * len);
    states.extend_from_slice(&s);
    let mut inc = vec![0.0; sys.noise_dim()];
    for k in 0..cells {
        path.increment_into(k, &mut inc);
        it.cell(&mut s, &inc, substeps);
        if !finite(&s) {
            return Err(Error::Blowup {
                time: path.time(k + 1),
            });
        }
        states.extend_from_slice(&s);
    }
    Ok(FlowBundle {
        hurst,
        path_cells: path.grid_size(),
        cells,
        n,
        d: sys.noise_dim(),
        w,
        epsilon,
        x0: x0.to_vec(),
        states,
    })
}

/// `X` after the first `cells` cells, without Jacobians or β.
pub fn terminal_state(
    sys: &System,
    path: &FbmPath,
    x0: &[f64],
    epsilon: f64,
    substeps: usize,
    cells: usize,
) -> Result<Vec<f64>> {
    check_inputs(sys, path, x0, epsilon, substeps, cells)?;
    let mut it = Integrator::new(sys, epsilon, path.hurst(), Mode::StateOnly);
    let mut s = x0.to_vec();
    let mut inc = vec![0.0; sys.noise_dim()];
    for k in 0..cells {
        path.increment_into(k, &mut inc);
        it.cell(&mut s, &inc, substeps);
        if !finite(&s) {
            return Err(Error::Blowup {
                time: path.time(k + 1),
            });
        }
    }
    Ok(s)
}

/// Grid trajectories of `X`, `J`, `J^{-1}` and β for one driver and scale.
#[derive(Clone, Debug)]
pub struct FlowBundle {
    hurst: f64,
    path_cells: usize,
    cells: usize,
    n: usize,
    d: usize,
    w: usize,
    epsilon: f64,
    x0: Vec<f64>,
    // (cells + 1) blocks of [X, J, Jinv, β]
    states: Vec<f64>,
}

impl FlowBundle {
    fn block(&self, k: usize) -> &[f64] {
        let len = self.n + 2 * self.n * self.n + self.w * self.w;
        &self.states[k * len..(k + 1) * len]
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    /// Number of integrated cells.
    pub fn grid_size(&self) -> usize {
        self.cells
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.path_cells as f64
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn noise_dim(&self) -> usize {
        self.d
    }

    /// `|𝒜₁(l)|`.
    pub fn frame_len(&self) -> usize {
        self.w
    }

    pub fn x(&self, k: usize) -> &[f64] {
        &self.block(k)[..self.n]
    }

    /// Row-major `J_{0→t_k}`.
    pub fn jacobian(&self, k: usize) -> &[f64] {
        &self.block(k)[self.n..self.n + self.n * self.n]
    }

    pub fn jacobian_inv(&self, k: usize) -> &[f64] {
        let n = self.n;
        &self.block(k)[n + n * n..n + 2 * n * n]
    }

    /// Row-major β at `t_k` (row `I`, column `J`).
    pub fn beta(&self, k: usize) -> &[f64] {
        let n = self.n;
        &self.block(k)[n + 2 * n * n..]
    }

    pub fn terminal(&self) -> &[f64] {
        self.x(self.cells)
    }

    /// `max_k ∥J(t_k) J^{-1}(t_k) − I∥_∞` (entrywise).
    pub fn inverse_defect(&self) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        for k in 0..=self.cells {
            let (j, ji) = (self.jacobian(k), self.jacobian_inv(k));
            for r in 0..n {
                for c in 0..n {
                    let v: f64 = (0..n).map(|m| j[r * n + m] * ji[m * n + c]).sum();
                    let target = if r == c { 1.0 } else { 0.0 };
                    worst = worst.max((v - target).abs());
                }
            }
        }
        worst
    }

    /// β columns as `ℝ^d`-valued step functions: function `J` takes the value
    /// `(β^J_{(1)}, …, β^J_{(d)})`, averaged over the two ends of each cell.
    /// The single-letter rows occupy frame indices `0..d`.
    pub fn beta_step_functions(&self) -> Vec<StepFunction> {
        let (w, d, n) = (self.w, self.d, self.cells);
        (0..w)
            .map(|col| {
                let mut vals = vec![0.0; n * d];
                for k in 0..n {
                    let (b0, b1) = (self.beta(k), self.beta(k + 1));
                    for j in 0..d {
                        vals[k * d + j] = 0.5 * (b0[j * w + col] + b1[j * w + col]);
                    }
                }
                StepFunction::from_values(n, d, vals).expect("consistent sizes")
            })
            .collect()
    }

    /// Debug CSV: `t, X…, J…, Jinv…, beta…` (row-major flattenings).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.n;
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("X{i}")));
        for name in ["J", "Jinv"] {
            for r in 1..=n {
                for c in 1..=n {
                    header.push(format!("{name}{r}_{c}"));
                }
            }
        }
        for r in 1..=self.w {
            for c in 1..=self.w {
                header.push(format!("beta{r}_{c}"));
            }
        }
        writeln!(out, "{}", header.join(","))?;
        for k in 0..=self.cells {
            write!(out, "{}", self.time(k))?;
            for v in self.block(k) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Per-time maximum over `I ∈ 𝒜₁(l)` of the relative mismatch between
/// `J^{-1}(t) V^ε_[I](X_t)` and `Σ_J β_I^J(t) V^ε_[J](x)`.
pub fn transport_residuals(bundle: &FlowBundle, sys: &System) -> Vec<f64> {
    let (n, w) = (bundle.n, bundle.w);
    let (eps, h) = (bundle.epsilon, bundle.hurst);
    let at_x0: Vec<Vec<f64>> = (0..w).map(|i| sys.frame_value(i, &bundle.x0, eps, h)).collect();
    let scale = at_x0.iter().map(|v| norm(v)).fold(0.0, f64::max);
    let floor = 1e-12 * (1.0 + scale);
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    (0..=bundle.cells)
        .map(|k| {
            let x = bundle.x(k);
            let ji = bundle.jacobian_inv(k);
            let beta = bundle.beta(k);
            let mut worst = 0.0f64;
            for i in 0..w {
                let v = sys.frame_value(i, x, eps, h);
                for r in 0..n {
                    a[r] = (0..n).map(|c| ji[r * n + c] * v[c]).sum();
                    b[r] = (0..w).map(|jj| beta[i * w + jj] * at_x0[jj][r]).sum();
                }
                let diff: f64 = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                let denom = norm(&a).max(norm(&b)).max(floor);
                worst = worst.max(diff / denom);
            }
            worst
        })
        .collect()
}

/// Sup over grid times of [`transport_residuals`].
pub fn transport_residual(bundle: &FlowBundle, sys: &System) -> f64 {
    transport_residuals(bundle, sys).into_iter().fold(0.0, f64::max)
}

/// `J_{0→1} J^{-1}(s) V^ε_j(X_s)` at every grid time `s`, for each `j`:
/// result `[j][k]` is an `n`-vector.
pub fn malliavin_kernel_grid(bundle: &FlowBundle, sys: &System) -> Vec<Vec<Vec<f64>>> {
    let n = bundle.n;
    let eh = bundle.epsilon.powf(bundle.hurst);
    let j1 = bundle.jacobian(bundle.cells).to_vec();
    (0..bundle.d)
        .map(|j| {
            (0..=bundle.cells)
                .map(|k| {
                    let v: Vec<f64> = sys.field(j).eval(bundle.x(k)).into_iter().map(|c| c * eh).collect();
                    let ji = bundle.jacobian_inv(k);
                    let u: Vec<f64> = (0..n).map(|r| (0..n).map(|c| ji[r * n + c] * v[c]).sum()).collect();
                    (0..n).map(|r| (0..n).map(|c| j1[r * n + c] * u[c]).sum()).collect()
                })
                .collect()
        })
        .collect()
}

/// The Malliavin derivative kernel of `X^{ε,x}_1` as `ℝⁿ`-valued step
/// functions, one per noise component (cell value = mean of the endpoints).
pub fn malliavin_kernel(bundle: &FlowBundle, sys: &System) -> Vec<StepFunction> {
    let n = bundle.n;
    malliavin_kernel_grid(bundle, sys)
        .into_iter()
        .map(|pts| {
            let flat: Vec<f64> = pts.into_iter().flatten().collect();
            let f = StepFunction::from_grid_values(&flat, n);
            debug_assert_eq!(f.grid_size(), bundle.cells);
            f
        })
        .collect()
}

/// One time of a Taylor-remainder study.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TaylorRow {
    pub t: f64,
    /// Mean over paths of `max_{|I| = word_len, J} |γ^J_I(t)|`.
    pub mean_abs_remainder: f64,
    pub stderr: f64,
    /// Mean of `max |β^J_I(t) − δ^J_I|` (the size of the leading terms).
    pub mean_abs_moved: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct TaylorStudy {
    pub rows: Vec<TaylorRow>,
    pub n_excluded: usize,
    /// Log–log OLS of the mean remainder against `t`; `None` when any mean
    /// is below [`ROUNDOFF_FLOOR`].
    pub remainder_fit: Option<LineFit>,
    pub moved_fit: Option<LineFit>,
    /// `(l + 1 − word_len) H`.
    pub reference_slope: f64,
}

/// Means below this cannot be told apart from rounding error.
pub const ROUNDOFF_FLOOR: f64 = 1e-13;

/// `γ^J_I(t) = β^J_I(t) − Σ_L δ^J_{I∗L} (−1)^{|L|} B^{rev L}_t` at the grid
/// times `t_grid` (which must be multiples of `1/N`).
pub fn taylor_remainder_study(
    sys: &System,
    x0: &[f64],
    epsilon: f64,
    word_len: usize,
    t_grid: &[f64],
    sim: SimSettings,
) -> Result<TaylorStudy> {
    let n = sim.grid_size;
    let frame = sys.frame_basis();
    let rows_i: Vec<usize> = (0..frame.len()).filter(|&i| frame.word(i).len() == word_len).collect();
    if rows_i.is_empty() {
        return Err(Error::Domain(format!("no frame words of length {word_len}")));
    }
    let ks: Vec<usize> = t_grid
        .iter()
        .map(|&t| {
            let k = (t * n as f64).round();
            if (k - t * n as f64).abs() > 1e-9 || k < 1.0 || k > n as f64 {
                Err(Error::Domain(format!("t = {t} is not a grid time for N = {n}")))
            } else {
                Ok(k as usize)
            }
        })
        .collect::<Result<_>>()?;
    let sampler = FbmSampler::new(sim.hurst, n, sys.noise_dim(), SamplingMethod::Circulant)?;
    let w = frame.len();
    let per_path: Vec<Result<Option<Vec<(f64, f64)>>>> = par_map(sim.n_paths, |i| {
        let path = sampler.sample(sim.seed, i as u64);
        let bundle = match integrate(sys, &path, x0, epsilon, sim.substeps) {
            Ok(b) => b,
            Err(Error::Blowup { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let sig = compute_signature(&path, sys.level())?;
        ks.iter()
            .map(|&k| {
                let beta = bundle.beta(k);
                let (mut g, mut mv) = (0.0f64, 0.0f64);
                for &a in &rows_i {
                    for b in 0..w {
                        let lead = taylor_leading_term(&sig, k, frame.word(a), frame.word(b))?;
                        g = g.max((beta[a * w + b] - lead).abs());
                        let delta = if a == b { 1.0 } else { 0.0 };
                        mv = mv.max((beta[a * w + b] - delta).abs());
                    }
                }
                Ok((g, mv))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    });
    let mut gamma = vec![Summary::default(); ks.len()];
    let mut moved = vec![Summary::default(); ks.len()];
    let mut n_excluded = 0;
    for r in per_path {
        match r? {
            Some(v) => {
                for (k, (g, m)) in v.into_iter().enumerate() {
                    gamma[k].push(g);
                    moved[k].push(m);
                }
            }
            None => n_excluded += 1,
        }
    }
    let rows: Vec<TaylorRow> = t_grid
        .iter()
        .zip(gamma.iter().zip(&moved))
        .map(|(&t, (g, m))| TaylorRow {
            t,
            mean_abs_remainder: g.mean,
            stderr: g.stderr(),
            mean_abs_moved: m.mean,
        })
        .collect();
    let log_fit = |vals: Vec<f64>| {
        if vals.iter().any(|&v| !(v > ROUNDOFF_FLOOR)) {
            return None;
        }
        let x: Vec<f64> = t_grid.iter().map(|t| t.ln()).collect();
        let y: Vec<f64> = vals.iter().map(|v| v.ln()).collect();
        fit_line(&x, &y, &vec![1.0; x.len()])
    };
    Ok(TaylorStudy {
        remainder_fit: log_fit(rows.iter().map(|r| r.mean_abs_remainder).collect()),
        moved_fit: log_fit(rows.iter().map(|r| r.mean_abs_moved).collect()),
        rows,
        n_excluded,
        reference_slope: (sys.level() + 1 - word_len) as f64 * sim.hurst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::{FbmSampler, SamplingMethod};
    use crate::vfields::{PolyTrig, SmoothField};
    use approx::assert_relative_eq;

    fn field(s: &[&str]) -> SmoothField {
        let n = s.len();
        SmoothField::new(s.iter().map(|c| PolyTrig::parse(c, n).unwrap()).collect()).unwrap()
    }

    fn system(fields: Vec<SmoothField>, level: usize) -> System {
        System::from_set(VectorFieldSet::new("t", level, fields).unwrap()).unwrap()
    }

    fn heisenberg() -> System {
        system(vec![field(&["1", "0", "0"]), field(&["0", "1", "x1"])], 2)
    }

    #[test]
    fn zero_fields_stay_put() {
        let sys = system(vec![field(&["0", "0"]), field(&["0", "0"])], 1);
        let p = FbmSampler::new(0.6, 64, 2, SamplingMethod::Circulant).unwrap().sample(1, 0);
        let b = integrate(&sys, &p, &[0.3, -1.0], 1.0, 2).unwrap();
        for k in 0..=64 {
            assert_eq!(b.x(k), &[0.3, -1.0]);
            assert_eq!(b.jacobian(k), &[1.0, 0.0, 0.0, 1.0]);
            assert_eq!(b.beta(k), &[1.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn additive_noise_is_exact() {
        let sys = system(vec![field(&["2.5"])], 1);
        let p = FbmSampler::new(0.7, 128, 1, SamplingMethod::Circulant).unwrap().sample(4, 0);
        let eps = 0.25;
        let b = integrate(&sys, &p, &[1.0], eps, 1).unwrap();
        for k in 0..=128 {
            let exact = 1.0 + 2.5 * eps.powf(0.7) * p.value(k, 0);
            assert_relative_eq!(b.x(k)[0], exact, epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_field_gives_exponential() {
        let sys = system(vec![field(&["x1"])], 1);
        let p = FbmSampler::new(0.5, 4096, 1, SamplingMethod::Circulant).unwrap().sample(2, 0);
        let b = integrate(&sys, &p, &[1.5], 1.0, 4).unwrap();
        let exact = 1.5 * p.value(4096, 0).exp();
        assert!((b.terminal()[0] - exact).abs() <= 1e-4 * exact);
        assert_relative_eq!(
            terminal_state(&sys, &p, &[1.5], 1.0, 4, 4096).unwrap()[0],
            b.terminal()[0],
            epsilon = 1e-14
        );
    }

    #[test]
    fn transport_identity_heisenberg() {
        let sys = heisenberg();
        let p = FbmSampler::new(0.7, 1024, 2, SamplingMethod::Circulant).unwrap().sample(3, 0);
        let b = integrate(&sys, &p, &[0.2, -0.4, 1.0], 1.0, 4).unwrap();
        let res = transport_residuals(&b, &sys);
        assert_eq!(res[0], 0.0);
        assert!(res.iter().all(|&r| r < 1e-10), "{}", transport_residual(&b, &sys));
        assert!(b.inverse_defect() < 1e-10);
    }

    #[test]
    fn commuting_constants_keep_beta_identity() {
        let sys = system(vec![field(&["1", "0"]), field(&["0.5", "1"])], 1);
        let p = FbmSampler::new(0.4, 256, 2, SamplingMethod::Circulant).unwrap().sample(5, 0);
        let b = integrate(&sys, &p, &[0.0, 0.0], 0.5, 2).unwrap();
        assert_eq!(b.beta(256), &[1.0, 0.0, 0.0, 1.0]);
        assert!(transport_residual(&b, &sys) < 1e-14);
    }

    #[test]
    fn transport_identity_trig_pair() {
        let sys = system(vec![field(&["1", "0.5*sin(x1)"]), field(&["0.5*cos(x2)", "1"])], 1);
        let p = FbmSampler::new(0.7, 4096, 2, SamplingMethod::Circulant).unwrap().sample(8, 0);
        let b = integrate(&sys, &p, &[0.3, 0.1], 1.0, 4).unwrap();
        let r = transport_residual(&b, &sys);
        assert!(r < 1e-2, "residual {r}");
        assert!(b.inverse_defect() < 1e-6);
    }

    #[test]
    fn kernel_examples() {
        let sys = system(vec![field(&["3"])], 1);
        let p = FbmSampler::new(0.5, 64, 1, SamplingMethod::Circulant).unwrap().sample(1, 0);
        let eps = 0.5;
        let b = integrate(&sys, &p, &[0.0], eps, 1).unwrap();
        let k = malliavin_kernel(&b, &sys);
        assert!(k[0].values().iter().all(|&v| (v - 3.0 * eps.sqrt()).abs() < 1e-14));

        let sys = system(vec![field(&["x1"])], 1);
        let p = FbmSampler::new(0.5, 1024, 1, SamplingMethod::Circulant).unwrap().sample(2, 0);
        let b = integrate(&sys, &p, &[2.0], 1.0, 4).unwrap();
        let exact = 2.0 * p.value(1024, 0).exp();
        for pts in &malliavin_kernel_grid(&b, &sys)[0] {
            assert!((pts[0] - exact).abs() < 1e-6 * exact);
        }
    }

    #[test]
    fn blowup_is_reported() {
        let sys = system(vec![field(&["x1^2"])], 1);
        let p = FbmPath::from_values(0.5, 1, vec![0.0, 50.0, 100.0, 150.0]).unwrap();
        assert!(matches!(integrate(&sys, &p, &[1.0], 1.0, 1), Err(Error::Blowup { .. })));
    }

    #[test]
    fn input_validation() {
        let sys = heisenberg();
        let p = FbmSampler::new(0.7, 16, 1, SamplingMethod::Circulant).unwrap().sample(1, 0);
        assert!(matches!(integrate(&sys, &p, &[0.0; 3], 1.0, 1), Err(Error::GridMismatch(_))));
        let p2 = FbmSampler::new(0.7, 16, 2, SamplingMethod::Circulant).unwrap().sample(1, 0);
        assert!(integrate(&sys, &p2, &[0.0; 2], 1.0, 1).is_err());
        assert!(integrate(&sys, &p2, &[0.0; 3], 0.0, 1).is_err());
        assert!(integrate_prefix(&sys, &p2, &[0.0; 3], 1.0, 1, 17).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let sys = heisenberg();
        let p = FbmSampler::new(0.7, 8, 2, SamplingMethod::Circulant).unwrap().sample(1, 0);
        let b = integrate(&sys, &p, &[0.0; 3], 1.0, 1).unwrap();
        let mut out = Vec::new();
        b.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("t,X1,X2,X3,J1_1"));
        assert_eq!(first.split(',').count(), 1 + 3 + 18 + 36);
        assert_eq!(text.lines().count(), 10);
    }
}
