//! Vector fields, exact Lie brackets and structure functions.
//!
//! Fields are vectors of [`PolyTrig`] components, so brackets are computed
//! symbolically. The bracket table holds `V_[I]` for all words up to length
//! `l + 1`; the structure functions express every length-`(l+1)` bracket in
//! the frame `{V_[J] : 1 ≤ |J| ≤ l}`.

pub mod expr;

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

pub use expr::{CompiledScalar, Osc, PolyTrig, DEFAULT_DEGREE_CAP};

use crate::words::{Word, WordBasis};
use crate::{Error, Result};

/// A vector field on `ℝⁿ` with components in the closed class.
#[derive(Clone, PartialEq)]
pub struct SmoothField {
    components: Vec<PolyTrig>,
}

impl SmoothField {
    pub fn new(components: Vec<PolyTrig>) -> Result<Self> {
        let n = components.len();
        if n == 0 || components.iter().any(|c| c.dim() != n) {
            return Err(Error::Domain("a field on ℝⁿ needs n components in n variables".into()));
        }
        Ok(SmoothField { components })
    }

    pub fn zero(n: usize) -> Self {
        SmoothField {
            components: vec![PolyTrig::zero(n); n],
        }
    }

    /// Constant field.
    pub fn constant(values: &[f64]) -> Self {
        let n = values.len();
        SmoothField {
            components: values.iter().map(|&v| PolyTrig::constant(n, v)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[PolyTrig] {
        &self.components
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(PolyTrig::is_zero)
    }

    pub fn degree(&self) -> u32 {
        self.components.iter().map(PolyTrig::degree).max().unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.components.iter().map(|c| c.eval(x)).collect()
    }

    pub fn scale(&self, s: f64) -> SmoothField {
        SmoothField {
            components: self.components.iter().map(|c| c.scale(s)).collect(),
        }
    }

    pub fn add(&self, other: &SmoothField) -> SmoothField {
        SmoothField {
            components: self.components.iter().zip(&other.components).map(|(a, b)| a.add(b)).collect(),
        }
    }

    pub fn sub(&self, other: &SmoothField) -> SmoothField {
        self.add(&other.scale(-1.0))
    }

    /// `V_[I]^ε = ε^{|I| H} V_[I]`.
    pub fn rescaled(&self, epsilon: f64, word_len: usize, hurst: f64) -> SmoothField {
        self.scale(rescale_factor(epsilon, word_len, hurst))
    }

    /// `Σ_k b_k(x) ∂_k self` applied componentwise: the directional
    /// derivative `∂self · b`.
    fn derivative_along(&self, b: &SmoothField, cap: u32) -> Result<SmoothField> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n);
        for comp in &self.components {
            let mut acc = PolyTrig::zero(n);
            for (k, bk) in b.components.iter().enumerate() {
                if bk.is_zero() {
                    continue;
                }
                let dk = comp.derivative(k);
                if !dk.is_zero() {
                    acc = acc.add(&dk.mul(bk, cap)?);
                }
            }
            out.push(acc);
        }
        Ok(SmoothField { components: out })
    }

    /// `c` with `self = c · other`, when such a constant exists.
    pub fn ratio_to(&self, other: &SmoothField) -> Option<f64> {
        let mut ratio: Option<f64> = None;
        for (a, b) in self.components.iter().zip(&other.components) {
            match (a.is_zero(), b.is_zero()) {
                (true, true) => continue,
                (true, false) | (false, true) => return None,
                (false, false) => {
                    let r = a.ratio_to(b)?;
                    match ratio {
                        None => ratio = Some(r),
                        Some(r0) if (r - r0).abs() <= 1e-14 * r0.abs().max(1.0) => {}
                        Some(_) => return None,
                    }
                }
            }
        }
        ratio
    }
}

impl fmt::Display for SmoothField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, c) in self.components.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{c}")?;
        }
        f.write_str("]")
    }
}

impl fmt::Debug for SmoothField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// `[a, b] = ∂b·a − ∂a·b`.
pub fn lie_bracket(a: &SmoothField, b: &SmoothField, cap: u32) -> Result<SmoothField> {
    if a.dim() != b.dim() {
        return Err(Error::Domain("bracket of fields on different spaces".into()));
    }
    Ok(b.derivative_along(a, cap)?.sub(&a.derivative_along(b, cap)?))
}

/// `ε^{len·H}`.
pub fn rescale_factor(epsilon: f64, word_len: usize, hurst: f64) -> f64 {
    epsilon.powf(word_len as f64 * hurst)
}

/// `ω^{J,ε}_I / ω^J_I = ε^{(|I|−|J|)H}`.
pub fn omega_rescale_factor(epsilon: f64, i_len: usize, j_len: usize, hurst: f64) -> f64 {
    epsilon.powf((i_len as f64 - j_len as f64) * hurst)
}

/// A field with precompiled components and Jacobian.
#[derive(Clone, Debug)]
pub struct CompiledField {
    n: usize,
    comps: Vec<CompiledScalar>,
    // jac[i*n + k] = ∂_k V_i
    jac: Vec<CompiledScalar>,
    zero: bool,
}

impl CompiledField {
    pub fn new(field: &SmoothField) -> Self {
        let n = field.dim();
        let comps = field.components.iter().map(CompiledScalar::new).collect();
        let mut jac = Vec::with_capacity(n * n);
        for c in &field.components {
            for k in 0..n {
                jac.push(CompiledScalar::new(&c.derivative(k)));
            }
        }
        CompiledField {
            n,
            comps,
            jac,
            zero: field.is_zero(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.comps) {
            *o = c.eval(x);
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.eval_into(x, &mut out);
        out
    }

    /// Row-major `n × n` Jacobian.
    #[inline]
    pub fn jacobian_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.jac) {
            *o = c.eval(x);
        }
    }
}

/// `V_[I]` for all nonempty words up to length `l + 1`.
#[derive(Clone, Debug)]
pub struct BracketTable {
    level: usize,
    basis: WordBasis,
    entries: Vec<SmoothField>,
}

impl BracketTable {
    /// Builds the table by `V_[I∗j] = [V_[I], V_j]`.
    pub fn build(fields: &[SmoothField], level: usize, cap: u32) -> Result<Self> {
        if level == 0 {
            return Err(Error::Domain("bracket level must be at least 1".into()));
        }
        let d = fields.len();
        if d == 0 {
            return Err(Error::Domain("at least one field is required".into()));
        }
        let basis = WordBasis::new(d, level + 1, false);
        let mut entries: Vec<SmoothField> = Vec::with_capacity(basis.len());
        for word in basis.words() {
            let field = if word.len() == 1 {
                fields[word.letters()[0] as usize - 1].clone()
            } else {
                let (&last, prefix) = word.letters().split_last().expect("nonempty");
                let parent = &entries[basis.index_of(&Word::new(prefix.to_vec())?).expect("shorter word")];
                let vj = &fields[last as usize - 1];
                if parent.is_zero() || vj.is_zero() {
                    SmoothField::zero(vj.dim())
                } else {
                    lie_bracket(parent, vj, cap)?
                }
            };
            entries.push(field);
        }
        Ok(BracketTable { level, basis, entries })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn alphabet(&self) -> usize {
        self.basis.alphabet()
    }

    pub fn basis(&self) -> &WordBasis {
        &self.basis
    }

    pub fn get(&self, word: &Word) -> Option<&SmoothField> {
        self.basis.index_of(word).map(|i| &self.entries[i])
    }

    pub fn entry(&self, idx: usize) -> &SmoothField {
        &self.entries[idx]
    }
}

/// How one length-`(l+1)` bracket is expressed in the frame.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum OmegaRow {
    /// The bracket vanishes identically.
    Zero,
    /// `V_[I] = coef · V_[J]` symbolically, `J` given by its frame index.
    Multiple { target: usize, coef: f64 },
    /// Minimum-norm least squares against the frame at the evaluation point.
    Pointwise,
}

/// `ω^J_I` for `I` of length `l + 1` and `J ∈ 𝒜₁(l)`; for `|I| ≤ l` the
/// coefficients are `δ^J_I`.
#[derive(Clone, Debug)]
pub struct StructureFunctions {
    level: usize,
    frame_basis: WordBasis,
    top_words: Vec<Word>,
    rows: Vec<OmegaRow>,
    frame: Vec<CompiledField>,
    tops: Vec<CompiledField>,
    has_pointwise: bool,
}

impl StructureFunctions {
    pub fn level(&self) -> usize {
        self.level
    }

    /// `𝒜₁(l)` in enumeration order (the matrix index set).
    pub fn frame_basis(&self) -> &WordBasis {
        &self.frame_basis
    }

    /// Words of length `l + 1` in enumeration order.
    pub fn top_words(&self) -> &[Word] {
        &self.top_words
    }

    pub fn rows(&self) -> &[OmegaRow] {
        &self.rows
    }

    /// True when every row is an exact symbolic expression.
    pub fn is_exact(&self) -> bool {
        !self.has_pointwise
    }

    /// `ω^J_I(x)`; `I ∈ 𝒜₁(l+1)`, `J ∈ 𝒜₁(l)`.
    pub fn omega(&self, i: &Word, j: &Word, x: &[f64]) -> Result<f64> {
        let col = self
            .frame_basis
            .index_of(j)
            .ok_or_else(|| Error::Domain(format!("{j} is not in the frame")))?;
        if i.len() <= self.level {
            return Ok(if i == j { 1.0 } else { 0.0 });
        }
        let top = self
            .top_words
            .iter()
            .position(|w| w == i)
            .ok_or_else(|| Error::Domain(format!("{i} is not a length-{} word", self.level + 1)))?;
        let mut all = vec![0.0; self.top_words.len() * self.frame_basis.len()];
        self.eval_top_into(x, &mut all);
        Ok(all[top * self.frame_basis.len() + col])
    }

    /// Writes `ω^J_I(x)` for all top words `I` (rows) and frame words `J`
    /// (columns), row-major. One least-squares factorization serves all
    /// pointwise rows.
    pub fn eval_top_into(&self, x: &[f64], out: &mut [f64]) {
        let w = self.frame_basis.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        let svd = self.has_pointwise.then(|| {
            let n = x.len();
            let mut a = DMatrix::zeros(n, w);
            let mut col = vec![0.0; n];
            for (c, f) in self.frame.iter().enumerate() {
                f.eval_into(x, &mut col);
                for r in 0..n {
                    a[(r, c)] = col[r];
                }
            }
            a.svd(true, true)
        });
        for (t, row) in self.rows.iter().enumerate() {
            match row {
                OmegaRow::Zero => {}
                OmegaRow::Multiple { target, coef } => out[t * w + target] = *coef,
                OmegaRow::Pointwise => {
                    let svd = svd.as_ref().expect("factorization built for pointwise rows");
                    let b = DVector::from_vec(self.tops[t].eval(x));
                    let tol = 1e-10 * svd.singular_values.max().max(f64::MIN_POSITIVE);
                    if let Ok(c) = svd.solve(&b, tol) {
                        for k in 0..w {
                            out[t * w + k] = c[k];
                        }
                    }
                }
            }
        }
    }
}

/// Per-point outcome of the UFG check.
#[derive(Clone, Debug, Serialize)]
pub struct UfgViolation {
    pub point: usize,
    pub word: String,
    pub residual: f64,
    pub tolerance: f64,
}

/// Residuals of `V_[I](x) = Σ_J ω^J_I(x) V_[J](x)` over the sample points.
#[derive(Clone, Debug, Serialize)]
pub struct UfgReport {
    pub points: usize,
    /// Largest `residual / (1 + ∥V_[I](x)∥)`.
    pub max_scaled_residual: f64,
    pub violations: Vec<UfgViolation>,
}

impl UfgReport {
    pub fn passes(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Relative tolerance of the pointwise UFG check.
pub const UFG_TOLERANCE: f64 = 1e-8;

/// Chooses an exact representation for each length-`(l+1)` bracket when
/// one exists (zero, or a constant multiple of a frame field) and falls back
/// to pointwise least squares otherwise; then verifies the expansion at
/// every sample point. The condition is only certified at those points.
pub fn fit_structure_functions(
    table: &BracketTable,
    level: usize,
    sample_points: &[Vec<f64>],
) -> Result<(StructureFunctions, UfgReport)> {
    if table.level() < level || level == 0 {
        return Err(Error::Domain(format!(
            "table of level {} cannot provide structure functions of level {level}",
            table.level()
        )));
    }
    let d = table.alphabet();
    let frame_basis = WordBasis::new(d, level, false);
    let frame_fields: Vec<&SmoothField> = frame_basis
        .words()
        .iter()
        .map(|w| table.get(w).expect("frame word in table"))
        .collect();
    let top_words: Vec<Word> = WordBasis::new(d, level + 1, false)
        .words()
        .iter()
        .filter(|w| w.len() == level + 1)
        .cloned()
        .collect();
    let mut rows = Vec::with_capacity(top_words.len());
    let mut tops = Vec::with_capacity(top_words.len());
    for w in &top_words {
        let field = table.get(w).expect("top word in table");
        let row = if field.is_zero() {
            OmegaRow::Zero
        } else if let Some((target, coef)) = frame_fields
            .iter()
            .enumerate()
            .find_map(|(k, f)| field.ratio_to(f).map(|c| (k, c)))
        {
            OmegaRow::Multiple { target, coef }
        } else {
            OmegaRow::Pointwise
        };
        rows.push(row);
        tops.push(CompiledField::new(field));
    }
    let has_pointwise = rows.iter().any(|r| *r == OmegaRow::Pointwise);
    let sf = StructureFunctions {
        level,
        frame: frame_fields.iter().map(|f| CompiledField::new(f)).collect(),
        frame_basis,
        top_words,
        rows,
        tops,
        has_pointwise,
    };

    let w = sf.frame_basis.len();
    let mut coeffs = vec![0.0; sf.top_words.len() * w];
    let mut max_scaled = 0.0f64;
    let mut violations = Vec::new();
    for (p, x) in sample_points.iter().enumerate() {
        sf.eval_top_into(x, &mut coeffs);
        let frame_vals: Vec<Vec<f64>> = sf.frame.iter().map(|f| f.eval(x)).collect();
        for (t, word) in sf.top_words.iter().enumerate() {
            let target = sf.tops[t].eval(x);
            let mut resid = target.clone();
            for (k, fv) in frame_vals.iter().enumerate() {
                let c = coeffs[t * w + k];
                for (r, v) in resid.iter_mut().zip(fv) {
                    *r -= c * v;
                }
            }
            let res = norm(&resid);
            let scale = 1.0 + norm(&target);
            max_scaled = max_scaled.max(res / scale);
            if !(res <= UFG_TOLERANCE * scale) {
                violations.push(UfgViolation {
                    point: p,
                    word: word.to_string(),
                    residual: res,
                    tolerance: UFG_TOLERANCE * scale,
                });
            }
        }
    }
    let report = UfgReport {
        points: sample_points.len(),
        max_scaled_residual: max_scaled,
        violations,
    };
    Ok((sf, report))
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `d` fields on `ℝⁿ` with a UFG level, as read from a `.vf` file.
///
/// ```text
/// # comment
/// n 3
/// d 2
/// level 2
/// V1.1 = 1
/// V1.2 = 0
/// ...
/// V2.3 = x1
/// ```
///
/// Every component `Vi.k` must be given exactly once; right-hand sides use
/// the [`PolyTrig::parse`] syntax.
#[derive(Clone, Debug)]
pub struct VectorFieldSet {
    pub name: String,
    pub level: usize,
    pub fields: Vec<SmoothField>,
}

impl VectorFieldSet {
    pub fn new(name: &str, level: usize, fields: Vec<SmoothField>) -> Result<Self> {
        let n = fields.first().map(SmoothField::dim).unwrap_or(0);
        if n == 0 || fields.iter().any(|f| f.dim() != n) {
            return Err(Error::Domain("fields must share a nonzero state dimension".into()));
        }
        if level == 0 {
            return Err(Error::Domain("level must be at least 1".into()));
        }
        Ok(VectorFieldSet {
            name: name.to_string(),
            level,
            fields,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.fields[0].dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.fields.len()
    }

    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { line, msg };
        let (mut n, mut d, mut level) = (None, None, None);
        let mut comps: Vec<(usize, usize, usize, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some((lhs, rhs)) = line.split_once('=') {
                let lhs = lhs.trim();
                let (f, c) = lhs
                    .strip_prefix('V')
                    .and_then(|r| r.split_once('.'))
                    .ok_or_else(|| err(lineno, format!("expected Vi.k on the left, got {lhs:?}")))?;
                let f: usize = f.parse().map_err(|_| err(lineno, format!("bad field index in {lhs:?}")))?;
                let c: usize = c.parse().map_err(|_| err(lineno, format!("bad component in {lhs:?}")))?;
                comps.push((lineno, f, c, rhs.trim().to_string()));
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("");
            let value: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(lineno, format!("expected `{key} <integer>`")))?;
            if parts.next().is_some() {
                return Err(err(lineno, "trailing tokens".into()));
            }
            match key {
                "n" => n = Some(value),
                "d" => d = Some(value),
                "level" => level = Some(value),
                other => return Err(err(lineno, format!("unknown key {other:?}"))),
            }
        }
        let n = n.ok_or_else(|| err(0, "missing `n`".into()))?;
        let d = d.ok_or_else(|| err(0, "missing `d`".into()))?;
        let level = level.ok_or_else(|| err(0, "missing `level`".into()))?;
        if n == 0 || d == 0 || d > 255 {
            return Err(err(0, "n and d must be positive (d < 256)".into()));
        }
        let mut slots: Vec<Option<PolyTrig>> = vec![None; n * d];
        for (lineno, f, c, rhs) in comps {
            if f == 0 || f > d || c == 0 || c > n {
                return Err(err(lineno, format!("V{f}.{c} outside V1..V{d}, components 1..{n}")));
            }
            let slot = &mut slots[(f - 1) * n + (c - 1)];
            if slot.is_some() {
                return Err(err(lineno, format!("V{f}.{c} given twice")));
            }
            *slot = Some(PolyTrig::parse(&rhs, n).map_err(|m| err(lineno, m))?);
        }
        let mut fields = Vec::with_capacity(d);
        for f in 0..d {
            let mut cs = Vec::with_capacity(n);
            for c in 0..n {
                cs.push(
                    slots[f * n + c]
                        .take()
                        .ok_or_else(|| err(0, format!("missing component V{}.{}", f + 1, c + 1)))?,
                );
            }
            fields.push(SmoothField::new(cs)?);
        }
        VectorFieldSet::new(name, level, fields)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("system");
        Self::parse(name, &text)
    }

    /// Serializes back into the `.vf` text format.
    pub fn to_text(&self) -> String {
        let mut s = format!("n {}\nd {}\nlevel {}\n", self.state_dim(), self.noise_dim(), self.level);
        for (f, field) in self.fields.iter().enumerate() {
            for (c, comp) in field.components().iter().enumerate() {
                s.push_str(&format!("V{}.{} = {}\n", f + 1, c + 1, comp));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mc::path_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn field(s: &[&str]) -> SmoothField {
        let n = s.len();
        SmoothField::new(s.iter().map(|c| PolyTrig::parse(c, n).unwrap()).collect()).unwrap()
    }

    fn heisenberg() -> Vec<SmoothField> {
        vec![field(&["1", "0", "0"]), field(&["0", "1", "x1"])]
    }

    fn w(s: &str) -> Word {
        s.parse().unwrap()
    }

    #[test]
    fn bracket_examples() {
        let a = SmoothField::constant(&[1.0, 2.0]);
        let b = SmoothField::constant(&[0.5, -1.0]);
        assert!(lie_bracket(&a, &b, 16).unwrap().is_zero());
        let h = heisenberg();
        assert_eq!(lie_bracket(&h[0], &h[1], 16).unwrap(), field(&["0", "0", "1"]));
        let p = field(&["x1*x2 + 3", "x2^2 - x1"]);
        assert!(lie_bracket(&p, &p, 16).unwrap().is_zero());
    }

    #[test]
    fn table_examples() {
        let consts = vec![SmoothField::constant(&[1.0, 0.0]), SmoothField::constant(&[0.0, 1.0])];
        let t = BracketTable::build(&consts, 2, 16).unwrap();
        for word in t.basis().words() {
            assert_eq!(t.get(word).unwrap().is_zero(), word.len() >= 2, "{word}");
        }
        let t = BracketTable::build(&heisenberg(), 2, 16).unwrap();
        assert_eq!(t.get(&w("(1,2)")).unwrap(), &field(&["0", "0", "1"]));
        assert_eq!(t.get(&w("(2,1)")).unwrap(), &field(&["0", "0", "-1"]));
        assert_eq!(t.get(&w("(1)")).unwrap(), &heisenberg()[0]);
        for word in t.basis().words().iter().filter(|w| w.len() == 3) {
            assert!(t.get(word).unwrap().is_zero());
        }
        let single = BracketTable::build(&[field(&["x1^2"])], 1, 16).unwrap();
        assert!(single.get(&w("(1,1)")).unwrap().is_zero());
    }

    #[test]
    fn structure_function_examples() {
        let pts: Vec<Vec<f64>> = (0..100)
            .map(|i| {
                let mut rng = path_rng(3, i);
                (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()
            })
            .collect();
        let consts = vec![SmoothField::constant(&[1.0, 0.0, 0.0]), SmoothField::constant(&[0.0, 1.0, 0.0])];
        let t = BracketTable::build(&consts, 1, 16).unwrap();
        let (sf, rep) = fit_structure_functions(&t, 1, &pts).unwrap();
        assert!(rep.passes());
        assert_eq!(rep.max_scaled_residual, 0.0);
        assert!(sf.rows().iter().all(|r| *r == OmegaRow::Zero));

        let t = BracketTable::build(&heisenberg(), 2, 16).unwrap();
        let (sf, rep) = fit_structure_functions(&t, 2, &pts).unwrap();
        assert!(rep.passes() && rep.max_scaled_residual == 0.0);
        assert!(sf.is_exact());
        assert_eq!(sf.top_words().len(), 8);
        for i in sf.frame_basis().words() {
            for j in sf.frame_basis().words() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_eq!(sf.omega(i, j, &pts[0]).unwrap(), expected);
            }
        }
    }

    #[test]
    fn multiple_rows_are_detected() {
        // V1 = (1,0), V2 = (0, x1) gives [V1,V2] = (0,1) and [[V1,V2],V1] = 0;
        // at level 2 with V3 = (0,1) added, [V1,V2] = V3 exactly.
        let fields = vec![field(&["1", "0"]), field(&["0", "x1"]), field(&["0", "2"])];
        let t = BracketTable::build(&fields, 1, 16).unwrap();
        let (sf, rep) = fit_structure_functions(&t, 1, &[vec![0.3, 0.1]]).unwrap();
        assert!(rep.passes());
        let idx = sf.top_words().iter().position(|x| *x == w("(1,2)")).unwrap();
        assert_eq!(sf.rows()[idx], OmegaRow::Multiple { target: 2, coef: 0.5 });
    }

    #[test]
    fn ufg_violation_is_reported_where_rank_collapses() {
        let fields = vec![field(&["1", "0"]), field(&["0", "x1"])];
        let t = BracketTable::build(&fields, 1, 16).unwrap();
        let pts = vec![vec![1.0, 0.0], vec![0.0, 0.5], vec![-0.5, 2.0]];
        let (_, rep) = fit_structure_functions(&t, 1, &pts).unwrap();
        assert!(!rep.passes());
        assert!(rep.violations.iter().all(|v| v.point == 1));
        let words: Vec<&str> = rep.violations.iter().map(|v| v.word.as_str()).collect();
        assert_eq!(words, ["(1,2)", "(2,1)"]);
    }

    #[test]
    fn trig_pair_is_ufg_at_level_one() {
        let fields = vec![field(&["1", "0.5*sin(x1)"]), field(&["0.5*cos(x2)", "1"])];
        let t = BracketTable::build(&fields, 1, 16).unwrap();
        let pts: Vec<Vec<f64>> = (0..100)
            .map(|i| {
                let mut rng = path_rng(9, i);
                vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]
            })
            .collect();
        let (sf, rep) = fit_structure_functions(&t, 1, &pts).unwrap();
        assert!(!sf.is_exact());
        assert!(rep.passes(), "{rep:?}");
        assert!(rep.max_scaled_residual < 1e-12);
    }

    #[test]
    fn rescaling_examples() {
        let f = field(&["x1", "1"]);
        assert_eq!(f.rescaled(1.0, 3, 0.7), f);
        assert_eq!(rescale_factor(0.25, 2, 0.5), 0.25);
        assert_eq!(f.rescaled(0.25, 2, 0.5), f.scale(0.25));
        assert_eq!(omega_rescale_factor(0.5, 3, 1, 0.5), 0.5);
    }

    #[test]
    fn vf_roundtrip_and_errors() {
        let text = "# Heisenberg\nn 3\nd 2\nlevel 2\nV1.1 = 1\nV1.2 = 0\nV1.3 = 0\nV2.1 = 0\nV2.2 = 1\nV2.3 = x1\n";
        let set = VectorFieldSet::parse("h", text).unwrap();
        assert_eq!(set.fields, heisenberg());
        assert_eq!(set.level, 2);
        let again = VectorFieldSet::parse("h", &set.to_text()).unwrap();
        assert_eq!(again.fields, set.fields);
        assert!(VectorFieldSet::parse("h", "n 1\nd 1\nlevel 1\n").is_err());
        assert!(VectorFieldSet::parse("h", "n 1\nd 1\nlevel 1\nV1.1 = 1\nV1.1 = 2\n").is_err());
        assert!(matches!(
            VectorFieldSet::parse("h", "n 1\nd 1\nlevel 1\nV1.1 = y\n"),
            Err(Error::Parse { line: 4, .. })
        ));
    }

    #[test]
    fn degree_cap_propagates() {
        let fields = vec![field(&["x1^9", "0"]), field(&["0", "x1^9"])];
        assert!(matches!(BracketTable::build(&fields, 2, 16), Err(Error::DegreeCap { .. })));
    }

    fn arb_field() -> impl Strategy<Value = SmoothField> {
        // degree ≤ 2 polynomials in 3 variables with small integer coefficients
        let monos = ["1", "x1", "x2", "x3", "x1^2", "x1*x2", "x2*x3", "x3^2"];
        prop::collection::vec(prop::collection::vec(-2i32..=2, monos.len()), 3).prop_map(move |rows| {
            let comps = rows
                .iter()
                .map(|cs| {
                    let mut p = PolyTrig::zero(3);
                    for (c, m) in cs.iter().zip(monos) {
                        p = p.add(&PolyTrig::parse(m, 3).unwrap().scale(*c as f64));
                    }
                    p
                })
                .collect();
            SmoothField::new(comps).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn antisymmetry_is_exact(a in arb_field(), b in arb_field()) {
            let ab = lie_bracket(&a, &b, 16).unwrap();
            let ba = lie_bracket(&b, &a, 16).unwrap();
            prop_assert!(ab.add(&ba).is_zero());
        }

        #[test]
        fn jacobi_is_exact(a in arb_field(), b in arb_field(), c in arb_field()) {
            let br = |x: &SmoothField, y: &SmoothField| lie_bracket(x, y, 16).unwrap();
            let sum = br(&a, &br(&b, &c)).add(&br(&b, &br(&c, &a))).add(&br(&c, &br(&a, &b)));
            prop_assert!(sum.is_zero(), "{sum}");
        }
    }
}
