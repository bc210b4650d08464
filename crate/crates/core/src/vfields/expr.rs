//! Trigonometric polynomials with polynomial coefficients.
//!
//! A term is `c · Π_i x_i^{p_i} · τ_i(k_i x_i)` where each `τ_i` is `1`,
//! `cos` or `sin` with a positive integer frequency. Sums of such terms are
//! closed under addition, products (product-to-sum) and partial
//! differentiation, which is all the Lie-bracket machinery needs. Plain
//! polynomials are the terms with no trigonometric factor.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;

use crate::{Error, Result};

/// Default cap on the per-term degree `Σ_i (p_i + k_i)`.
pub const DEFAULT_DEGREE_CAP: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Osc {
    One,
    Cos(u32),
    Sin(u32),
}

impl Osc {
    fn freq(self) -> u32 {
        match self {
            Osc::One => 0,
            Osc::Cos(k) | Osc::Sin(k) => k,
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            Osc::One => 1.0,
            Osc::Cos(k) => (k as f64 * x).cos(),
            Osc::Sin(k) => (k as f64 * x).sin(),
        }
    }
}

/// Per-variable factor `x^pow · osc(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Factor {
    pub pow: u32,
    pub osc: Osc,
}

impl Factor {
    const ONE: Factor = Factor { pow: 0, osc: Osc::One };

    fn degree(self) -> u32 {
        self.pow + self.osc.freq()
    }
}

// cos(a)cos(b), sin(a)sin(b), sin(a)cos(b) reduced to sums of single
// oscillators, with sin(-k) = -sin(k) and sin(0) = 0.
fn osc_product(a: Osc, b: Osc) -> Vec<(f64, Osc)> {
    fn cos(k: i64) -> (f64, Osc) {
        if k == 0 {
            (1.0, Osc::One)
        } else {
            (1.0, Osc::Cos(k.unsigned_abs() as u32))
        }
    }
    fn sin(k: i64) -> Option<(f64, Osc)> {
        match k.cmp(&0) {
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some((1.0, Osc::Sin(k as u32))),
            std::cmp::Ordering::Less => Some((-1.0, Osc::Sin((-k) as u32))),
        }
    }
    let half = |(c, o): (f64, Osc), s: f64| (0.5 * c * s, o);
    match (a, b) {
        (Osc::One, o) | (o, Osc::One) => vec![(1.0, o)],
        (Osc::Cos(p), Osc::Cos(q)) => {
            let (p, q) = (p as i64, q as i64);
            vec![half(cos(p - q), 1.0), half(cos(p + q), 1.0)]
        }
        (Osc::Sin(p), Osc::Sin(q)) => {
            let (p, q) = (p as i64, q as i64);
            vec![half(cos(p - q), 1.0), half(cos(p + q), -1.0)]
        }
        (Osc::Sin(p), Osc::Cos(q)) | (Osc::Cos(q), Osc::Sin(p)) => {
            let (p, q) = (p as i64, q as i64);
            let mut out = vec![half(sin(p + q).expect("positive frequency"), 1.0)];
            if let Some(t) = sin(p - q) {
                out.push(half(t, 1.0));
            }
            out
        }
    }
}

/// A scalar function of `n` real variables in the closed class.
#[derive(Clone, PartialEq)]
pub struct PolyTrig {
    n: usize,
    terms: BTreeMap<Vec<Factor>, f64>,
}

impl PolyTrig {
    pub fn zero(n: usize) -> Self {
        PolyTrig {
            n,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(n: usize, c: f64) -> Self {
        let mut p = PolyTrig::zero(n);
        p.add_term(vec![Factor::ONE; n], c);
        p
    }

    /// The coordinate function `x_i` (0-based).
    pub fn var(n: usize, i: usize) -> Self {
        Self::monomial(n, i, 1, Osc::One)
    }

    /// `x_i^pow · osc(x_i)`.
    pub fn monomial(n: usize, i: usize, pow: u32, osc: Osc) -> Self {
        assert!(i < n, "variable index out of range");
        let mut key = vec![Factor::ONE; n];
        key[i] = Factor { pow, osc };
        let mut p = PolyTrig::zero(n);
        p.add_term(key, 1.0);
        p
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[Factor], f64)> {
        self.terms.iter().map(|(k, &c)| (k.as_slice(), c))
    }

    /// Largest `Σ_i (pow_i + freq_i)` over the terms (0 for the zero function).
    pub fn degree(&self) -> u32 {
        self.terms
            .keys()
            .map(|k| k.iter().map(|f| f.degree()).sum())
            .max()
            .unwrap_or(0)
    }

    fn add_term(&mut self, key: Vec<Factor>, c: f64) {
        if c == 0.0 {
            return;
        }
        match self.terms.entry(key) {
            Entry::Occupied(mut e) => {
                *e.get_mut() += c;
                if *e.get() == 0.0 {
                    e.remove();
                }
            }
            Entry::Vacant(e) => {
                e.insert(c);
            }
        }
    }

    pub fn add(&self, other: &PolyTrig) -> PolyTrig {
        assert_eq!(self.n, other.n, "dimension mismatch");
        let mut out = self.clone();
        for (k, &c) in &other.terms {
            out.add_term(k.clone(), c);
        }
        out
    }

    pub fn sub(&self, other: &PolyTrig) -> PolyTrig {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> PolyTrig {
        if s == 0.0 {
            return PolyTrig::zero(self.n);
        }
        PolyTrig {
            n: self.n,
            terms: self.terms.iter().map(|(k, &c)| (k.clone(), c * s)).collect(),
        }
    }

    /// Product, failing if any resulting term exceeds `cap`.
    pub fn mul(&self, other: &PolyTrig, cap: u32) -> Result<PolyTrig> {
        assert_eq!(self.n, other.n, "dimension mismatch");
        let mut out = PolyTrig::zero(self.n);
        for (ka, &ca) in &self.terms {
            for (kb, &cb) in &other.terms {
                // expand variable by variable
                let mut partial: Vec<(f64, Vec<Factor>)> = vec![(ca * cb, Vec::with_capacity(self.n))];
                for i in 0..self.n {
                    let pow = ka[i].pow + kb[i].pow;
                    let prods = osc_product(ka[i].osc, kb[i].osc);
                    let mut next = Vec::with_capacity(partial.len() * prods.len());
                    for (c, key) in &partial {
                        for &(s, osc) in &prods {
                            let mut k = key.clone();
                            k.push(Factor { pow, osc });
                            next.push((c * s, k));
                        }
                    }
                    partial = next;
                }
                for (c, key) in partial {
                    let degree: u32 = key.iter().map(|f| f.degree()).sum();
                    if degree > cap {
                        return Err(Error::DegreeCap { degree, cap });
                    }
                    out.add_term(key, c);
                }
            }
        }
        Ok(out)
    }

    /// `∂/∂x_i` (0-based).
    pub fn derivative(&self, i: usize) -> PolyTrig {
        let mut out = PolyTrig::zero(self.n);
        for (key, &c) in &self.terms {
            let f = key[i];
            if f.pow > 0 {
                let mut k = key.clone();
                k[i] = Factor {
                    pow: f.pow - 1,
                    osc: f.osc,
                };
                out.add_term(k, c * f.pow as f64);
            }
            match f.osc {
                Osc::One => {}
                Osc::Cos(q) => {
                    let mut k = key.clone();
                    k[i] = Factor {
                        pow: f.pow,
                        osc: Osc::Sin(q),
                    };
                    out.add_term(k, -c * q as f64);
                }
                Osc::Sin(q) => {
                    let mut k = key.clone();
                    k[i] = Factor {
                        pow: f.pow,
                        osc: Osc::Cos(q),
                    };
                    out.add_term(k, c * q as f64);
                }
            }
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.n);
        self.terms
            .iter()
            .map(|(key, &c)| {
                key.iter()
                    .zip(x)
                    .fold(c, |acc, (f, &xi)| acc * xi.powi(f.pow as i32) * f.osc.eval(xi))
            })
            .sum()
    }

    /// Returns `c` when `self = c · other` with `other` nonzero.
    pub fn ratio_to(&self, other: &PolyTrig) -> Option<f64> {
        if other.is_zero() || self.terms.len() != other.terms.len() {
            return None;
        }
        let mut ratio = None;
        for ((ka, &ca), (kb, &cb)) in self.terms.iter().zip(&other.terms) {
            if ka != kb {
                return None;
            }
            let r = ca / cb;
            match ratio {
                None => ratio = Some(r),
                Some(r0) if (r - r0).abs() <= 1e-14 * r0.abs().max(1.0) => {}
                Some(_) => return None,
            }
        }
        ratio
    }

    /// Parses expressions such as `0.5*x1^2*cos(2*x3) - sin(x1) + 3`.
    /// Variables are 1-based (`x1..xn`).
    pub fn parse(s: &str, n: usize) -> std::result::Result<PolyTrig, String> {
        let mut out = PolyTrig::zero(n);
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.is_empty() {
            return Err("empty expression".into());
        }
        for (sign, term) in split_terms(&compact)? {
            let mut coef = sign;
            let mut key = vec![Factor::ONE; n];
            for factor in split_factors(term) {
                parse_factor(factor, n, &mut coef, &mut key)?;
            }
            out.add_term(key, coef);
        }
        Ok(out)
    }
}

// Splits on top-level '+'/'-' (not inside parentheses or float exponents).
// Consecutive signs compose, so "x1 - -2" is x1 + 2.
fn split_terms(s: &str) -> std::result::Result<Vec<(f64, &str)>, String> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0usize;
    let mut sign = 1.0;
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'(' => depth += 1,
            b')' => depth -= 1,
            b'+' | b'-' if depth == 0 => {
                let is_exp = i >= 2
                    && matches!(bytes[i - 1], b'e' | b'E')
                    && (bytes[i - 2].is_ascii_digit() || bytes[i - 2] == b'.');
                if is_exp {
                    continue;
                }
                let s_new = if b == b'-' { -1.0 } else { 1.0 };
                if i > start {
                    out.push((sign, &s[start..i]));
                    sign = s_new;
                } else {
                    sign *= s_new;
                }
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err("unbalanced parentheses".into());
    }
    if start >= s.len() {
        return Err("expression ends with an operator".into());
    }
    out.push((sign, &s[start..]));
    Ok(out)
}

// Splits on '*' outside parentheses.
fn split_factors(term: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, b) in term.bytes().enumerate() {
        match b {
            b'(' => depth += 1,
            b')' => depth -= 1,
            b'*' if depth == 0 => {
                out.push(&term[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&term[start..]);
    out
}

fn parse_factor(f: &str, n: usize, coef: &mut f64, key: &mut [Factor]) -> std::result::Result<(), String> {
    if f.is_empty() {
        return Err("empty factor".into());
    }
    if let Ok(v) = f.parse::<f64>() {
        *coef *= v;
        return Ok(());
    }
    if let Some(rest) = f.strip_prefix('x') {
        let (var, pow) = match rest.split_once('^') {
            Some((v, p)) => (v, p.parse::<u32>().map_err(|_| format!("bad exponent in {f:?}"))?),
            None => (rest, 1),
        };
        let i = parse_var(var, n)?;
        key[i].pow += pow;
        return Ok(());
    }
    for (name, is_cos) in [("cos(", true), ("sin(", false)] {
        if let Some(inner) = f.strip_prefix(name).and_then(|r| r.strip_suffix(')')) {
            let (k, var) = match inner.split_once("*x") {
                Some((k, v)) => (k.parse::<u32>().map_err(|_| format!("bad frequency in {f:?}"))?, v),
                None => (
                    1,
                    inner
                        .strip_prefix('x')
                        .ok_or_else(|| format!("expected x<i> inside {f:?}"))?,
                ),
            };
            let i = parse_var(var, n)?;
            if key[i].osc != Osc::One {
                return Err(format!("variable x{} has two trigonometric factors", i + 1));
            }
            if k == 0 {
                if !is_cos {
                    *coef = 0.0;
                }
                return Ok(());
            }
            key[i].osc = if is_cos { Osc::Cos(k) } else { Osc::Sin(k) };
            return Ok(());
        }
    }
    Err(format!("unrecognized factor {f:?}"))
}

fn parse_var(s: &str, n: usize) -> std::result::Result<usize, String> {
    let i: usize = s.parse().map_err(|_| format!("bad variable index {s:?}"))?;
    if i == 0 || i > n {
        return Err(format!("variable x{i} outside x1..x{n}"));
    }
    Ok(i - 1)
}

impl fmt::Display for PolyTrig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("0");
        }
        for (t, (key, &c)) in self.terms.iter().enumerate() {
            let mut factors = Vec::new();
            for (i, fac) in key.iter().enumerate() {
                match fac.pow {
                    0 => {}
                    1 => factors.push(format!("x{}", i + 1)),
                    p => factors.push(format!("x{}^{p}", i + 1)),
                }
                match fac.osc {
                    Osc::One => {}
                    Osc::Cos(1) => factors.push(format!("cos(x{})", i + 1)),
                    Osc::Sin(1) => factors.push(format!("sin(x{})", i + 1)),
                    Osc::Cos(k) => factors.push(format!("cos({k}*x{})", i + 1)),
                    Osc::Sin(k) => factors.push(format!("sin({k}*x{})", i + 1)),
                }
            }
            let mag = c.abs();
            if t == 0 {
                if c < 0.0 {
                    f.write_str("-")?;
                }
            } else {
                f.write_str(if c < 0.0 { " - " } else { " + " })?;
            }
            if factors.is_empty() {
                write!(f, "{mag}")?;
            } else if mag == 1.0 {
                f.write_str(&factors.join("*"))?;
            } else {
                write!(f, "{mag}*{}", factors.join("*"))?;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for PolyTrig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Flattened form for fast repeated evaluation.
#[derive(Clone, Debug)]
pub struct CompiledScalar {
    // (coef, [(var, pow, osc)]) with identity factors dropped
    terms: Vec<(f64, Vec<(usize, u32, Osc)>)>,
}

impl CompiledScalar {
    pub fn new(p: &PolyTrig) -> Self {
        let terms = p
            .terms
            .iter()
            .map(|(key, &c)| {
                let fs = key
                    .iter()
                    .enumerate()
                    .filter(|(_, f)| **f != Factor::ONE)
                    .map(|(i, f)| (i, f.pow, f.osc))
                    .collect();
                (c, fs)
            })
            .collect();
        CompiledScalar { terms }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut sum = 0.0;
        for (c, fs) in &self.terms {
            let mut v = *c;
            for &(i, pow, osc) in fs {
                let xi = x[i];
                if pow > 0 {
                    v *= xi.powi(pow as i32);
                }
                v *= osc.eval(xi);
            }
            sum += v;
        }
        sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p(s: &str, n: usize) -> PolyTrig {
        PolyTrig::parse(s, n).unwrap()
    }

    #[test]
    fn parse_and_eval() {
        let f = p("0.5*x1^2*cos(2*x2) - sin(x1) + 3", 2);
        let x = [0.7, -1.3];
        let expected = 0.5 * 0.49 * (2.0f64 * -1.3).cos() - 0.7f64.sin() + 3.0;
        assert_relative_eq!(f.eval(&x), expected, epsilon = 1e-14);
        assert_relative_eq!(CompiledScalar::new(&f).eval(&x), expected, epsilon = 1e-14);
        assert_relative_eq!(p("-x1 - -2", 1).eval(&[5.0]), -3.0);
        assert_relative_eq!(p("1e-3*x1", 1).eval(&[2.0]), 2e-3);
        assert!(PolyTrig::parse("x3", 2).is_err());
        assert!(PolyTrig::parse("cos(x1)*sin(x1)", 1).is_err());
        assert!(PolyTrig::parse("", 1).is_err());
        assert!(PolyTrig::parse("x1 +", 1).is_err());
        assert!(p("sin(0*x1)", 1).is_zero());
    }

    #[test]
    fn display_roundtrip() {
        for s in ["0", "x1", "-2.5*x1^3*sin(4*x2) + cos(x2) - 7", "0.1*x1*x2"] {
            let f = p(s, 2);
            assert_eq!(p(&f.to_string(), 2), f, "{s} -> {f}");
        }
    }

    #[test]
    fn derivative_examples() {
        let f = p("x1^3*sin(2*x1)", 1);
        let df = f.derivative(0);
        let x = 0.37f64;
        let exact = 3.0 * x * x * (2.0 * x).sin() + 2.0 * x.powi(3) * (2.0 * x).cos();
        assert_relative_eq!(df.eval(&[x]), exact, epsilon = 1e-14);
        assert!(p("x2", 2).derivative(0).is_zero());
    }

    #[test]
    fn products_use_product_to_sum() {
        let f = p("cos(x1)", 1).mul(&p("cos(x1)", 1), 16).unwrap();
        assert_eq!(f, p("0.5 + 0.5*cos(2*x1)", 1));
        let g = p("sin(3*x1)", 1).mul(&p("cos(x1)", 1), 16).unwrap();
        assert_eq!(g, p("0.5*sin(4*x1) + 0.5*sin(2*x1)", 1));
        let h = p("sin(x1)", 1).mul(&p("cos(2*x1)", 1), 16).unwrap();
        assert_eq!(h, p("0.5*sin(3*x1) - 0.5*sin(x1)", 1));
    }

    #[test]
    fn degree_cap_is_enforced() {
        let f = p("x1^9", 1);
        assert!(matches!(f.mul(&f, 16), Err(Error::DegreeCap { degree: 18, cap: 16 })));
        assert!(f.mul(&f, 18).is_ok());
    }

    #[test]
    fn ratio_detection() {
        assert_eq!(p("2*x1 + 4*cos(x2)", 2).ratio_to(&p("x1 + 2*cos(x2)", 2)), Some(2.0));
        assert_eq!(p("2*x1 + 3*cos(x2)", 2).ratio_to(&p("x1 + 2*cos(x2)", 2)), None);
        assert_eq!(p("x1", 2).ratio_to(&PolyTrig::zero(2)), None);
    }

    fn arb_poly() -> impl Strategy<Value = PolyTrig> {
        let factor = (0u32..3, 0u8..3, 1u32..3).prop_map(|(pow, kind, k)| Factor {
            pow,
            osc: match kind {
                0 => Osc::One,
                1 => Osc::Cos(k),
                _ => Osc::Sin(k),
            },
        });
        prop::collection::vec((prop::collection::vec(factor, 2), -3i32..=3), 1..4).prop_map(|terms| {
            let mut out = PolyTrig::zero(2);
            for (key, c) in terms {
                out.add_term(key, c as f64);
            }
            out
        })
    }

    proptest! {
        #[test]
        fn product_evaluates_pointwise(a in arb_poly(), b in arb_poly(), x in -2.0f64..2.0, y in -2.0f64..2.0) {
            let prod = a.mul(&b, 16).unwrap();
            let v = [x, y];
            let scale = 1.0 + (a.eval(&v) * b.eval(&v)).abs();
            prop_assert!((prod.eval(&v) - a.eval(&v) * b.eval(&v)).abs() < 1e-10 * scale * 100.0);
        }

        #[test]
        fn derivative_matches_finite_difference(a in arb_poly(), x in -2.0f64..2.0, y in -2.0f64..2.0) {
            let h = 1e-5;
            let fd = (a.eval(&[x + h, y]) - a.eval(&[x - h, y])) / (2.0 * h);
            prop_assert!((a.derivative(0).eval(&[x, y]) - fd).abs() < 1e-5 * (1.0 + fd.abs()) * 100.0);
        }

        #[test]
        fn leibniz_rule_is_exact(a in arb_poly(), b in arb_poly()) {
            let lhs = a.mul(&b, 16).unwrap().derivative(1);
            let rhs = a.derivative(1).mul(&b, 16).unwrap().add(&a.mul(&b.derivative(1), 16).unwrap());
            let diff = lhs.sub(&rhs);
            for (_, c) in diff.terms() {
                prop_assert!(c.abs() < 1e-12);
            }
        }
    }
}
