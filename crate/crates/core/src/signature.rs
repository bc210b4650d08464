//! Truncated signatures of the piecewise-linear interpolation of a path.
//!
//! Coordinates are indexed by [`WordBasis`] with the empty word included, so
//! index 0 is always `B^∅ ≡ 1`. A linear segment with increment `v` has
//! signature `exp(v)` (level `k` coordinate `v_{i1}⋯v_{ik} / k!`), and
//! segments are glued with Chen's relation
//! `(a ⊗ b)_w = Σ_{w = u∗v} a_u b_v`.

use std::io::Write;

use crate::fbm::FbmPath;
use crate::words::{Word, WordBasis};
use crate::{Error, Result};

/// Largest supported word length.
pub const MAX_WORD_LENGTH: usize = 4;

/// `exp(v)` truncated at the basis length.
pub fn segment_signature(v: &[f64], basis: &WordBasis) -> Vec<f64> {
    let mut out = vec![0.0; basis.len()];
    out[0] = 1.0;
    let d = basis.alphabet();
    for k in 1..=basis.max_len() {
        let (off, prev) = (basis.offset(k), basis.offset(k - 1));
        // x_{w∗j} = x_w · v_j / k
        for c in 0..d.pow(k as u32) {
            out[off + c] = out[prev + c / d] * v[c % d] / k as f64;
        }
    }
    out
}

/// Chen product `a ⊗ b` in the truncated tensor algebra.
pub fn chen_product(a: &[f64], b: &[f64], basis: &WordBasis) -> Vec<f64> {
    let mut out = vec![0.0; basis.len()];
    chen_product_into(a, b, basis, &mut out);
    out
}

fn chen_product_into(a: &[f64], b: &[f64], basis: &WordBasis, out: &mut [f64]) {
    let d = basis.alphabet();
    for len in 0..=basis.max_len() {
        let off = basis.offset(len);
        for c in 0..d.pow(len as u32) {
            let mut acc = 0.0;
            let mut tail = d.pow(len as u32);
            for p in 0..=len {
                // prefix of length p, suffix of length len − p
                let pre = c / tail;
                let suf = c % tail;
                acc += a[basis.offset(p) + pre] * b[basis.offset(len - p) + suf];
                if tail > 1 {
                    tail /= d;
                }
            }
            out[off + c] = acc;
        }
    }
}

/// Signature coordinates at every grid time.
#[derive(Clone, Debug)]
pub struct SignaturePath {
    basis: WordBasis,
    n: usize,
    // (n + 1) × basis.len()
    values: Vec<f64>,
}

/// Signature of the piecewise-linear path up to word length `m ≤ 4`.
pub fn compute_signature(path: &FbmPath, m: usize) -> Result<SignaturePath> {
    if m > MAX_WORD_LENGTH {
        return Err(Error::CostGuard(format!(
            "signature word length {m} exceeds {MAX_WORD_LENGTH}"
        )));
    }
    let d = path.dim();
    let basis = WordBasis::new(d, m, true);
    let len = basis.len();
    let n = path.grid_size();
    let mut values = Vec::with_capacity((n + 1) * len);
    let mut current = vec![0.0; len];
    current[0] = 1.0;
    values.extend_from_slice(&current);
    let mut inc = vec![0.0; d];
    let mut next = vec![0.0; len];
    for k in 0..n {
        path.increment_into(k, &mut inc);
        let seg = segment_signature(&inc, &basis);
        chen_product_into(&current, &seg, &basis, &mut next);
        std::mem::swap(&mut current, &mut next);
        values.extend_from_slice(&current);
    }
    Ok(SignaturePath { basis, n, values })
}

impl SignaturePath {
    pub fn basis(&self) -> &WordBasis {
        &self.basis
    }

    pub fn grid_size(&self) -> usize {
        self.n
    }

    /// All coordinates at grid time `k`.
    pub fn at(&self, k: usize) -> &[f64] {
        let len = self.basis.len();
        &self.values[k * len..(k + 1) * len]
    }

    /// `B^w_{t_k}`, or `None` when `w` is outside the basis.
    pub fn value(&self, k: usize, w: &Word) -> Option<f64> {
        self.basis.index_of(w).map(|i| self.at(k)[i])
    }

    /// Grid series of one coordinate.
    pub fn series(&self, w: &Word) -> Option<Vec<f64>> {
        let i = self.basis.index_of(w)?;
        Some((0..=self.n).map(|k| self.at(k)[i]).collect())
    }

    /// Signature over `[t_from, t_to]`, obtained as `S_from^{-1} ⊗ S_to`.
    pub fn interval(&self, from: usize, to: usize) -> Vec<f64> {
        chen_product(&inverse(self.at(from), &self.basis), self.at(to), &self.basis)
    }

    /// `sup_k |Σ_I a_I B^I_{t_k}|`.
    pub fn linear_combination_supnorm(&self, coeffs: &[(Word, f64)]) -> Result<f64> {
        let idx: Vec<(usize, f64)> = coeffs
            .iter()
            .map(|(w, a)| {
                self.basis
                    .index_of(w)
                    .map(|i| (i, *a))
                    .ok_or_else(|| Error::Domain(format!("word {w} is not in the signature basis")))
            })
            .collect::<Result<_>>()?;
        Ok((0..=self.n)
            .map(|k| {
                let s = self.at(k);
                idx.iter().map(|&(i, a)| a * s[i]).sum::<f64>().abs()
            })
            .fold(0.0, f64::max))
    }

    /// CSV keyed by serialized words: `t,(),(1),…`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = self.basis.words().iter().map(|w| format!("\"{w}\"")).collect();
        writeln!(out, "t,{}", header.join(","))?;
        for k in 0..=self.n {
            write!(out, "{}", k as f64 / self.n as f64)?;
            for v in self.at(k) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Inverse in the truncated tensor algebra (`x^{-1} = Σ_k (1 − x)^k`).
pub fn inverse(x: &[f64], basis: &WordBasis) -> Vec<f64> {
    // y = 1 − x has no constant term, so the series stops at max_len
    let mut y: Vec<f64> = x.iter().map(|v| -v).collect();
    y[0] = 0.0;
    let mut result = vec![0.0; basis.len()];
    result[0] = 1.0;
    let mut power = result.clone();
    for _ in 0..basis.max_len() {
        power = chen_product(&power, &y, basis);
        for (r, p) in result.iter_mut().zip(&power) {
            *r += p;
        }
    }
    result
}

/// Leading Taylor term of `β^J_I(t)`: `(−1)^{|L|} B^{rev L}_t` when
/// `J = I∗L`, otherwise 0. The reversal comes from iterating
/// `dβ_I = −Σ_j β_{I∗j} dB^j`: the innermost integral carries the last
/// letter of `L`.
pub fn taylor_leading_term(sig: &SignaturePath, k: usize, i: &Word, j: &Word) -> Result<f64> {
    let Some(rest) = j.strip_prefix(i) else {
        return Ok(0.0);
    };
    let mut rev = rest.letters().to_vec();
    rev.reverse();
    let word = Word::new(rev)?;
    let v = sig
        .value(k, &word)
        .ok_or_else(|| Error::Domain(format!("word {word} exceeds the signature length")))?;
    Ok(if rest.len() % 2 == 0 { v } else { -v })
}
