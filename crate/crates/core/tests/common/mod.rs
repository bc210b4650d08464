//! Independent oracles and reporting shared by the integration tests.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::io::Write;

use fbmlab::cli::load_system;
use fbmlab::stats::fit_line;
use fbmlab::System;
use nalgebra::{DMatrix, SymmetricEigen};

/// Writes one status line straight to the process stderr so it survives
/// the harness's output capture.
pub fn report(name: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let line = format!("\n{status} {name}: {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

pub fn system(name: &str) -> System {
    load_system(name).unwrap().system
}

/// Gauss quadrature from the three-term recurrence (Golub–Welsch): nodes
/// are the eigenvalues of the Jacobi matrix with diagonal `a` and
/// off-diagonal `b`, weights `μ₀ v₀²`.
fn golub_welsch(a: &[f64], b: &[f64], mu0: f64) -> (Vec<f64>, Vec<f64>) {
    let n = a.len();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        jac[(k, k)] = a[k];
        if k + 1 < n {
            jac[(k, k + 1)] = b[k];
            jac[(k + 1, k)] = b[k];
        }
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mu0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `n`-point Gauss–Hermite rule for the weight `exp(−x²)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let b: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
    golub_welsch(&vec![0.0; n], &b, PI.sqrt())
}

/// `n`-point Gauss–Legendre rule on `[−1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let b: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&vec![0.0; n], &b, 2.0)
}

/// `E g(μ + σZ)` for standard normal `Z`, by composite 16-point
/// Gauss–Legendre on `z ∈ [−12, 12]` with panels of width 1/40. Unlike a
/// single Gauss–Hermite rule this resolves integrands much sharper than
/// the Gaussian (steep sigmoids at large σ).
pub fn normal_expectation(g: impl Fn(f64) -> f64, mu: f64, sigma: f64) -> f64 {
    let (x, w) = gauss_legendre(16);
    let (lo, panels) = (-12.0, 960);
    let width = 24.0 / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = lo + (p as f64 + 0.5) * width;
        for (x, w) in x.iter().zip(&w) {
            let z = mid + 0.5 * width * x;
            total += 0.5 * width * w * (-0.5 * z * z).exp() * g(mu + sigma * z);
        }
    }
    total / (2.0 * PI).sqrt()
}

/// `P(sup_{[0,1]} |W| < ε)` for standard Brownian motion, from the
/// eigenfunction series truncated after `terms` terms.
pub fn brownian_small_ball(eps: f64, terms: usize) -> f64 {
    let s: f64 = (0..terms)
        .map(|k| {
            let m = (2 * k + 1) as f64;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sign / m * (-(m * m) * PI * PI / (8.0 * eps * eps)).exp()
        })
        .sum();
    4.0 / PI * s
}

/// `−slope` of `ln value` against `ln N` over the positive finite values.
pub fn refinement_slope(grids: &[usize], values: &[f64]) -> Option<f64> {
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (&n, &v) in grids.iter().zip(values) {
        if v > 0.0 && v.is_finite() {
            x.push((n as f64).ln());
            y.push(v.ln());
        }
    }
    fit_line(&x, &y, &vec![1.0; x.len()]).map(|f| -f.slope)
}

pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

pub fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", parts.join(", "))
}
