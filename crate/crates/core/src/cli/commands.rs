use serde_json::json;

use super::config::{FunctionKind, RunConfig};
use super::{fmt_f64, load_system, write_csv, Check, EstimateKind, LoadedSystem, Outcome, VerifyKind};
use crate::fbm::{covariance, FbmPath, FbmSampler, SamplingMethod};
use crate::flow::{integrate, taylor_remainder_study, transport_residual, System};
use crate::matrices::{inverse_moment_estimate, small_ball_estimate};
use crate::mc::{par_map, SimSettings};
use crate::signature::{chen_product, compute_signature};
use crate::smoothing::{fit_exponent, ibp_identity_check, Constant, Linear, Sigmoid, TestFunction};
use crate::stats::{fit_line, median, Summary};
use crate::words::Word;
use crate::{Error, Result};

fn sim(cfg: &RunConfig, grid_size: usize) -> SimSettings {
    SimSettings {
        hurst: cfg.hurst,
        grid_size,
        substeps: cfg.substeps,
        n_paths: cfg.n_paths,
        seed: cfg.seed,
    }
}

fn require_system(cfg: &RunConfig) -> Result<LoadedSystem> {
    let spec = cfg
        .system
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs `system = <file or shipped name>`".into()))?;
    load_system(spec)
}

/// Fills `x0` (origin) and checks its length.
fn resolve_x0(cfg: &mut RunConfig, sys: &System) -> Result<Vec<f64>> {
    let x0 = cfg.x0.get_or_insert_with(|| vec![0.0; sys.state_dim()]).clone();
    if x0.len() != sys.state_dim() {
        return Err(Error::Config(format!("x0 has {} entries, the system has n = {}", x0.len(), sys.state_dim())));
    }
    Ok(x0)
}

/// Sigmoid centered at `x0` along `direction` (default: last axis).
fn test_function(cfg: &mut RunConfig, x0: &[f64]) -> Result<Box<dyn TestFunction>> {
    let n = x0.len();
    let dir = cfg
        .direction
        .get_or_insert_with(|| {
            let mut e = vec![0.0; n];
            e[n - 1] = 1.0;
            e
        })
        .clone();
    if dir.len() != n {
        return Err(Error::Config(format!("direction has {} entries, expected {n}", dir.len())));
    }
    Ok(match cfg.function {
        FunctionKind::Sigmoid => Box::new(Sigmoid::new(cfg.lambda, x0.to_vec(), dir)?),
        FunctionKind::Constant => Box::new(Constant { dim: n, value: 1.0 }),
        FunctionKind::Linear => Box::new(Linear { coeffs: dir, offset: 0.0 }),
    })
}

/// Grids `N / 2^refine, …, N / 2, N`.
fn refinement_grids(cfg: &RunConfig) -> Result<Vec<usize>> {
    let grids: Vec<usize> = (0..=cfg.refine).rev().map(|r| cfg.grid_size >> r).collect();
    if grids[0] < 2 || grids[0] << cfg.refine != cfg.grid_size {
        return Err(Error::Config(format!(
            "N = {} cannot be halved {} times",
            cfg.grid_size, cfg.refine
        )));
    }
    Ok(grids)
}

/// `−slope` of `ln value` against `ln N` (positive when values shrink).
fn refinement_slope(grids: &[usize], values: &[f64]) -> Option<f64> {
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (&n, &v) in grids.iter().zip(values) {
        if v > 0.0 && v.is_finite() {
            x.push((n as f64).ln());
            y.push(v.ln());
        }
    }
    fit_line(&x, &y, &vec![1.0; x.len()]).map(|f| -f.slope)
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

pub(super) fn fbm_sample(cfg: &mut RunConfig) -> Result<Outcome> {
    let sampler = FbmSampler::new(cfg.hurst, cfg.grid_size, cfg.d, cfg.method)?;
    let paths: Vec<FbmPath> = par_map(cfg.n_paths, |i| sampler.sample(cfg.seed, i as u64));
    let mut files = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let name = format!("path_{i:05}.csv");
        let f = std::fs::File::create(cfg.out.join(&name))?;
        p.write_csv(std::io::BufWriter::new(f))?;
        files.push(name);
    }

    // empirical E[B_s B_t] on an 8-point subgrid, pooled over components
    let n = cfg.grid_size;
    let sub: Vec<usize> = (1..=8).map(|j| (j * n) / 8).filter(|&k| k > 0).collect();
    let mut rows = Vec::new();
    let mut worst_z = 0.0f64;
    for (a, &ks) in sub.iter().enumerate() {
        for &kt in &sub[a..] {
            let (s, t) = (ks as f64 / n as f64, kt as f64 / n as f64);
            let mut acc = Summary::default();
            for p in &paths {
                for j in 0..cfg.d {
                    acc.push(p.value(ks, j) * p.value(kt, j));
                }
            }
            let exact = covariance(s, t, cfg.hurst)?;
            let se = acc.stderr();
            let z = (acc.mean - exact) / se;
            if z.is_finite() {
                worst_z = worst_z.max(z.abs());
            }
            rows.push(vec![fmt_f64(s), fmt_f64(t), fmt_f64(acc.mean), fmt_f64(exact), fmt_f64(se), fmt_f64(z)]);
        }
    }
    write_csv(
        &cfg.out.join("covariance.csv"),
        &["s", "t", "empirical", "exact", "stderr", "z"],
        rows,
    )?;
    files.push("covariance.csv".into());
    let method = sampler.method();
    Ok(Outcome {
        files,
        results: json!({ "sampling_method": method, "max_abs_z": worst_z }),
        ..Default::default()
    })
}

pub(super) fn verify(cfg: &mut RunConfig, which: VerifyKind) -> Result<Outcome> {
    match which {
        VerifyKind::BracketTransport => verify_transport(cfg),
        VerifyKind::Ibp => verify_ibp(cfg),
        VerifyKind::Chen => verify_chen(cfg),
        VerifyKind::Taylor => verify_taylor(cfg),
    }
}

fn verify_transport(cfg: &mut RunConfig) -> Result<Outcome> {
    let loaded = require_system(cfg)?;
    let sys = &loaded.system;
    let x0 = resolve_x0(cfg, sys)?;
    let tol = *cfg.tol.get_or_insert(1e-2);
    let grids = refinement_grids(cfg)?;
    let mut rows = Vec::new();
    let mut maxima = Vec::new();
    for &n in &grids {
        let sampler = FbmSampler::new(cfg.hurst, n, sys.noise_dim(), SamplingMethod::Circulant)?;
        let per_path: Vec<Result<Option<(f64, f64)>>> = par_map(cfg.n_paths, |i| {
            let path = sampler.sample(cfg.seed, i as u64);
            match integrate(sys, &path, &x0, cfg.epsilon, cfg.substeps) {
                Ok(b) => Ok(Some((transport_residual(&b, sys), b.inverse_defect()))),
                Err(Error::Blowup { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        });
        let mut res = Vec::new();
        let mut defect = 0.0f64;
        let mut excluded = 0;
        for r in per_path {
            match r? {
                Some((a, b)) => {
                    res.push(a);
                    defect = defect.max(b);
                }
                None => excluded += 1,
            }
        }
        let max = res.iter().copied().fold(0.0, f64::max);
        let med = if res.is_empty() { f64::NAN } else { median(&res) };
        maxima.push(max);
        rows.push(vec![
            n.to_string(),
            fmt_f64(max),
            fmt_f64(med),
            fmt_f64(defect),
            excluded.to_string(),
        ]);
    }
    write_csv(
        &cfg.out.join("refinement.csv"),
        &["N", "max_residual", "median_residual", "max_inverse_defect", "n_excluded"],
        rows,
    )?;
    let slope = refinement_slope(&grids, &maxima);
    let mut checks = vec![Check::at_most("transport_residual", *maxima.last().unwrap_or(&f64::NAN), tol)];
    if let Some(m) = cfg.min_slope {
        checks.push(Check::at_least("refinement_slope", slope.unwrap_or(f64::NAN), m));
    }
    if cfg.require_decrease {
        let ok = strictly_decreasing(&maxima);
        checks.push(Check::at_least("strictly_decreasing", ok as u8 as f64, 1.0));
    }
    Ok(Outcome {
        files: vec!["refinement.csv".into()],
        results: json!({ "grids": grids, "max_residuals": maxima, "refinement_slope": slope }),
        checks,
        system_sha256: Some(loaded.sha256),
    })
}

fn verify_ibp(cfg: &mut RunConfig) -> Result<Outcome> {
    let loaded = require_system(cfg)?;
    let sys = &loaded.system;
    let x0 = resolve_x0(cfg, sys)?;
    let f = test_function(cfg, &x0)?;
    let tol = *cfg.tol.get_or_insert(5e-2);
    let grids = refinement_grids(cfg)?;
    let mut rows = Vec::new();
    let (mut direct, mut transport) = (Vec::new(), Vec::new());
    for &n in &grids {
        let rep = ibp_identity_check(f.as_ref(), sys, &x0, cfg.epsilon, sim(cfg, n))?;
        direct.push(rep.median_direct);
        transport.push(rep.median_transport);
        rows.push(vec![
            n.to_string(),
            fmt_f64(rep.median_direct),
            fmt_f64(rep.median_transport),
            fmt_f64(rep.max_direct()),
            rep.n_used.to_string(),
            rep.n_excluded.to_string(),
            rep.n_below_floor.to_string(),
        ]);
    }
    write_csv(
        &cfg.out.join("refinement.csv"),
        &[
            "N",
            "median_direct",
            "median_transport",
            "max_direct",
            "n_used",
            "n_excluded",
            "n_below_floor",
        ],
        rows,
    )?;
    let last = |v: &[f64]| *v.last().unwrap_or(&f64::NAN);
    let mut checks = vec![
        Check::at_most("ibp_median_direct", last(&direct), tol),
        Check::at_most("ibp_median_transport", last(&transport), tol),
    ];
    let slope = refinement_slope(&grids, &direct);
    if let Some(m) = cfg.min_slope {
        checks.push(Check::at_least("refinement_slope", slope.unwrap_or(f64::NAN), m));
    }
    if cfg.require_decrease {
        let ok = strictly_decreasing(&direct);
        checks.push(Check::at_least("strictly_decreasing", ok as u8 as f64, 1.0));
    }
    Ok(Outcome {
        files: vec!["refinement.csv".into()],
        results: json!({
            "grids": grids,
            "median_direct": direct,
            "median_transport": transport,
            "refinement_slope": slope,
        }),
        checks,
        system_sha256: Some(loaded.sha256),
    })
}

fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Chen's identity against a directly computed signature of the second
/// piece, and the shuffle identity `B^i B^j = B^{(i,j)} + B^{(j,i)}`.
fn verify_chen(cfg: &mut RunConfig) -> Result<Outcome> {
    let tol = *cfg.tol.get_or_insert(1e-10);
    let (n, d, m) = (cfg.grid_size, cfg.d, cfg.m);
    let sampler = FbmSampler::new(cfg.hurst, n, d, cfg.method)?;
    let per_path: Vec<Result<(f64, f64)>> = par_map(cfg.n_paths, |i| {
        let path = sampler.sample(cfg.seed, i as u64);
        let sig = compute_signature(&path, m)?;
        let basis = sig.basis();
        let full = sig.at(n);
        let mut chen = 0.0f64;
        for split in [n / 4, n / 2, 3 * n / 4].into_iter().filter(|&s| s > 0 && s < n) {
            let origin = path.point(split).to_vec();
            let tail: Vec<f64> = (split..=n)
                .flat_map(|k| path.point(k).iter().zip(&origin).map(|(a, b)| a - b).collect::<Vec<_>>())
                .collect();
            let tail = FbmPath::from_values(cfg.hurst, d, tail)?;
            let tail_sig = compute_signature(&tail, m)?;
            let joined = chen_product(sig.at(split), tail_sig.at(n - split), basis);
            chen = chen.max(relative_gap(full, &joined));
        }
        let mut shuffle = 0.0f64;
        if m >= 2 {
            for a in 1..=d as u8 {
                for b in 1..=d as u8 {
                    let (wa, wb) = (Word::letter(a), Word::letter(b));
                    let ab = wa.concat(&wb);
                    let ba = wb.concat(&wa);
                    for k in [n / 2, n] {
                        let v = |w: &Word| sig.value(k, w).unwrap_or(f64::NAN);
                        let lhs = v(&wa) * v(&wb);
                        let rhs = v(&ab) + v(&ba);
                        shuffle = shuffle.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));
                    }
                }
            }
        }
        Ok((chen, shuffle))
    });
    let (mut chen, mut shuffle) = (0.0f64, 0.0f64);
    let mut rows = Vec::new();
    for (i, r) in per_path.into_iter().enumerate() {
        let (c, s) = r?;
        chen = chen.max(c);
        shuffle = shuffle.max(s);
        rows.push(vec![i.to_string(), fmt_f64(c), fmt_f64(s)]);
    }
    write_csv(&cfg.out.join("residuals.csv"), &["path", "chen", "shuffle"], rows)?;
    Ok(Outcome {
        files: vec!["residuals.csv".into()],
        results: json!({ "max_chen": chen, "max_shuffle": shuffle }),
        checks: vec![Check::at_most("chen", chen, tol), Check::at_most("shuffle", shuffle, tol)],
        system_sha256: None,
    })
}

/// Taylor remainder of the β rows of length `word_len`; the slope bound
/// defaults to `(l + 1 − word_len) H − 0.25`.
fn verify_taylor(cfg: &mut RunConfig) -> Result<Outcome> {
    let loaded = require_system(cfg)?;
    let sys = &loaded.system;
    let x0 = resolve_x0(cfg, sys)?;
    let study = taylor_remainder_study(sys, &x0, cfg.epsilon, cfg.word_len, &cfg.t_grid, sim(cfg, cfg.grid_size))
        .map_err(|e| match e {
            Error::Domain(m) => Error::Config(m),
            e => e,
        })?;
    let rows = study.rows.iter().map(|r| {
        vec![
            fmt_f64(r.t),
            fmt_f64(r.mean_abs_remainder),
            fmt_f64(r.stderr),
            fmt_f64(r.mean_abs_moved),
            study.n_excluded.to_string(),
        ]
    });
    write_csv(
        &cfg.out.join("taylor.csv"),
        &["t", "mean_abs_remainder", "stderr", "mean_abs_beta_minus_identity", "n_excluded"],
        rows,
    )?;
    let min_slope = *cfg.min_slope.get_or_insert(study.reference_slope - 0.25);
    if study.remainder_fit.is_none() {
        log::warn!("remainder at round-off level; no slope can be fitted");
    }
    let slope = study.remainder_fit.map_or(f64::NAN, |f| f.slope);
    Ok(Outcome {
        files: vec!["taylor.csv".into()],
        results: json!({
            "remainder_slope": study.remainder_fit.map(|f| f.slope),
            "remainder_slope_stderr": study.remainder_fit.map(|f| f.slope_stderr),
            "degenerate": study.remainder_fit.is_none(),
            "leading_term_slope": study.moved_fit.map(|f| f.slope),
            "n_excluded": study.n_excluded,
        }),
        checks: vec![Check::at_least("taylor_remainder_slope", slope, min_slope)],
        system_sha256: Some(loaded.sha256),
    })
}

pub(super) fn estimate(cfg: &mut RunConfig, which: EstimateKind, assert: bool) -> Result<Outcome> {
    let mut out = match which {
        EstimateKind::Smoothing => estimate_smoothing(cfg)?,
        EstimateKind::Smallball => estimate_smallball(cfg)?,
        EstimateKind::Invmoment => estimate_invmoment(cfg)?,
    };
    if !assert {
        out.checks.clear();
    }
    Ok(out)
}

fn slope_checks(cfg: &RunConfig, slope: Option<f64>) -> Vec<Check> {
    let s = slope.unwrap_or(f64::NAN);
    let mut checks = Vec::new();
    if let Some(m) = cfg.assert_slope_min {
        checks.push(Check::at_least("slope_min", s, m));
    }
    if let Some(m) = cfg.assert_slope_max {
        checks.push(Check::at_most("slope_max", s, m));
    }
    checks
}

fn estimate_smoothing(cfg: &mut RunConfig) -> Result<Outcome> {
    let loaded = require_system(cfg)?;
    let sys = &loaded.system;
    let x0 = resolve_x0(cfg, sys)?;
    let f = test_function(cfg, &x0)?;
    let fit = fit_exponent(f.as_ref(), sys, &x0, &cfg.words, &cfg.t_grid, cfg.h, sim(cfg, cfg.grid_size))?;
    let rows = fit.rows.iter().zip(&fit.usable).map(|(r, u)| {
        vec![
            fmt_f64(r.t),
            fmt_f64(r.estimate),
            fmt_f64(r.stderr),
            r.n_excluded.to_string(),
            r.n_used.to_string(),
            fmt_f64(r.pt_f2_root),
            fmt_f64(r.step),
            u.to_string(),
        ]
    });
    write_csv(
        &cfg.out.join("smoothing.csv"),
        &["t", "estimate", "stderr", "n_excluded", "n_used", "pt_f2_root", "h", "usable"],
        rows,
    )?;
    let mut checks = slope_checks(cfg, fit.slope());
    if let (Some(m), Some(c)) = (cfg.assert_ratio_max, bounded_band(&fit)) {
        checks.push(Check::at_most("scaled_band_ratio", c, m));
    }
    Ok(Outcome {
        files: vec!["smoothing.csv".into()],
        results: json!({
            "slope": fit.fit.map(|f| f.slope),
            "slope_stderr": fit.fit.map(|f| f.slope_stderr),
            "intercept": fit.fit.map(|f| f.intercept),
            "reference_slope": fit.reference_slope,
            "bounded_constant": fit.bounded_constant,
            "scaled_band_ratio": bounded_band(&fit),
        }),
        checks,
        system_sha256: Some(loaded.sha256),
    })
}

/// max/min of `t^{H Σ|I|} |estimate|` over the grid.
fn bounded_band(fit: &crate::smoothing::ExponentFit) -> Option<f64> {
    let p = -fit.reference_slope;
    let v: Vec<f64> = fit.rows.iter().map(|r| r.t.powf(p) * r.estimate.abs()).collect();
    let (lo, hi) = v.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    (lo > 0.0).then_some(hi / lo)
}

fn estimate_smallball(cfg: &mut RunConfig) -> Result<Outcome> {
    let grid = cfg
        .eps_grid
        .get_or_insert_with(|| vec![0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4])
        .clone();
    let rep = small_ball_estimate(cfg.d, cfg.m, &cfg.coeffs, &grid, sim(cfg, cfg.grid_size))?;
    let rows = rep.rows.iter().map(|r| {
        vec![
            fmt_f64(r.epsilon),
            r.hits.to_string(),
            r.n_paths.to_string(),
            fmt_f64(r.probability),
            fmt_f64(r.wilson_low),
            fmt_f64(r.wilson_high),
        ]
    });
    write_csv(
        &cfg.out.join("smallball.csv"),
        &["epsilon", "hits", "n_paths", "probability", "wilson_low", "wilson_high"],
        rows,
    )?;
    Ok(Outcome {
        files: vec!["smallball.csv".into()],
        results: json!({
            "slope": rep.fit.map(|f| f.slope),
            "slope_stderr": rep.fit.map(|f| f.slope_stderr),
            "degenerate": rep.fit.is_none(),
        }),
        checks: slope_checks(cfg, rep.fit.map(|f| f.slope)),
        system_sha256: None,
    })
}

fn estimate_invmoment(cfg: &mut RunConfig) -> Result<Outcome> {
    let loaded = require_system(cfg)?;
    let sys = &loaded.system;
    let x0 = resolve_x0(cfg, sys)?;
    let grid = cfg
        .eps_grid
        .get_or_insert_with(|| (0..=4).rev().map(|k| 0.5f64.powi(k)).collect())
        .clone();
    let rows = inverse_moment_estimate(sys, &x0, &grid, cfg.p, sim(cfg, cfg.grid_size))?;
    let est: Vec<f64> = rows.iter().map(|r| r.estimate).collect();
    let ratio = est.iter().copied().fold(0.0, f64::max) / est.iter().copied().fold(f64::INFINITY, f64::min);
    let q: Vec<f64> = rows.iter().map(|r| r.q95_inverse).collect();
    let q_ratio = q.iter().copied().fold(0.0, f64::max) / q.iter().copied().fold(f64::INFINITY, f64::min);
    let below: usize = rows.iter().map(|r| r.n_below_floor).sum();
    let table = rows.iter().map(|r| {
        vec![
            fmt_f64(r.epsilon),
            fmt_f64(r.estimate),
            fmt_f64(r.stderr),
            r.n_excluded.to_string(),
            r.n_used.to_string(),
            r.n_below_floor.to_string(),
            fmt_f64(r.q95_inverse),
        ]
    });
    write_csv(
        &cfg.out.join("invmoment.csv"),
        &["epsilon", "estimate", "stderr", "n_excluded", "n_used", "n_below_floor", "q95_inverse"],
        table,
    )?;
    let mut checks = Vec::new();
    if let Some(m) = cfg.assert_ratio_max {
        checks.push(Check::at_most("estimate_ratio", ratio, m));
        checks.push(Check::at_most("paths_below_floor", below as f64, 0.0));
    }
    Ok(Outcome {
        files: vec!["invmoment.csv".into()],
        results: json!({
            "estimate_ratio": ratio,
            "q95_ratio": q_ratio,
            "n_below_floor": below,
        }),
        checks,
        system_sha256: Some(loaded.sha256),
    })
}
