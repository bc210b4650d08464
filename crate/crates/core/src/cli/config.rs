//! Flat `key = value` run configuration.
//!
//! One experiment per file, `#` starts a comment, unknown or repeated keys are
//! errors. Number lists accept commas or whitespace and `base^exp` tokens
//! (`t_grid = 2^-6 2^-5 2^-4`). Word lists are whitespace separated
//! (`words = (1,2) (1)`), coefficient lists pair words with values
//! (`coeffs = (1):0.6 (2):0.8`).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::fbm::SamplingMethod;
use crate::words::Word;
use crate::{Error, Result};

/// Test function family for the smoothing and IBP commands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionKind {
    Sigmoid,
    Constant,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    /// Built-in system name or path to a `.vf` file.
    pub system: Option<String>,
    #[serde(rename = "H")]
    pub hurst: f64,
    #[serde(rename = "N")]
    pub grid_size: usize,
    /// Noise dimension for `fbm-sample` and `smallball`.
    pub d: usize,
    pub substeps: usize,
    pub seed: u64,
    pub n_paths: usize,
    pub method: SamplingMethod,
    pub epsilon: f64,
    pub x0: Option<Vec<f64>>,
    pub t_grid: Vec<f64>,
    pub eps_grid: Option<Vec<f64>>,
    pub words: Vec<Word>,
    pub coeffs: Vec<(Word, f64)>,
    /// Signature level for `smallball` and `chen`.
    pub m: usize,
    pub p: f64,
    pub h: Option<f64>,
    pub function: FunctionKind,
    pub lambda: f64,
    pub direction: Option<Vec<f64>>,
    /// Grid halvings in refinement tables.
    pub refine: usize,
    pub tol: Option<f64>,
    pub min_slope: Option<f64>,
    pub require_decrease: bool,
    /// Length of the β rows tested by `verify taylor`.
    pub word_len: usize,
    pub assert_slope_min: Option<f64>,
    pub assert_slope_max: Option<f64>,
    pub assert_ratio_max: Option<f64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            system: None,
            hurst: 0.7,
            grid_size: 1024,
            d: 1,
            substeps: 4,
            seed: 0,
            n_paths: 64,
            method: SamplingMethod::Circulant,
            epsilon: 1.0,
            x0: None,
            t_grid: (1..=6).rev().map(|k| 0.5f64.powi(k)).collect(),
            eps_grid: None,
            words: vec![Word::letter(1)],
            coeffs: vec![(Word::letter(1), 1.0)],
            m: 1,
            p: 2.0,
            h: None,
            function: FunctionKind::Sigmoid,
            lambda: 16.0,
            direction: None,
            refine: 3,
            tol: None,
            min_slope: None,
            require_decrease: false,
            word_len: 1,
            assert_slope_min: None,
            assert_slope_max: None,
            assert_ratio_max: None,
            out: PathBuf::from("out"),
        }
    }
}

fn cfg_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

/// Parses `2.5`, `1e-3` or `2^-4`.
pub fn parse_number(tok: &str) -> std::result::Result<f64, String> {
    let v = match tok.split_once('^') {
        Some((b, e)) => {
            let b: f64 = b.trim().parse().map_err(|_| format!("bad number {tok:?}"))?;
            let e: f64 = e.trim().parse().map_err(|_| format!("bad number {tok:?}"))?;
            b.powf(e)
        }
        None => tok.parse().map_err(|_| format!("bad number {tok:?}"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("non-finite number {tok:?}"))
    }
}

fn number_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(parse_number)
        .collect()
}

fn word_list(s: &str) -> std::result::Result<Vec<Word>, String> {
    s.split_whitespace().map(|t| t.parse::<Word>().map_err(|e| e.to_string())).collect()
}

fn coeff_list(s: &str) -> std::result::Result<Vec<(Word, f64)>, String> {
    s.split_whitespace()
        .map(|t| {
            let (w, a) = t.rsplit_once(':').ok_or_else(|| format!("expected word:value, got {t:?}"))?;
            let w = w.parse::<Word>().map_err(|e| e.to_string())?;
            Ok((w, parse_number(a)?))
        })
        .collect()
}

fn integer<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("expected a nonnegative integer, got {s:?}"))
}

fn boolean(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {s:?}")),
    }
}

impl RunConfig {
    /// Parses config text; relative system paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(line_no, format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(cfg_err(line_no, format!("key {key:?} given twice")));
            }
            cfg.set(key, value, base).map_err(|m| cfg_err(line_no, format!("{key}: {m}")))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    fn set(&mut self, key: &str, v: &str, base: Option<&Path>) -> std::result::Result<(), String> {
        match key {
            "system" => {
                // a file next to the config wins over a shipped system of the same name
                let joined = base.filter(|_| Path::new(v).is_relative()).map(|b| b.join(v));
                self.system = Some(match joined {
                    Some(j) if j.exists() || super::builtin_system(v).is_none() => j.to_string_lossy().into_owned(),
                    _ => v.to_string(),
                });
            }
            "H" => self.hurst = parse_number(v)?,
            "N" => self.grid_size = parse_number(v).and_then(as_count)?,
            "d" => self.d = integer(v)?,
            "substeps" => self.substeps = integer(v)?,
            "seed" => self.seed = integer(v)?,
            "n_paths" => self.n_paths = parse_number(v).and_then(as_count)?,
            "method" => self.method = v.parse().map_err(|e: Error| e.to_string())?,
            "epsilon" => self.epsilon = parse_number(v)?,
            "x0" => self.x0 = Some(number_list(v)?),
            "t_grid" => self.t_grid = number_list(v)?,
            "eps_grid" => self.eps_grid = Some(number_list(v)?),
            "words" => self.words = word_list(v)?,
            "coeffs" => self.coeffs = coeff_list(v)?,
            "m" => self.m = integer(v)?,
            "p" => self.p = parse_number(v)?,
            "h" => self.h = Some(parse_number(v)?),
            "function" => {
                self.function = match v {
                    "sigmoid" => FunctionKind::Sigmoid,
                    "constant" => FunctionKind::Constant,
                    "linear" => FunctionKind::Linear,
                    _ => return Err(format!("unknown function {v:?} (sigmoid, constant, linear)")),
                }
            }
            "lambda" => self.lambda = parse_number(v)?,
            "direction" => self.direction = Some(number_list(v)?),
            "refine" => self.refine = integer(v)?,
            "tol" => self.tol = Some(parse_number(v)?),
            "min_slope" => self.min_slope = Some(parse_number(v)?),
            "require_decrease" => self.require_decrease = boolean(v)?,
            "word_len" => self.word_len = integer(v)?,
            "assert_slope_min" => self.assert_slope_min = Some(parse_number(v)?),
            "assert_slope_max" => self.assert_slope_max = Some(parse_number(v)?),
            "assert_ratio_max" => self.assert_ratio_max = Some(parse_number(v)?),
            "out" => {
                let p = PathBuf::from(v);
                self.out = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p,
                };
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Range checks shared by every command.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.hurst > 0.25 && self.hurst < 1.0) {
            return bad(format!("H = {} outside (1/4, 1)", self.hurst));
        }
        if self.grid_size < 2 {
            return bad("N must be at least 2".into());
        }
        if self.d == 0 || self.substeps == 0 || self.n_paths == 0 {
            return bad("d, substeps and n_paths must be positive".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon = {} outside (0, 1]", self.epsilon));
        }
        if self.t_grid.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return bad("t_grid values must lie in (0, 1]".into());
        }
        if self.p < 0.0 {
            return bad("p must be nonnegative".into());
        }
        if matches!(self.h, Some(h) if !(h > 0.0)) {
            return bad("h must be positive".into());
        }
        Ok(())
    }

    pub fn has_assertions(&self) -> bool {
        self.assert_slope_min.is_some() || self.assert_slope_max.is_some() || self.assert_ratio_max.is_some()
    }
}

fn as_count(v: f64) -> std::result::Result<usize, String> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e15 {
        Ok(v as usize)
    } else {
        Err(format!("expected a count, got {v}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_list_forms() {
        let cfg = RunConfig::parse(
            "# comment\nH = 0.5\nN = 2^10\nt_grid = 2^-3, 0.5 1\nwords = (1,2) (1)\ncoeffs = (1):0.6 (2):0.8\nrequire_decrease = true\n",
            None,
        )
        .unwrap();
        assert_eq!(cfg.hurst, 0.5);
        assert_eq!(cfg.grid_size, 1024);
        assert_eq!(cfg.t_grid, vec![0.125, 0.5, 1.0]);
        assert_eq!(cfg.words.len(), 2);
        assert_eq!(cfg.words[0].to_string(), "(1,2)");
        assert_eq!(cfg.coeffs[1].1, 0.8);
        assert!(cfg.require_decrease);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::parse("bogus = 1", None), Err(Error::Config(_))));
        assert!(RunConfig::parse("H = 0.5\nH = 0.6", None).is_err());
        assert!(RunConfig::parse("N = 1.5", None).is_err());
        assert!(RunConfig::parse("H 0.5", None).is_err());
        let cfg = RunConfig::parse("H = 1.5", None).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let cfg = RunConfig::parse("system = my.vf\nout = res", Some(Path::new("/tmp/exp"))).unwrap();
        assert_eq!(cfg.system.as_deref(), Some("/tmp/exp/my.vf"));
        assert_eq!(cfg.out, PathBuf::from("/tmp/exp/res"));
        let cfg = RunConfig::parse("system = heisenberg", Some(Path::new("/tmp/exp"))).unwrap();
        assert_eq!(cfg.system.as_deref(), Some("heisenberg"));
    }
}
