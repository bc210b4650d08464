//! The `fbmlab` command line: config files, run manifests and CSV tables.
//!
//! Exit codes: 0 all checks passed, 1 a tolerance check failed, 2 the
//! configuration (or system file) is invalid, 3 a runtime failure.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{FunctionKind, RunConfig};

use crate::flow::System;
use crate::mc::with_threads;
use crate::vfields::VectorFieldSet;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

const BUILTIN_SYSTEMS: [(&str, &str); 4] = [
    ("heisenberg", include_str!("../../systems/heisenberg.vf")),
    ("commuting", include_str!("../../systems/commuting.vf")),
    ("trig_elliptic", include_str!("../../systems/trig_elliptic.vf")),
    ("constant", include_str!("../../systems/constant.vf")),
];

/// Text of a shipped system, looked up by name with or without `.vf`.
pub fn builtin_system(name: &str) -> Option<&'static str> {
    let stem = name.strip_suffix(".vf").unwrap_or(name);
    BUILTIN_SYSTEMS.iter().find(|(n, _)| *n == stem).map(|(_, t)| *t)
}

/// A system together with the SHA-256 of its source text.
pub struct LoadedSystem {
    pub system: System,
    pub sha256: String,
}

/// Loads a system from a file, falling back to the shipped systems by name.
pub fn load_system(spec: &str) -> Result<LoadedSystem> {
    let path = Path::new(spec);
    let (name, text) = if path.is_file() {
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("system").to_string();
        (name, std::fs::read_to_string(path)?)
    } else if let Some(t) = builtin_system(spec) {
        (spec.strip_suffix(".vf").unwrap_or(spec).to_string(), t.to_string())
    } else {
        return Err(Error::Config(format!("system {spec:?} is neither a file nor a shipped system")));
    };
    let set = VectorFieldSet::parse(&name, &text)?;
    Ok(LoadedSystem {
        system: System::from_set(set)?,
        sha256: hex(&Sha256::digest(text.as_bytes())),
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Parser)]
#[command(name = "fbmlab", version, about = "Numerical experiments for fBm-driven differential equations")]
pub struct Cli {
    /// Flat key = value experiment file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores). Outputs do not depend on it.
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    pub threads: usize,
    /// Overrides the config output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Turn the config's assert_* tolerances into an exit status.
    #[arg(long = "assert", global = true)]
    pub assert: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample fBm paths to CSV with a covariance check on an 8-point subgrid.
    FbmSample,
    /// Run an identity suite; exits 1 when a tolerance is missed.
    Verify {
        #[arg(value_enum)]
        which: VerifyKind,
    },
    /// Produce an estimation table.
    Estimate {
        #[arg(value_enum)]
        which: EstimateKind,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifyKind {
    BracketTransport,
    Ibp,
    Chen,
    Taylor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateKind {
    Smoothing,
    Smallball,
    Invmoment,
}

/// One named tolerance check.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// `"<="` or `">="`.
    pub relation: &'static str,
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            value,
            relation: "<=",
            limit,
            passed: value <= limit,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            value,
            relation: ">=",
            limit,
            passed: value >= limit,
        }
    }
}

/// What a command produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<String>,
    pub results: serde_json::Value,
    pub checks: Vec<Check>,
    pub system_sha256: Option<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    program: &'static str,
    version: &'static str,
    command: String,
    config: &'a RunConfig,
    system_sha256: Option<&'a str>,
    files: &'a [String],
    results: &'a serde_json::Value,
    checks: &'a [Check],
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Ufg(_)
        | Error::Domain(_)
        | Error::DegreeCap { .. }
        | Error::CostGuard(_) => 2,
        _ => 3,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn command_name(c: &Command) -> String {
    match c {
        Command::FbmSample => "fbm-sample".into(),
        Command::Verify { which } => format!("verify {}", which.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default()),
        Command::Estimate { which } => format!("estimate {}", which.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default()),
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    if cli.assert && matches!(cli.command, Command::Estimate { .. }) && !cfg.has_assertions() {
        return Err(Error::Config("--assert needs at least one assert_* key in the config".into()));
    }
    std::fs::create_dir_all(&cfg.out)?;
    let outcome = with_threads(cli.threads, || -> Result<Outcome> {
        match cli.command {
            Command::FbmSample => commands::fbm_sample(&mut cfg),
            Command::Verify { which } => commands::verify(&mut cfg, which),
            Command::Estimate { which } => commands::estimate(&mut cfg, which, cli.assert),
        }
    })?;

    write_report(&cfg.out, &outcome.checks)?;
    let mut files = outcome.files.clone();
    if !outcome.checks.is_empty() {
        files.push("report.csv".into());
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        program: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: command_name(&cli.command),
        config: &cfg,
        system_sha256: outcome.system_sha256.as_deref(),
        files: &files,
        results: &outcome.results,
        checks: &outcome.checks,
    };
    let mut f = std::fs::File::create(cfg.out.join(MANIFEST_NAME))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;

    let mut failed = false;
    for c in &outcome.checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {}: {:e} {} {:e}", c.name, c.value, c.relation, c.limit);
        if !c.passed {
            eprintln!("tolerance check failed: {}", c.name);
            failed = true;
        }
    }
    Ok(if failed { 1 } else { 0 })
}

fn write_report(out: &Path, checks: &[Check]) -> Result<()> {
    if checks.is_empty() {
        return Ok(());
    }
    let rows = checks.iter().map(|c| {
        vec![
            c.name.clone(),
            fmt_f64(c.value),
            c.relation.to_string(),
            fmt_f64(c.limit),
            c.passed.to_string(),
        ]
    });
    write_csv(&out.join("report.csv"), &["check", "value", "relation", "limit", "passed"], rows)
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Comma-separated, header row, LF line endings.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        writeln!(w, "{}", r.join(","))?;
    }
    w.flush()?;
    Ok(())
}
