use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use deletion_audit::games::{AuditReport, Definition};
use deletion_audit::registry::{run_matrix, AuditConfig, MatrixCell, ModeName, MATRIX_DEFINITIONS};
use serde_json::Value;

const PASS: u8 = 0;
const FAIL: u8 = 1;
const BAD_INPUT: u8 = 2;
const MISMATCH: u8 = 3;

#[derive(Parser)]
#[command(name = "deletion-audit", version, about = "Audit data-deletion guarantees of simulated controllers")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    Sampled,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the audit described by a TOML config.
    Audit {
        #[arg(long)]
        config: PathBuf,
        /// Report path; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        trials: Option<u64>,
    },
    /// Verdicts of the touchstone controllers against each definition.
    Matrix {
        /// Directory for matrix.csv and matrix.json; stdout JSON if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompute a report and compare it byte for byte.
    Replay {
        /// Report written by `audit`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure carrying its exit code.
struct Exit(u8, anyhow::Error);

fn bad(e: impl Into<anyhow::Error>) -> Exit {
    Exit(BAD_INPUT, e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(BAD_INPUT);
        }
    }
    let r = match cli.cmd {
        Cmd::Audit {
            config,
            out,
            seed,
            mode,
            trials,
        } => audit(&config, out.as_deref(), seed, mode, trials),
        Cmd::Matrix { out, seed } => matrix(out.as_deref(), seed),
        Cmd::Replay { config, out } => replay(&config, out.as_deref()),
    };
    match r {
        Ok(code) => ExitCode::from(code),
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn read_config(path: &Path) -> Result<AuditConfig, Exit> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(bad)?;
    toml::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(bad)
}

/// Pretty JSON with keys in sorted order.
fn canonical(v: &impl serde::Serialize) -> String {
    // serde_json's map is ordered, so a round trip through Value sorts keys.
    let v = serde_json::to_value(v).expect("serializable");
    let mut s = serde_json::to_string_pretty(&v).expect("serializable");
    s.push('\n');
    s
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Exit> {
    match out {
        Some(p) => std::fs::write(p, text)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(bad),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// One report per fixture, each carrying the single-fixture config that
/// reproduces it.
fn run_reports(cfg: &AuditConfig) -> Result<(String, bool), Exit> {
    cfg.validate().map_err(bad)?;
    let reports = cfg.run().map_err(bad)?;
    let passed = reports.iter().all(|r| r.passed);
    let docs: Vec<Value> = reports
        .iter()
        .map(|r| with_config(cfg, r))
        .collect::<Result<_, _>>()?;
    let text = if docs.len() == 1 {
        canonical(&docs[0])
    } else {
        canonical(&docs)
    };
    Ok((text, passed))
}

fn with_config(cfg: &AuditConfig, r: &AuditReport) -> Result<Value, Exit> {
    let mut single = cfg.clone();
    single.fixtures = vec![r.fixture.clone()];
    let mut v = serde_json::to_value(r).map_err(bad)?;
    v.as_object_mut()
        .expect("report is an object")
        .insert("config".into(), serde_json::to_value(&single).map_err(bad)?);
    Ok(v)
}

fn audit(
    path: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    mode: Option<Mode>,
    trials: Option<u64>,
) -> Result<u8, Exit> {
    let mut cfg = read_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.mode = match m {
            Mode::Exact => ModeName::Exact,
            Mode::Sampled => ModeName::Sampled,
        };
    }
    if let Some(t) = trials {
        cfg.trials = t;
    }
    let (text, passed) = run_reports(&cfg)?;
    emit(out, &text)?;
    Ok(if passed { PASS } else { FAIL })
}

fn replay(path: &Path, out: Option<&Path>) -> Result<u8, Exit> {
    let original = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(bad)?;
    let doc: Value = serde_json::from_str(&original).map_err(bad)?;
    let docs = match &doc {
        Value::Array(a) => a.clone(),
        v => vec![v.clone()],
    };
    let mut recomputed = Vec::with_capacity(docs.len());
    let mut passed = true;
    for d in &docs {
        let cfg: AuditConfig = d
            .get("config")
            .cloned()
            .ok_or_else(|| bad(anyhow!("report has no config")))
            .and_then(|c| serde_json::from_value(c).map_err(bad))?;
        let reports = cfg.run().map_err(bad)?;
        let [r] = reports.as_slice() else {
            return Err(bad(anyhow!("report config names {} fixtures", reports.len())));
        };
        passed &= r.passed;
        recomputed.push(with_config(&cfg, r)?);
    }
    let text = match doc {
        Value::Array(_) => canonical(&recomputed),
        _ => canonical(&recomputed[0]),
    };
    emit(out, &text)?;
    if text != original {
        return Err(Exit(MISMATCH, anyhow!("recomputed report differs from {}", path.display())));
    }
    Ok(if passed { PASS } else { FAIL })
}

fn matrix_csv(cells: &[MatrixCell]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["controller"];
    header.extend(MATRIX_DEFINITIONS.iter().map(Definition::as_str));
    w.write_record(&header)?;
    let mut names: Vec<&str> = Vec::new();
    for c in cells {
        if !names.contains(&c.controller.as_str()) {
            names.push(&c.controller);
        }
    }
    for name in names {
        let mut row = vec![name];
        for d in MATRIX_DEFINITIONS {
            let v = cells
                .iter()
                .find(|c| c.controller == name && c.definition == d)
                .map_or("", |c| c.verdict.as_str());
            row.push(v);
        }
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn matrix(out: Option<&Path>, seed: u64) -> Result<u8, Exit> {
    let cells = run_matrix(seed).map_err(bad)?;
    let json = canonical(&serde_json::json!({ "seed": seed, "cells": cells }));
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(bad)?;
            emit(Some(&dir.join("matrix.json")), &json)?;
            emit(Some(&dir.join("matrix.csv")), &matrix_csv(&cells).map_err(bad)?)?;
        }
        None => emit(None, &json)?,
    }
    Ok(PASS)
}
