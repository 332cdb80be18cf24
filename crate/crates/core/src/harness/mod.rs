//! Command-line front end: configured sweeps written as CSV, and the
//! acceptance suites.
//!
//! CSV columns, one row per `(lambda, ipart)` cell, lambdas in file order and
//! ipart low to high:
//!
//! ```text
//! problem,d,p,alpha,lambda,ipart,N0,...,Np,estimate,stderr,reference,rel_error,wall_seconds,seed,status
//! ```
//!
//! Reals are written with 17 significant digits. `reference` and
//! `rel_error` are empty when the problem has no closed form, `wall_seconds`
//! is empty when timing is disabled, and `status` is `ok` or `error: ...`.

pub mod acceptance;
pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{NestedEstimator, RunEcho};

pub use config::{Overrides, RunConfig};

pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn header(depth: usize) -> String {
    let mut cols: Vec<String> = ["problem", "d", "p", "alpha", "lambda", "ipart"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend((0..=depth).map(|i| format!("N{i}")));
    cols.extend(
        [
            "estimate",
            "stderr",
            "reference",
            "rel_error",
            "wall_seconds",
            "seed",
            "status",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    cols.join(",")
}

/// One finished cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub lambda: f64,
    pub ipart: u32,
    pub estimate: f64,
    pub stderr: f64,
    pub reference: Option<f64>,
    pub rel_error: Option<f64>,
    pub wall_seconds: f64,
    pub echo: RunEcho,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    config: &'a RunConfig,
    x0: &'a [f64],
    dimension: usize,
    shards: usize,
    version: &'static str,
    cells: &'a [CellResult],
}

/// Runs every cell of `config`, writing CSV to `out`. Rows are flushed as
/// they complete; on a numerical failure an error row is written before the
/// error is returned.
pub fn run_to_writer<W: Write>(config: &RunConfig, out: &mut W) -> Result<Vec<CellResult>> {
    let resolved = config.resolve()?;
    let problem = &resolved.problem;
    let depth = resolved.schedules[0].depth();
    writeln!(out, "{}", header(depth))?;
    out.flush()?;

    let reference = problem.reference_at(0.0, &resolved.x0);
    let mut cells = Vec::new();
    for law in &resolved.laws {
        for schedule in &resolved.schedules {
            let est = NestedEstimator::new(problem, schedule, *law).with_closure(config.run.closure);
            let mut row = vec![
                problem.name.clone(),
                problem.dim.to_string(),
                depth.to_string(),
                fmt_real(law.alpha()),
                fmt_real(law.lambda()),
                schedule.ipart().to_string(),
            ];
            row.extend(schedule.effective_counts().iter().map(|n| n.to_string()));
            match est.evaluate(&resolved.x0, config.run.seed, resolved.shards) {
                Ok(r) => {
                    let rel = reference.map(|v| (r.estimate - v).abs() / v.abs());
                    row.push(fmt_real(r.estimate));
                    row.push(fmt_real(r.stderr));
                    row.push(reference.map(fmt_real).unwrap_or_default());
                    row.push(rel.map(fmt_real).unwrap_or_default());
                    row.push(if config.run.no_timing {
                        String::new()
                    } else {
                        format!("{:.6}", r.wall_seconds)
                    });
                    row.push(config.run.seed.to_string());
                    row.push("ok".into());
                    writeln!(out, "{}", row.join(","))?;
                    out.flush()?;
                    cells.push(CellResult {
                        lambda: law.lambda(),
                        ipart: schedule.ipart(),
                        estimate: r.estimate,
                        stderr: r.stderr,
                        reference,
                        rel_error: rel,
                        wall_seconds: r.wall_seconds,
                        echo: r.echo,
                    });
                }
                Err(e) => {
                    row.extend(["", "", "", "", ""].iter().map(|s| s.to_string()));
                    row.push(config.run.seed.to_string());
                    // keep the CSV parseable
                    row.push(format!("error: {}", e.to_string().replace(',', ";")));
                    writeln!(out, "{}", row.join(","))?;
                    out.flush()?;
                    return Err(e);
                }
            }
        }
    }
    Ok(cells)
}

/// Path of the JSON sidecar written next to a CSV file.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Runs `config` and writes the CSV to its output path (stdout when unset)
/// plus a JSON sidecar echoing the resolved configuration.
pub fn run(config: &RunConfig) -> Result<Vec<CellResult>> {
    let resolved = config.resolve()?;
    match &config.run.output {
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            run_to_writer(config, &mut lock)
        }
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            let result = run_to_writer(config, &mut w);
            w.flush()?;
            let cells = result?;
            let side = Sidecar {
                config,
                x0: &resolved.x0,
                dimension: resolved.problem.dim,
                shards: resolved.shards,
                version: env!("CARGO_PKG_VERSION"),
                cells: &cells,
            };
            let json = serde_json::to_string_pretty(&side).map_err(|e| Error::Io(e.to_string()))?;
            std::fs::write(sidecar_path(path), json)?;
            Ok(cells)
        }
    }
}

/// Identifier and one-line description of every runnable problem kind.
pub fn problem_catalogue() -> Vec<(&'static str, &'static str)> {
    vec![
        (
            "cir",
            "degenerate CIR semi-linear problem on an OU base, closed-form reference",
        ),
        ("toy", "full non-linear toy problem with clamped u trace(D2u) term"),
        (
            "hjb",
            "exponential-utility portfolio with Heston assets, capped controls",
        ),
        (
            "diagnostic",
            "f = 0 with linear, quadratic or cos terminal over BM or OU",
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_config() -> RunConfig {
        RunConfig::from_toml_str(
            r#"
[problem]
kind = "diagnostic"
d = 2
[problem.diagnostic]
model = "ornstein-uhlenbeck"
terminal = "quadratic"
[schedule]
base_counts = [400, 2, 2]
ipart_max = 1
[law]
lambdas = [0.5, 1.0]
[run]
seed = 3
shards = 2
no_timing = true
"#,
        )
        .unwrap()
    }

    #[test]
    fn writes_header_and_rows_in_sweep_order() {
        let mut buf = Vec::new();
        let cells = run_to_writer(&diag_config(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "problem,d,p,alpha,lambda,ipart,N0,N1,N2,estimate,stderr,reference,rel_error,wall_seconds,seed,status"
        );
        assert_eq!(lines.len(), 5);
        let order: Vec<(f64, u32)> = cells.iter().map(|c| (c.lambda, c.ipart)).collect();
        assert_eq!(order, vec![(0.5, 0), (0.5, 1), (1.0, 0), (1.0, 1)]);
        let fields: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(fields.len(), 16);
        assert_eq!(&fields[6..9], &["800", "4", "4"]);
        assert_eq!(fields[13], "");
        assert_eq!(fields[15], "ok");
        // 17 significant digits round-trip exactly
        let est: f64 = fields[9].parse().unwrap();
        assert_eq!(est.to_bits(), cells[1].estimate.to_bits());
    }

    #[test]
    fn diagnostic_error_within_three_stderr() {
        let mut buf = Vec::new();
        for c in run_to_writer(&diag_config(), &mut buf).unwrap() {
            let r = c.reference.unwrap();
            assert!(c.rel_error.unwrap() <= 3.0 * c.stderr / r.abs(), "{c:?}");
        }
    }

    #[test]
    fn numerical_failure_leaves_error_row() {
        let mut c = RunConfig::from_toml_str(
            r#"
[problem]
kind = "cir"
d = 2
[schedule]
base_counts = [60, 3, 2]
ipart_max = 0
[law]
lambdas = [1.0]
"#,
        )
        .unwrap();
        // a huge coupling makes the driver overflow
        c.problem.cir.a = 1e308;
        let mut buf = Vec::new();
        let err = run_to_writer(&c, &mut buf).unwrap_err();
        assert!(err.is_numerical());
        let text = String::from_utf8(buf).unwrap();
        let last = text.lines().last().unwrap();
        assert!(last.contains(",error: non-finite"), "{last}");
    }

    #[test]
    fn file_output_has_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("diag.csv");
        let mut c = diag_config();
        c.run.output = Some(out.clone());
        c.schedule.ipart_max = 0;
        run(&c).unwrap();
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(&out)).unwrap()).unwrap();
        assert_eq!(meta["dimension"], 2);
        assert_eq!(meta["config"]["run"]["seed"], 3);
        assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 3);
    }
}
