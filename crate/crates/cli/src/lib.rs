//! Scenario execution and report emission for the `ksd` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context};
use ksd_core::collision::{verify_collision_identities, verify_nonlinear_integral_lemmas};
use ksd_core::envelope::verify_uniform_envelopes;
use ksd_core::geometry::verify_geometry_estimates;
use ksd_core::kernel::verify_property_a;
use ksd_core::norms::verify_norms;
use ksd_core::solver::{
    contraction_report, smallness_report, solve_linear, solve_nonlinear, ContractionEntry,
};
use ksd_core::transport::TransportContext;
use ksd_core::{Check, IterationHistory, Report};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{Resolved, RunConfig, Scenario};

/// Sample counts of the sampled suites.
pub const GEOMETRY_SAMPLES: usize = 10_000;
pub const KERNEL_SAMPLES: usize = 100_000;
pub const COLLISION_SAMPLES: usize = 100_000;
pub const SPHERE_PAIRS: usize = 1_000;
pub const SPHERE_ORDER: usize = 48;
pub const NORM_RESOLUTION: usize = 32;

/// Slack for the "contraction by one half" claims; the strict 1/2 is
/// reported alongside.
pub const HALF_SLACK: f64 = 0.6;
/// Allowed max/min spread of the outer iterate norms.
pub const NORM_SPREAD: f64 = 3.0;
/// Residual allowance in units of the error estimate.
pub const RESIDUAL_FACTOR: f64 = 10.0;
/// Absolute floor of the residual allowance (rounding).
pub const RESIDUAL_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub version: String,
    pub config_hash: String,
    pub scenario: Scenario,
    pub pass: bool,
    pub suites: Vec<Report>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn failures(&self) -> Vec<(&str, &Check)> {
        self.suites
            .iter()
            .flat_map(|s| s.failures().into_iter().map(move |c| (s.suite.as_str(), c)))
            .collect()
    }
}

/// A CSV file produced by a scenario.
#[derive(Debug, Clone)]
pub struct Table {
    pub file: String,
    pub body: Vec<u8>,
}

pub struct Outcome {
    pub report: RunReport,
    pub tables: Vec<Table>,
}

pub fn config_hash(config: &RunConfig) -> String {
    let canonical = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// Writes `index, term_norm_sup, term_norm_full, diff_norm, ratio` rows.
pub fn emit_convergence_csv(history: &IterationHistory, path: &Path) -> anyhow::Result<()> {
    let body = convergence_csv(history)?;
    fs::write(path, body).with_context(|| format!("cannot write {}", path.display()))
}

pub fn convergence_csv(history: &IterationHistory) -> anyhow::Result<Vec<u8>> {
    let rows = history.convergence_rows();
    if rows.is_empty() {
        bail!("empty iteration history");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

fn contraction_csv(entries: &[ContractionEntry]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in entries {
        w.serialize(e)?;
    }
    Ok(w.into_inner()?)
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    res: &'a Resolved,
    verbose: bool,
    suites: Vec<Report>,
    tables: Vec<Table>,
    warnings: Vec<String>,
}

impl Runner<'_> {
    fn step<F>(&mut self, name: &str, f: F)
    where
        F: FnOnce(&mut Self) -> anyhow::Result<()>,
    {
        let start = Instant::now();
        if let Err(e) = f(self) {
            let mut r = Report::new(name);
            r.push(Check::flag(
                "scenario_error",
                &e.to_string(),
                0.0,
                0.0,
                false,
            ));
            self.suites.push(r);
        }
        if self.verbose {
            eprintln!("{name}: {:.1} s", start.elapsed().as_secs_f64());
        }
    }

    fn geometry(&mut self) {
        self.step("geometry", |r| {
            r.suites.push(verify_geometry_estimates(
                &r.res.domain,
                GEOMETRY_SAMPLES,
                r.cfg.seed,
            )?);
            Ok(())
        });
    }

    fn kernel(&mut self) {
        self.step("kernel", |r| {
            r.suites.push(verify_property_a(
                &r.res.params,
                KERNEL_SAMPLES,
                r.cfg.seed,
            )?);
            r.suites.push(verify_uniform_envelopes(
                &r.res.domain,
                &r.res.params,
                r.cfg.seed,
            )?);
            Ok(())
        });
    }

    fn collision(&mut self) {
        self.step("collision", |r| {
            r.suites.push(verify_collision_identities(
                COLLISION_SAMPLES,
                SPHERE_PAIRS,
                SPHERE_ORDER,
                r.cfg.seed,
            )?);
            r.suites.push(verify_nonlinear_integral_lemmas(
                &r.res.params,
                r.res.boundary.beta,
                COLLISION_SAMPLES,
                r.cfg.seed,
            )?);
            Ok(())
        });
    }

    fn norms(&mut self) {
        self.step("norms", |r| {
            r.suites
                .push(verify_norms(&r.res.domain, &r.res.norm, NORM_RESOLUTION)?);
            Ok(())
        });
    }

    fn contraction(&mut self) {
        self.step("contraction", |r| {
            let (report, entries) = contraction_report(
                &r.res.contraction_domains,
                &r.res.params,
                r.res.grid,
                &r.res.boundary,
                r.res.norm.alpha,
            )?;
            r.suites.push(report);
            r.tables.push(Table {
                file: "contraction.csv".into(),
                body: contraction_csv(&entries)?,
            });
            Ok(())
        });
    }

    fn context(&self) -> anyhow::Result<Arc<TransportContext>> {
        Ok(TransportContext::new(
            &self.res.domain,
            self.res.params,
            self.res.grid,
        )?)
    }

    fn linear(&mut self) {
        self.step("solve_linear", |r| {
            let ctx = r.context()?;
            let small = smallness_report(&ctx, &r.res.boundary, &r.res.norm)?;
            let sol = solve_linear(&ctx, &r.res.boundary, None, &r.res.solver)?;
            let h = &sol.history;
            let mut report = Report::new("solve_linear");
            push_smallness(&mut report, &small, r.res.solver.smallness_threshold);
            report.push(Check::flag(
                "series_converged",
                "sum_i (S K)^i (J g + S phi) truncated below series_tol",
                h.terms.last().map_or(0.0, |t| t.full),
                r.res.solver.series_tol,
                h.converged,
            ));
            let worst_even = h.even_step_ratios().into_iter().fold(0.0, f64::max);
            report.push(Check::bound(
                "even_step_ratio",
                "|(S K)^2 T| <= 1/2 |T|",
                worst_even,
                HALF_SLACK,
                0.0,
            ));
            report.push(Check::diagnostic(
                "even_step_ratio_strict",
                "|(S K)^2 T| <= 1/2 |T|",
                worst_even,
                0.5,
            ));
            push_residual(&mut report, h);
            r.warnings.extend(h.warnings.iter().cloned());
            r.suites.push(report);
            r.tables.push(Table {
                file: "solve_linear_convergence.csv".into(),
                body: convergence_csv(h)?,
            });
            Ok(())
        });
    }

    fn nonlinear(&mut self) {
        self.step("solve_nonlinear", |r| {
            let ctx = r.context()?;
            let sol = solve_nonlinear(&ctx, &r.res.boundary, &r.res.solver)?;
            let h = &sol.history;
            let mut report = Report::new("solve_nonlinear");
            report.push(Check::flag(
                "outer_converged",
                "|f_{i+1} - f_i| < outer_tol",
                h.outer.last().map_or(0.0, |o| o.diff),
                r.res.solver.outer_tol,
                h.converged,
            ));
            let worst = h.outer_diff_ratios().into_iter().fold(0.0, f64::max);
            report.push(Check::bound(
                "outer_diff_ratio",
                "|f_{i+1} - f_i| <= 1/2 |f_i - f_{i-1}|",
                worst,
                HALF_SLACK,
                0.0,
            ));
            report.push(Check::diagnostic(
                "outer_diff_ratio_strict",
                "|f_{i+1} - f_i| <= 1/2 |f_i - f_{i-1}|",
                worst,
                0.5,
            ));
            let norms: Vec<f64> = h
                .outer
                .iter()
                .map(|o| o.full)
                .filter(|n| *n > 0.0)
                .collect();
            let spread = match (
                norms.iter().cloned().reduce(f64::max),
                norms.iter().cloned().reduce(f64::min),
            ) {
                (Some(hi), Some(lo)) => hi / lo,
                _ => 1.0,
            };
            report.push(Check::bound(
                "iterate_norm_spread",
                "|f_i| uniformly bounded: max/min over i",
                spread,
                NORM_SPREAD,
                0.0,
            ));
            push_residual(&mut report, h);
            r.warnings.extend(h.warnings.iter().cloned());
            r.suites.push(report);
            r.tables.push(Table {
                file: "solve_nonlinear_convergence.csv".into(),
                body: convergence_csv(h)?,
            });
            Ok(())
        });
    }
}

fn push_smallness(report: &mut Report, s: &ksd_core::solver::Smallness, threshold: f64) {
    report.push(Check::diagnostic(
        "smallness_diam",
        "diam(Omega)",
        s.diam,
        threshold,
    ));
    report.push(Check::diagnostic(
        "smallness_geom",
        "sqrt(R r)(1 + R/r)",
        s.geom,
        threshold,
    ));
    report.push(Check::diagnostic(
        "smallness_jg",
        "|J g|_{inf,alpha} full norm",
        s.jg_norm,
        threshold,
    ));
    report.push(Check::diagnostic(
        "smallness_max",
        "max{diam, sqrt(R r)(1+R/r), |J g|} <= delta",
        s.max,
        threshold,
    ));
}

fn push_residual(report: &mut Report, h: &IterationHistory) {
    let residual = h.residual.unwrap_or(f64::NAN);
    let estimate = h.error_estimate.unwrap_or(f64::NAN);
    report.push(Check::bound(
        "residual_within_estimate",
        "|f - J g - S K f - S phi|_{inf,alpha} <= 10 x quadrature error estimate",
        residual,
        RESIDUAL_FACTOR * estimate + RESIDUAL_FLOOR,
        0.0,
    ));
    report.push(Check::diagnostic(
        "error_estimate",
        "quadrature and truncation error estimate",
        estimate,
        residual,
    ));
}

/// Runs the configured scenario. `verbose` prints per-suite timings to
/// stderr; nothing time-dependent enters the report.
pub fn execute(cfg: &RunConfig, res: &Resolved, verbose: bool) -> Outcome {
    let mut r = Runner {
        cfg,
        res,
        verbose,
        suites: Vec::new(),
        tables: Vec::new(),
        warnings: Vec::new(),
    };
    match cfg.scenario {
        Scenario::VerifyGeometry => r.geometry(),
        Scenario::VerifyKernel => r.kernel(),
        Scenario::VerifyCollision => r.collision(),
        Scenario::VerifyNorms => r.norms(),
        Scenario::Contraction => r.contraction(),
        Scenario::SolveLinear => r.linear(),
        Scenario::SolveNonlinear => r.nonlinear(),
        Scenario::FullSuite => {
            r.geometry();
            r.kernel();
            r.collision();
            r.norms();
            r.contraction();
            r.linear();
            r.nonlinear();
        }
    }
    let pass = r.suites.iter().all(|s| s.all_pass());
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(cfg),
        scenario: cfg.scenario,
        pass,
        suites: r.suites,
        warnings: r.warnings,
    };
    Outcome {
        report,
        tables: r.tables,
    }
}

pub fn write_outcome(outcome: &Outcome, dir: &Path) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join("report.json");
    let mut json = serde_json::to_string_pretty(&outcome.report)?;
    json.push('\n');
    fs::write(&path, json).with_context(|| format!("cannot write {}", path.display()))?;
    for t in &outcome.tables {
        let p = dir.join(&t.file);
        fs::write(&p, &t.body).with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(path)
}
