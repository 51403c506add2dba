//! The subcommands: estimate, tune, consistency, work-study and eig-curve.
//! Each returns a report; `write_*` functions persist it under the output directory.

use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use eigdesign_core::rng::{derive_seed, Purpose};
use eigdesign_core::{
    c_alpha, estimate, estimate_constants, linear_gaussian_eig, optimal_setting, reference_eig, verify_setting,
    EigEstimate, EstimatorKind, EstimatorOptions, EstimatorSetting, ExperimentSpec, Mesh, OptimalSetting,
    PilotConstants, PilotOptions, TuneOptions,
};
use serde::Serialize;

use crate::config::{PriorConfig, RunConfig};
use crate::error::{CliError, CliResult, ConfigError};
use crate::output::{opt_sci, sci, write_csv, write_json};

/// Run-independent description of what produced a result.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: RunConfig,
}

impl Provenance {
    fn new(command: &'static str, cfg: &RunConfig) -> Self {
        Self { tool: "eigdesign", version: env!("CARGO_PKG_VERSION"), command, config: cfg.clone() }
    }
}

/// Timing information; the only part of a report that changes between identical runs.
#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub wall_time_seconds: f64,
    pub finished_unix_seconds: u64,
}

impl Metadata {
    fn since(start: Instant) -> Self {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self { wall_time_seconds: start.elapsed().as_secs_f64(), finished_unix_seconds: now }
    }
}

fn spec_at(cfg: &RunConfig, xi: &[f64]) -> CliResult<ExperimentSpec> {
    cfg.spec_at(xi).map_err(|e| CliError::Config(ConfigError { line: None, field: "design".into(), message: e.to_string() }))
}

fn tune_options(cfg: &RunConfig) -> TuneOptions {
    TuneOptions { force_kappa1: cfg.force_kappa1, ..TuneOptions::default() }
}

fn pilot_options(cfg: &RunConfig, point: u64) -> PilotOptions {
    let d = PilotOptions::default();
    PilotOptions {
        n: cfg.pilot.n,
        m: cfg.pilot.m,
        seed: derive_seed(cfg.seed, Purpose::Pilot, point, 0),
        mesh: cfg.pilot.h.map(Mesh::Size).unwrap_or(Mesh::Exact),
        reference_m: cfg.pilot.reference_m,
        bias_n: cfg.pilot.bias_n,
        estimator: d.estimator,
    }
}

/// Pilot constants for the configured estimator at design point `point`.
pub fn pilot_constants(cfg: &RunConfig, spec: &ExperimentSpec, point: u64) -> CliResult<PilotConstants> {
    Ok(estimate_constants(cfg.estimator, spec, &pilot_options(cfg, point))?)
}

/// Tuned setting for `tol`, checked against its own constraints.
pub fn tuned_setting(cfg: &RunConfig, constants: &PilotConstants, tol: f64) -> CliResult<OptimalSetting> {
    let opts = tune_options(cfg);
    let s = optimal_setting(constants, tol, cfg.alpha, &opts)?;
    if !s.feasible {
        return Err(CliError::Infeasible(s.message.clone().unwrap_or_else(|| format!("no setting meets TOL = {tol:e}"))));
    }
    verify_setting(constants, &s.setting, &opts).map_err(CliError::Constraint)?;
    Ok(s)
}

/// Reference EIG when an oracle applies: closed form for the linear model with a
/// normal prior, quadrature for other one-parameter scalar models.
pub fn reference_value(cfg: &RunConfig, spec: &ExperimentSpec) -> CliResult<Option<f64>> {
    if spec.d() != 1 || spec.q() != 1 {
        return Ok(None);
    }
    if let ("linear-scalar", PriorConfig::Normal { variance, .. }) = (cfg.model.as_str(), &cfg.prior) {
        let a = (1.0 + spec.design[0]).powi(2);
        return Ok(Some(linear_gaussian_eig(a, variance[0], spec.noise.variances()[0], spec.n_e)?));
    }
    Ok(Some(reference_eig(spec, Mesh::Exact)?))
}

fn run_seed(cfg: &RunConfig, index: u64, replicate: u64) -> u64 {
    derive_seed(cfg.seed, Purpose::Study, index, replicate)
}

fn run(kind: EstimatorKind, spec: &ExperimentSpec, setting: &EstimatorSetting, seed: u64) -> CliResult<(EigEstimate, f64)> {
    let start = Instant::now();
    let est = estimate(kind, spec, setting, seed, &EstimatorOptions::default())?;
    Ok((est, start.elapsed().as_secs_f64()))
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub estimate: EigEstimate,
    /// Absent when sample sizes were given explicitly.
    pub optimal_setting: Option<OptimalSetting>,
    pub pilot_constants: Option<PilotConstants>,
    pub setting: EstimatorSetting,
    pub reference: Option<f64>,
    pub run_seed: u64,
    pub provenance: Provenance,
    pub metadata: Metadata,
}

/// Tunes (unless sizes are explicit) and runs one estimate at the first tolerance.
pub fn cmd_estimate(cfg: &RunConfig) -> CliResult<EstimateReport> {
    let start = Instant::now();
    let spec = spec_at(cfg, &cfg.design)?;
    let tol = cfg.tols[0];
    let (setting, optimal, constants) = match cfg.explicit {
        Some(x) => {
            let setting = EstimatorSetting {
                n: x.n,
                m: if cfg.estimator == EstimatorKind::Mcla { 1 } else { x.m },
                mesh: x.h.map(Mesh::Size).unwrap_or(Mesh::Exact),
                kappa: x.kappa.unwrap_or(1.0),
                tol,
                alpha: cfg.alpha,
            };
            setting.validate()?;
            (setting, None, None)
        }
        None => {
            let c = pilot_constants(cfg, &spec, 0)?;
            let s = tuned_setting(cfg, &c, tol)?;
            (s.setting, Some(s), Some(c))
        }
    };
    let seed = run_seed(cfg, 0, 0);
    let (est, _) = run(cfg.estimator, &spec, &setting, seed)?;
    let reference = reference_value(cfg, &spec)?;
    Ok(EstimateReport {
        estimate: est,
        optimal_setting: optimal,
        pilot_constants: constants,
        setting,
        reference,
        run_seed: seed,
        provenance: Provenance::new("estimate", cfg),
        metadata: Metadata::since(start),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TuneEntry {
    pub tol: f64,
    pub result: OptimalSetting,
    /// Constraint check of the returned setting; `None` when it passed.
    pub constraint_violation: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TuneReport {
    pub pilot_constants: PilotConstants,
    pub settings: Vec<TuneEntry>,
    pub provenance: Provenance,
    pub metadata: Metadata,
}

impl TuneReport {
    pub fn infeasible(&self) -> Vec<&TuneEntry> {
        self.settings.iter().filter(|e| !e.result.feasible).collect()
    }
}

/// Pilot run plus the optimal setting for every configured tolerance.
pub fn cmd_tune(cfg: &RunConfig) -> CliResult<TuneReport> {
    let start = Instant::now();
    let spec = spec_at(cfg, &cfg.design)?;
    let constants = pilot_constants(cfg, &spec, 0)?;
    let opts = tune_options(cfg);
    let mut settings = Vec::with_capacity(cfg.tols.len());
    for &tol in &cfg.tols {
        let result = optimal_setting(&constants, tol, cfg.alpha, &opts)?;
        let constraint_violation = if result.feasible { verify_setting(&constants, &result.setting, &opts).err() } else { None };
        settings.push(TuneEntry { tol, result, constraint_violation });
    }
    Ok(TuneReport { pilot_constants: constants, settings, provenance: Provenance::new("tune", cfg), metadata: Metadata::since(start) })
}

/// One row per (TOL, replicate).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRecord {
    pub tol: f64,
    pub replicate: usize,
    pub n: usize,
    pub m: usize,
    pub h: Option<f64>,
    pub kappa: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub abs_error_vs_reference: Option<f64>,
    pub work_units: f64,
    pub wall_time: f64,
    pub underflow_count: usize,
    pub seed: u64,
}

pub const STUDY_HEADER: [&str; 13] = [
    "TOL",
    "replicate",
    "N",
    "M",
    "h",
    "kappa",
    "estimate",
    "std_error",
    "abs_error_vs_reference",
    "work_units",
    "wall_time",
    "underflow_count",
    "seed",
];

impl StudyRecord {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            sci(self.tol),
            self.replicate.to_string(),
            self.n.to_string(),
            self.m.to_string(),
            self.h.map(sci).unwrap_or_else(|| "exact".into()),
            sci(self.kappa),
            sci(self.estimate),
            sci(self.std_error),
            opt_sci(self.abs_error_vs_reference),
            sci(self.work_units),
            sci(self.wall_time),
            self.underflow_count.to_string(),
            self.seed.to_string(),
        ]
    }
}

fn record(tol: f64, replicate: usize, s: &EstimatorSetting, est: &EigEstimate, wall: f64, reference: Option<f64>, seed: u64) -> StudyRecord {
    StudyRecord {
        tol,
        replicate,
        n: s.n,
        m: s.m,
        h: s.mesh.size(),
        kappa: s.kappa,
        estimate: est.value,
        std_error: est.std_error,
        abs_error_vs_reference: reference.map(|r| (est.value - r).abs()),
        work_units: est.work_units,
        wall_time: wall,
        underflow_count: est.underflow_count,
        seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub tol: f64,
    pub replicates: usize,
    pub within_tol: usize,
    /// Fraction of replicates with `|error| <= TOL`; `None` without replicates.
    pub coverage: Option<f64>,
    /// `1 - alpha`, the coverage the tuner aims for.
    pub target: f64,
}

pub const COVERAGE_HEADER: [&str; 5] = ["TOL", "replicates", "within_tol", "coverage", "target"];

impl CoverageRow {
    pub fn csv_row(&self) -> Vec<String> {
        vec![sci(self.tol), self.replicates.to_string(), self.within_tol.to_string(), opt_sci(self.coverage), sci(self.target)]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub reference: f64,
    pub pilot_constants: PilotConstants,
    pub records: Vec<StudyRecord>,
    pub summary: Vec<CoverageRow>,
}

/// Error-vs-tolerance study: `replicates` tuned runs per tolerance against the oracle.
pub fn cmd_consistency(cfg: &RunConfig, replicates: usize) -> CliResult<ConsistencyReport> {
    let spec = spec_at(cfg, &cfg.design)?;
    let reference = reference_value(cfg, &spec)?.ok_or_else(|| {
        CliError::Config(ConfigError::missing("a model with an oracle reference (one parameter, scalar response)"))
    })?;
    let constants = pilot_constants(cfg, &spec, 0)?;
    let mut records = Vec::new();
    let mut summary = Vec::new();
    for (i, &tol) in cfg.tols.iter().enumerate() {
        let s = tuned_setting(cfg, &constants, tol)?;
        let mut within = 0;
        for r in 0..replicates {
            let seed = run_seed(cfg, i as u64, r as u64);
            let (est, wall) = run(cfg.estimator, &spec, &s.setting, seed)?;
            let rec = record(tol, r, &s.setting, &est, wall, Some(reference), seed);
            within += usize::from(rec.abs_error_vs_reference.is_some_and(|e| e <= tol));
            records.push(rec);
        }
        summary.push(CoverageRow {
            tol,
            replicates,
            within_tol: within,
            coverage: (replicates > 0).then(|| within as f64 / replicates as f64),
            target: 1.0 - cfg.alpha,
        });
    }
    Ok(ConsistencyReport { reference, pilot_constants: constants, records, summary })
}

/// Least-squares slope of `log y` against `log x`; `None` below two distinct points.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

#[derive(Debug, Clone, Serialize)]
pub struct SkippedTolerance {
    pub tol: f64,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct WorkSlopes {
    pub estimator: EstimatorKind,
    /// Tolerances that entered the fit.
    pub tols: Vec<f64>,
    pub mean_work_units: Vec<f64>,
    pub work_slope: Option<f64>,
    /// `"ok"`, or why the slopes are not available.
    pub status: String,
    pub skipped: Vec<SkippedTolerance>,
    pub pilot_constants: PilotConstants,
    pub provenance: Provenance,
    pub metadata: StudyTiming,
}

/// Wall-clock side of a work study; varies between otherwise identical runs.
#[derive(Debug, Clone, Serialize)]
pub struct StudyTiming {
    pub mean_wall_time: Vec<f64>,
    pub time_slope: Option<f64>,
    pub wall_time_seconds: f64,
    pub finished_unix_seconds: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WorkStudyReport {
    pub pilot_constants: PilotConstants,
    pub records: Vec<StudyRecord>,
    pub slopes: WorkSlopes,
}

/// Work and wall time against tolerance with fitted log-log slopes. Tolerances the
/// tuner cannot meet are listed as skipped rather than aborting the study.
pub fn cmd_work_study(cfg: &RunConfig, replicates: usize) -> CliResult<WorkStudyReport> {
    let start = Instant::now();
    let spec = spec_at(cfg, &cfg.design)?;
    let reference = reference_value(cfg, &spec)?;
    let constants = pilot_constants(cfg, &spec, 0)?;
    let replicates = replicates.max(1);
    let mut records = Vec::new();
    let (mut tols, mut works, mut times, mut skipped) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, &tol) in cfg.tols.iter().enumerate() {
        let s = match tuned_setting(cfg, &constants, tol) {
            Ok(s) => s,
            Err(CliError::Infeasible(reason)) => {
                skipped.push(SkippedTolerance { tol, reason });
                continue;
            }
            Err(e) => return Err(e),
        };
        let (mut w, mut t) = (0.0, 0.0);
        for r in 0..replicates {
            let seed = run_seed(cfg, i as u64, r as u64);
            let (est, wall) = run(cfg.estimator, &spec, &s.setting, seed)?;
            w += est.work_units;
            t += wall;
            records.push(record(tol, r, &s.setting, &est, wall, reference, seed));
        }
        tols.push(tol);
        works.push(w / replicates as f64);
        times.push(t / replicates as f64);
    }
    let work_slope = log_log_slope(&tols, &works);
    let time_slope = log_log_slope(&tols, &times);
    let status = if work_slope.is_some() {
        "ok".to_string()
    } else {
        format!("not available: {} feasible tolerance(s), a slope needs at least 2", tols.len())
    };
    let done = Metadata::since(start);
    let slopes = WorkSlopes {
        estimator: cfg.estimator,
        tols,
        mean_work_units: works,
        work_slope,
        status,
        skipped,
        pilot_constants: constants.clone(),
        provenance: Provenance::new("work-study", cfg),
        metadata: StudyTiming {
            mean_wall_time: times,
            time_slope,
            wall_time_seconds: done.wall_time_seconds,
            finished_unix_seconds: done.finished_unix_seconds,
        },
    };
    Ok(WorkStudyReport { pilot_constants: constants, records, slopes })
}

/// One design point of an EIG curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub xi: f64,
    pub estimate: Option<f64>,
    pub std_error: Option<f64>,
    /// `C_alpha * std_error`.
    pub half_width: Option<f64>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub kappa: Option<f64>,
    pub reference: Option<f64>,
    pub work_units: Option<f64>,
    pub underflow_count: Option<usize>,
    pub seed: u64,
    /// Why this point has no estimate.
    pub error: Option<String>,
}

pub const CURVE_HEADER: [&str; 12] =
    ["xi", "estimate", "std_error", "half_width", "N", "M", "kappa", "reference", "work_units", "underflow_count", "seed", "error"];

impl CurvePoint {
    pub fn csv_row(&self) -> Vec<String> {
        let int = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            sci(self.xi),
            opt_sci(self.estimate),
            opt_sci(self.std_error),
            opt_sci(self.half_width),
            int(self.n),
            int(self.m),
            opt_sci(self.kappa),
            opt_sci(self.reference),
            opt_sci(self.work_units),
            int(self.underflow_count),
            self.seed.to_string(),
            self.error.clone().unwrap_or_default(),
        ]
    }
}

fn curve_point(cfg: &RunConfig, index: usize, xi: &[f64], with_reference: bool) -> CurvePoint {
    let seed = run_seed(cfg, index as u64, 0);
    let mut p = CurvePoint {
        xi: xi[0],
        estimate: None,
        std_error: None,
        half_width: None,
        n: None,
        m: None,
        kappa: None,
        reference: None,
        work_units: None,
        underflow_count: None,
        seed,
        error: None,
    };
    let outcome = (|| -> CliResult<()> {
        let spec = spec_at(cfg, xi)?;
        if with_reference {
            p.reference = reference_value(cfg, &spec)?;
        }
        let c = pilot_constants(cfg, &spec, index as u64)?;
        let s = tuned_setting(cfg, &c, cfg.tols[0])?;
        let (est, _) = run(cfg.estimator, &spec, &s.setting, seed)?;
        p.estimate = Some(est.value);
        p.std_error = Some(est.std_error);
        p.half_width = Some(c_alpha(cfg.alpha) * est.std_error);
        p.n = Some(s.setting.n);
        p.m = Some(s.setting.m);
        p.kappa = Some(s.setting.kappa);
        p.work_units = Some(est.work_units);
        p.underflow_count = Some(est.underflow_count);
        Ok(())
    })();
    if let Err(e) = outcome {
        p.error = Some(e.to_string());
    }
    p
}

/// Tuned estimate at every design point of the grid, at the first tolerance.
/// Failures are recorded in the row and the sweep continues.
pub fn cmd_eig_curve(cfg: &RunConfig, with_reference: bool) -> CliResult<Vec<CurvePoint>> {
    let points = cfg.design_points();
    Ok(points.iter().enumerate().map(|(i, xi)| curve_point(cfg, i, xi, with_reference)).collect())
}

pub fn write_estimate(dir: &Path, r: &EstimateReport) -> CliResult<()> {
    write_json(&dir.join("estimate.json"), r)
}

pub fn write_tune(dir: &Path, r: &TuneReport) -> CliResult<()> {
    write_json(&dir.join("tune.json"), r)
}

pub fn write_consistency(dir: &Path, r: &ConsistencyReport) -> CliResult<()> {
    let rows: Vec<_> = r.records.iter().map(StudyRecord::csv_row).collect();
    write_csv(&dir.join("consistency.csv"), &STUDY_HEADER, &rows)?;
    let rows: Vec<_> = r.summary.iter().map(CoverageRow::csv_row).collect();
    write_csv(&dir.join("consistency_summary.csv"), &COVERAGE_HEADER, &rows)
}

pub fn write_work_study(dir: &Path, r: &WorkStudyReport) -> CliResult<()> {
    let rows: Vec<_> = r.records.iter().map(StudyRecord::csv_row).collect();
    write_csv(&dir.join("work_study.csv"), &STUDY_HEADER, &rows)?;
    write_json(&dir.join("work_study_slopes.json"), &r.slopes)
}

pub fn write_eig_curve(dir: &Path, points: &[CurvePoint]) -> CliResult<()> {
    let rows: Vec<_> = points.iter().map(CurvePoint::csv_row).collect();
    write_csv(&dir.join("eig_curve.csv"), &CURVE_HEADER, &rows)
}
