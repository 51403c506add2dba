//! Pilot estimation of error-model constants and work-optimal choice of
//! `(N, M, h, kappa)` for a target tolerance.
//!
//! Error model for the double-loop estimators (DLMC, DLMCIS):
//!
//! ```text
//! variance  C1/N + C2/(N M)        <= (kappa TOL / C_alpha)^2
//! bias      C3 h^eta + C4/M        <= (1 - kappa) TOL
//! work      N M h^-gamma
//! ```
//!
//! MCLA has variance `C1/N`, bias `C_la2/N_e + C3 h^eta` and work `N N_jac h^-gamma`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{c_alpha, outer_records, EstimatorKind, EstimatorOptions, EstimatorSetting, OuterRecord};
use crate::model::{ExperimentSpec, Mesh};

/// Error-model constants estimated from a pilot run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotConstants {
    pub variant: EstimatorKind,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub eta: f64,
    pub gamma: f64,
    /// Laplace bias constant: the MCLA bias is `c_la2 / N_e`. Zero for other variants
    /// and when the measured bias is not significant.
    pub c_la2: f64,
    /// Measured `|MCLA - DLMCIS|` and its standard error (MCLA only).
    pub laplace_bias: f64,
    pub laplace_bias_std_error: f64,
    pub n_e: usize,
    /// Average evaluations per outer sample outside the inner loop
    /// (MAP search for DLMCIS, Jacobian for MCLA).
    pub outer_overhead: f64,
    pub pilot_n: usize,
    pub pilot_m: usize,
    pub pilot_seed: u64,
    /// Mesh size of the pilot run, `None` when evaluated exactly.
    pub pilot_h: Option<f64>,
}

impl PilotConstants {
    /// Whether the discretization enters the optimization.
    pub fn meshed(&self) -> bool {
        self.c3 > 0.0 && self.gamma > 0.0
    }

    /// `C_la2 / N_e`, the smallest tolerance MCLA can meet.
    pub fn laplace_floor(&self) -> f64 {
        self.c_la2 / self.n_e as f64
    }
}

/// Pilot-run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotOptions {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    /// Mesh of the pilot run; a finite size also estimates `C3` from a run at `h/2`.
    pub mesh: Mesh,
    /// Inner samples of the DLMCIS reference used to measure the Laplace bias.
    pub reference_m: usize,
    /// Outer samples of the MCLA pilot. The paired MCLA and DLMCIS terms differ
    /// by an O(1) amount per sample, so resolving a Laplace bias of a few
    /// hundredths needs far more outer samples than the nested pilots.
    pub bias_n: usize,
    pub estimator: EstimatorOptions,
}

impl Default for PilotOptions {
    fn default() -> Self {
        Self { n: 100, m: 100, seed: 0x5eed, mesh: Mesh::Exact, reference_m: 1000, bias_n: 10_000, estimator: EstimatorOptions::default() }
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut k) = (0.0, 0usize);
    for x in v {
        s += x;
        k += 1;
    }
    s / k as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v.iter().copied());
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

fn check_pilot_sizes(n: usize, m: usize) -> Result<()> {
    if n < 2 || m < 1 {
        return Err(Error::invalid(format!("pilot needs N >= 2 and M >= 1 (got N = {n}, M = {m})")));
    }
    Ok(())
}

fn richardson_c3(
    kind: EstimatorKind,
    spec: &ExperimentSpec,
    pilot: &PilotOptions,
    n: usize,
    m: usize,
    coarse_value: f64,
) -> Result<f64> {
    let Mesh::Size(h) = pilot.mesh else { return Ok(0.0) };
    let eta = spec.model.convergence_rate();
    let fine = EstimatorSetting::fixed(n, m).with_mesh(Mesh::Size(h / 2.0));
    let recs = outer_records(kind, spec, &fine, pilot.seed, &pilot.estimator)?;
    let fine_value = mean(recs.iter().filter(|r| !r.excluded).map(|r| r.term));
    Ok((coarse_value - fine_value).abs() / (h.powf(eta) * (1.0 - 2f64.powf(-eta))))
}

fn nested_constants(
    kind: EstimatorKind,
    spec: &ExperimentSpec,
    pilot: &PilotOptions,
) -> Result<PilotConstants> {
    check_pilot_sizes(pilot.n, pilot.m)?;
    let setting = EstimatorSetting::fixed(pilot.n, pilot.m).with_mesh(pilot.mesh);
    let recs: Vec<OuterRecord> =
        outer_records(kind, spec, &setting, pilot.seed, &pilot.estimator)?.into_iter().filter(|r| !r.excluded).collect();
    if recs.len() < 2 {
        return Err(Error::DegeneratePilot("fewer than two usable outer samples".into()));
    }
    let t: Vec<f64> = recs.iter().map(|r| r.term).collect();
    let mean_t = mean(t.iter().copied());
    let mean_v = mean(recs.iter().map(|r| r.weight_var));
    let mean_tv = mean(recs.iter().map(|r| r.term * r.weight_var));
    let c1 = sample_var(&t);
    if !(c1 > 0.0) && !(mean_v > 0.0) {
        return Err(Error::DegeneratePilot(
            "pilot terms and inner weights show no variation; the design is uninformative or the pilot too small (increase pilot N and M)".into(),
        ));
    }
    let c2 = ((1.0 + mean_t) * mean_v - mean_tv).max(0.0);
    let c4 = 0.5 * mean_v;
    let overhead = mean(recs.iter().map(|r| r.work.evals as f64)) - pilot.m as f64;
    let c3 = richardson_c3(kind, spec, pilot, pilot.n, pilot.m, mean_t)?;
    Ok(PilotConstants {
        variant: kind,
        c1,
        c2,
        c3,
        c4,
        eta: spec.model.convergence_rate(),
        gamma: spec.model.work_exponent(),
        c_la2: 0.0,
        laplace_bias: 0.0,
        laplace_bias_std_error: 0.0,
        n_e: spec.n_e,
        outer_overhead: overhead,
        pilot_n: pilot.n,
        pilot_m: pilot.m,
        pilot_seed: pilot.seed,
        pilot_h: pilot.mesh.size(),
    })
}

/// Pilot constants for DLMC from nested sample moments of the likelihood ratios.
pub fn estimate_constants_dlmc(spec: &ExperimentSpec, pilot: &PilotOptions) -> Result<PilotConstants> {
    nested_constants(EstimatorKind::Dlmc, spec, pilot)
}

/// Pilot constants for DLMCIS (same moments, importance-sampled inner loop).
pub fn estimate_constants_dlmcis(spec: &ExperimentSpec, pilot: &PilotOptions) -> Result<PilotConstants> {
    nested_constants(EstimatorKind::Dlmcis, spec, pilot)
}

/// Pilot constants for MCLA. The Laplace bias is measured as the mean paired
/// difference between MCLA and a DLMCIS reference on identical outer draws; it
/// is set to zero when smaller than two standard errors.
pub fn estimate_constants_mcla(spec: &ExperimentSpec, pilot: &PilotOptions) -> Result<PilotConstants> {
    check_pilot_sizes(pilot.bias_n, pilot.reference_m)?;
    let setting = EstimatorSetting::fixed(pilot.bias_n, 1).with_mesh(pilot.mesh);
    let la = outer_records(EstimatorKind::Mcla, spec, &setting, pilot.seed, &pilot.estimator)?;
    let reference = EstimatorSetting::fixed(pilot.bias_n, pilot.reference_m).with_mesh(pilot.mesh);
    let is = outer_records(EstimatorKind::Dlmcis, spec, &reference, pilot.seed, &pilot.estimator)?;
    let terms: Vec<f64> = la.iter().filter(|r| !r.excluded).map(|r| r.term).collect();
    let diffs: Vec<f64> =
        la.iter().zip(&is).filter(|(a, b)| !a.excluded && !b.excluded).map(|(a, b)| a.term - b.term).collect();
    if terms.len() < 2 || diffs.len() < 2 {
        return Err(Error::DegeneratePilot("fewer than two usable outer samples".into()));
    }
    let c1 = sample_var(&terms);
    if !(c1 > 0.0) {
        return Err(Error::DegeneratePilot("MCLA pilot terms show no variation (increase pilot N)".into()));
    }
    let bias = mean(diffs.iter().copied()).abs();
    let se = (sample_var(&diffs) / diffs.len() as f64).sqrt();
    let c_la2 = if bias > 2.0 * se { bias * spec.n_e as f64 } else { 0.0 };
    let overhead = mean(la.iter().map(|r| r.work.evals as f64));
    let c3 = richardson_c3(EstimatorKind::Mcla, spec, pilot, pilot.bias_n, 1, mean(terms.iter().copied()))?;
    Ok(PilotConstants {
        variant: EstimatorKind::Mcla,
        c1,
        c2: 0.0,
        c3,
        c4: 0.0,
        eta: spec.model.convergence_rate(),
        gamma: spec.model.work_exponent(),
        c_la2,
        laplace_bias: bias,
        laplace_bias_std_error: se,
        n_e: spec.n_e,
        outer_overhead: overhead,
        pilot_n: pilot.bias_n,
        pilot_m: pilot.reference_m,
        pilot_seed: pilot.seed,
        pilot_h: pilot.mesh.size(),
    })
}

/// Dispatches to the pilot routine of `kind`.
pub fn estimate_constants(kind: EstimatorKind, spec: &ExperimentSpec, pilot: &PilotOptions) -> Result<PilotConstants> {
    match kind {
        EstimatorKind::Dlmc => estimate_constants_dlmc(spec, pilot),
        EstimatorKind::Dlmcis => estimate_constants_dlmcis(spec, pilot),
        EstimatorKind::Mcla => estimate_constants_mcla(spec, pilot),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    ClosedForm,
    NumericFallback,
}

/// Tuner output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalSetting {
    pub setting: EstimatorSetting,
    /// `N M h^-gamma` (nested) or `N N_jac h^-gamma` (MCLA) at the ceiled sizes.
    pub predicted_work: f64,
    /// Predicted work including per-outer overhead such as MAP searches.
    pub predicted_total_work: f64,
    pub feasible: bool,
    pub solver: Solver,
    /// Why the closed form was rejected or why no setting exists.
    pub message: Option<String>,
    /// The bias constraint was deliberately ignored (`kappa = 1` override).
    pub bias_constraint_waived: bool,
    /// Work of the numeric solution divided by the returned work, when both exist.
    pub crosscheck_ratio: Option<f64>,
}

/// Tuner switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    /// MCLA only: use `kappa = 1` and ignore the bias constraint.
    pub force_kappa1: bool,
    /// Largest admissible mesh size.
    pub h_max: f64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self { force_kappa1: false, h_max: 1.0 }
    }
}

/// Continuous work-minimization problem shared by the closed forms and the numeric solver.
#[derive(Debug, Clone, Copy)]
struct Problem {
    c1: f64,
    c2: f64,
    c3: f64,
    c4: f64,
    /// Fixed bias that no method parameter can reduce (`C_la2 / N_e`).
    fixed_bias: f64,
    eta: f64,
    gamma: f64,
    meshed: bool,
    nested: bool,
    cost_per_sample: f64,
    overhead: f64,
    tol: f64,
    ca: f64,
    h_max: f64,
}

#[derive(Debug, Clone, Copy)]
struct Point {
    kappa: f64,
    n: f64,
    m: f64,
    h: Option<f64>,
}

impl Problem {
    fn new(c: &PilotConstants, tol: f64, alpha: f64, opts: &TuneOptions) -> Self {
        let nested = c.variant != EstimatorKind::Mcla;
        Self {
            c1: c.c1,
            c2: if nested { c.c2 } else { 0.0 },
            c3: c.c3,
            c4: if nested { c.c4 } else { 0.0 },
            fixed_bias: if nested { 0.0 } else { c.laplace_floor() },
            eta: c.eta,
            gamma: c.gamma,
            meshed: c.meshed(),
            nested,
            cost_per_sample: if nested { 1.0 } else { c.outer_overhead.max(1.0) },
            overhead: if nested { c.outer_overhead.max(0.0) } else { 0.0 },
            tol,
            ca: c_alpha(alpha),
            h_max: opts.h_max,
        }
    }

    fn ratio(&self) -> f64 {
        if self.meshed {
            self.gamma / self.eta
        } else {
            0.0
        }
    }

    fn bias_free(&self) -> bool {
        self.fixed_bias == 0.0 && self.c4 == 0.0 && !self.meshed
    }

    fn h_cost(&self, h: Option<f64>) -> f64 {
        h.map(|h| h.powf(-self.gamma)).unwrap_or(1.0)
    }

    fn n_for(&self, kappa: f64, m: f64) -> f64 {
        let kt = kappa * self.tol / self.ca;
        ((self.c1 + self.c2 / m) / (kt * kt)).max(1.0)
    }

    /// Continuous objective with `N` and `M` eliminated through the active constraints.
    fn point(&self, kappa: f64, h: Option<f64>) -> Option<Point> {
        if !(kappa > 0.0 && kappa <= 1.0) {
            return None;
        }
        let budget = (1.0 - kappa) * self.tol - self.fixed_bias;
        let (h, budget) = match (self.meshed, self.nested) {
            (false, _) => (None, budget),
            (true, true) => {
                let h = h?;
                if !(h > 0.0 && h <= self.h_max) {
                    return None;
                }
                (Some(h), budget - self.c3 * h.powf(self.eta))
            }
            (true, false) => {
                if budget <= 0.0 {
                    return None;
                }
                let h = (budget / self.c3).powf(1.0 / self.eta).min(self.h_max);
                (Some(h), budget - self.c3 * h.powf(self.eta))
            }
        };
        let m = if !self.nested || self.c4 == 0.0 {
            if budget < -1e-12 * self.tol {
                return None;
            }
            1.0
        } else {
            if budget <= 0.0 {
                return None;
            }
            (self.c4 / budget).max(1.0)
        };
        Some(Point { kappa, n: self.n_for(kappa, m), m, h })
    }

    fn work(&self, p: &Point) -> f64 {
        p.n * p.m * self.cost_per_sample * self.h_cost(p.h)
    }

    fn finish(&self, p: &Point, solver: Solver, alpha: f64) -> OptimalSetting {
        let n = p.n.ceil().max(1.0);
        let m = if self.nested { p.m.ceil().max(1.0) } else { 1.0 };
        let hc = self.h_cost(p.h);
        OptimalSetting {
            setting: EstimatorSetting {
                n: n as usize,
                m: m as usize,
                mesh: p.h.map(Mesh::Size).unwrap_or(Mesh::Exact),
                kappa: p.kappa,
                tol: self.tol,
                alpha,
            },
            predicted_work: n * m * self.cost_per_sample * hc,
            predicted_total_work: n * (m * self.cost_per_sample + self.overhead) * hc,
            feasible: true,
            solver,
            message: None,
            bias_constraint_waived: false,
            crosscheck_ratio: None,
        }
    }

    /// Post-hoc check of both constraints at the returned (ceiled) setting.
    fn verify(&self, s: &EstimatorSetting) -> std::result::Result<(), String> {
        let (n, m) = (s.n as f64, s.m as f64);
        let var = self.c1 / n + if self.nested { self.c2 / (n * m) } else { 0.0 };
        let var_cap = (s.kappa * self.tol / self.ca).powi(2);
        let slack = 1.0 + 1e-9;
        if !(var <= var_cap * slack) {
            return Err(format!("variance constraint violated: {var:.6e} > {var_cap:.6e}"));
        }
        let h_bias = match s.mesh {
            Mesh::Size(h) => self.c3 * h.powf(self.eta),
            Mesh::Exact => 0.0,
        };
        let bias = h_bias + if self.nested { self.c4 / m } else { 0.0 } + self.fixed_bias;
        let bias_cap = (1.0 - s.kappa) * self.tol;
        if !(bias <= bias_cap * slack + 1e-300) {
            return Err(format!("bias constraint violated: {bias:.6e} > {bias_cap:.6e}"));
        }
        if let Mesh::Size(h) = s.mesh {
            if !(h > 0.0 && h <= self.h_max * slack) {
                return Err(format!("mesh size {h} outside (0, {}]", self.h_max));
            }
        }
        Ok(())
    }
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Projected coordinate descent on a grid over `(logit kappa, log h)`, refined twice.
fn minimize(p: &Problem) -> Option<Point> {
    if p.bias_free() {
        return p.point(1.0, None);
    }
    const K: usize = 41;
    let free_h = p.meshed && p.nested;
    let mut lo = [-20.0, p.h_max.ln() - 30.0];
    let mut hi = [20.0, p.h_max.ln()];
    let dims = if free_h { 2 } else { 1 };
    let eval = |x: &[f64; 2]| -> f64 {
        let h = free_h.then(|| x[1].exp().min(p.h_max));
        match p.point(logistic(x[0]), h) {
            Some(pt) => p.work(&pt),
            None => f64::INFINITY,
        }
    };
    let grid = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (K - 1) as f64;
    // Coarse tensor scan gives a feasible start for the descent.
    let mut best = [0.0, hi[1]];
    let mut best_w = f64::INFINITY;
    for i in 0..K {
        for j in 0..if free_h { K } else { 1 } {
            let x = [grid(lo[0], hi[0], i), if free_h { grid(lo[1], hi[1], j) } else { hi[1] }];
            let w = eval(&x);
            if w < best_w {
                best_w = w;
                best = x;
            }
        }
    }
    if !best_w.is_finite() {
        return None;
    }
    for _refinement in 0..3 {
        for _sweep in 0..100 {
            let mut improved = false;
            for d in 0..dims {
                for i in 0..K {
                    let mut x = best;
                    x[d] = grid(lo[d], hi[d], i);
                    let w = eval(&x);
                    if w < best_w {
                        best_w = w;
                        best = x;
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        for d in 0..dims {
            let cell = (hi[d] - lo[d]) / (K - 1) as f64;
            lo[d] = best[d] - 2.0 * cell;
            hi[d] = best[d] + 2.0 * cell;
        }
        if free_h {
            hi[1] = hi[1].min(p.h_max.ln());
        }
    }
    let h = free_h.then(|| best[1].exp().min(p.h_max));
    p.point(logistic(best[0]), h)
}

fn infeasible(p: &Problem, alpha: f64, solver: Solver, message: String) -> OptimalSetting {
    OptimalSetting {
        setting: EstimatorSetting { n: 1, m: 1, mesh: Mesh::Exact, kappa: f64::NAN, tol: p.tol, alpha },
        predicted_work: f64::INFINITY,
        predicted_total_work: f64::INFINITY,
        feasible: false,
        solver,
        message: Some(message),
        bias_constraint_waived: false,
        crosscheck_ratio: None,
    }
}

fn fallback_or(p: &Problem, alpha: f64, reason: String) -> OptimalSetting {
    match minimize(p) {
        Some(pt) => {
            let mut out = p.finish(&pt, Solver::NumericFallback, alpha);
            match p.verify(&out.setting) {
                Ok(()) => {
                    out.message = Some(reason);
                    out
                }
                Err(e) => infeasible(p, alpha, Solver::NumericFallback, format!("{reason}; numeric solution failed verification: {e}")),
            }
        }
        None => infeasible(p, alpha, Solver::NumericFallback, format!("{reason}; no feasible setting found")),
    }
}

/// Constrained minimization of the work model by grid-refined coordinate descent.
pub fn numeric_fallback(constants: &PilotConstants, tol: f64, alpha: f64, opts: &TuneOptions) -> Result<OptimalSetting> {
    check_tol(tol, alpha)?;
    let p = Problem::new(constants, tol, alpha, opts);
    Ok(fallback_or(&p, alpha, "numeric solution requested".into()))
}

fn check_tol(tol: f64, alpha: f64) -> Result<()> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::invalid(format!("tolerance must be positive and finite, got {tol}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn check_variant(c: &PilotConstants, want: &[EstimatorKind]) -> Result<()> {
    if !want.contains(&c.variant) {
        return Err(Error::invalid(format!("constants for {} passed to the tuner of {:?}", c.variant, want)));
    }
    Ok(())
}

/// Roots in `(0, 1)` of `a k^2 - b k + c = 0`.
fn unit_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let mut r = Vec::new();
    if a.abs() < 1e-300 || (a.abs() * c.abs()) < 1e-14 * b * b {
        if b != 0.0 {
            r.push(c / b);
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            // Cancellation-free pair.
            let s = -0.5 * (-b - b.signum() * disc.sqrt());
            r.push(s / a);
            if s != 0.0 {
                r.push(c / s);
            }
        }
    }
    r.retain(|k| *k > 0.0 && *k < 1.0);
    r
}

/// Work-optimal split for the nested error model: root of
/// `beta (r+2) k^2 - (3 + r + beta (r+4)) k + 2 (1 + beta) = 0` with
/// `r = gamma/eta` and `beta = C2 TOL / (C1 C4 (1 + r))`.
fn nested_kappa_roots(c1: f64, c2: f64, c4: f64, r: f64, tol: f64) -> Vec<f64> {
    if c4 == 0.0 {
        return vec![2.0 / (2.0 + r)];
    }
    let beta = c2 * tol / (c1 * c4 * (1.0 + r));
    unit_roots(beta * (r + 2.0), 3.0 + r + beta * (r + 4.0), 2.0 * (1.0 + beta))
}

fn best_of(p: &Problem, candidates: &[Point]) -> Option<Point> {
    candidates.iter().copied().min_by(|a, b| p.work(a).total_cmp(&p.work(b)))
}

fn closed_or_fallback(p: &Problem, alpha: f64, candidate: std::result::Result<Point, String>) -> OptimalSetting {
    match candidate {
        Ok(pt) => {
            let out = p.finish(&pt, Solver::ClosedForm, alpha);
            match p.verify(&out.setting) {
                Ok(()) => out,
                Err(e) => fallback_or(p, alpha, format!("closed form rejected: {e}")),
            }
        }
        Err(reason) => fallback_or(p, alpha, reason),
    }
}

fn attach_crosscheck(p: &Problem, mut out: OptimalSetting) -> OptimalSetting {
    if out.feasible && out.solver == Solver::ClosedForm {
        if let Some(pt) = minimize(p) {
            let alt = p.finish(&pt, Solver::NumericFallback, out.setting.alpha);
            out.crosscheck_ratio = Some(alt.predicted_work / out.predicted_work);
        }
    }
    out
}

/// Meshless nested setting: `M = C4 / ((1-kappa) TOL)`, `N` from the variance constraint.
fn nested_meshless(p: &Problem) -> std::result::Result<Point, String> {
    if p.bias_free() {
        return p.point(1.0, None).ok_or_else(|| "degenerate constants".into());
    }
    if !(p.c1 > 0.0) {
        return Err("C1 is zero; closed form undefined".into());
    }
    let roots = nested_kappa_roots(p.c1, p.c2, p.c4, 0.0, p.tol);
    let pts: Vec<Point> = roots.iter().filter_map(|k| p.point(*k, None)).collect();
    best_of(p, &pts).ok_or_else(|| "no root of the kappa polynomial in (0, 1)".into())
}

/// DLMC tuner. Meshless: the derived quadratic; meshed: the classical closed form.
pub fn optimal_setting_dlmc(constants: &PilotConstants, tol: f64, alpha: f64, opts: &TuneOptions) -> Result<OptimalSetting> {
    check_tol(tol, alpha)?;
    check_variant(constants, &[EstimatorKind::Dlmc])?;
    let p = Problem::new(constants, tol, alpha, opts);
    let candidate = if !p.meshed {
        nested_meshless(&p)
    } else {
        dlmc_meshed(&p)
    };
    Ok(attach_crosscheck(&p, closed_or_fallback(&p, alpha, candidate)))
}

fn dlmc_meshed(p: &Problem) -> std::result::Result<Point, String> {
    let r = p.ratio();
    let g = 1.0 + r / 2.0;
    let a = g * g * p.tol / (2.0 * p.c1);
    let b = 0.5 + (1.0 - p.tol / p.c1) * g;
    let c = 1.0 + p.tol / (2.0 * p.c1);
    let roots = unit_roots(a, b, c);
    let pts: Vec<Point> = roots
        .iter()
        .filter_map(|&k| {
            let denom = 1.0 - k * g;
            if denom <= 0.0 {
                return None;
            }
            let n = p.ca * p.ca / (2.0 * k) * p.c1 / denom / (p.tol * p.tol);
            let m = p.c2 / (2.0 * denom) / p.tol;
            let h = (r * k / (2.0 * p.c3)).powf(1.0 / p.eta) * p.tol.powf(1.0 / p.eta);
            (n > 0.0 && m > 0.0 && h > 0.0).then_some(Point { kappa: k, n: n.max(1.0), m: m.max(1.0), h: Some(h) })
        })
        .collect();
    best_of(p, &pts).ok_or_else(|| "no admissible root of the DLMC kappa quadratic in (0, 1)".into())
}

/// DLMCIS tuner. `kappa` solves the nested polynomial; `N`, `M`, `h` follow
/// the classical closed forms on meshes and the derived ones without.
pub fn optimal_setting_dlmcis(constants: &PilotConstants, tol: f64, alpha: f64, opts: &TuneOptions) -> Result<OptimalSetting> {
    check_tol(tol, alpha)?;
    check_variant(constants, &[EstimatorKind::Dlmcis, EstimatorKind::Dlmc])?;
    let p = Problem::new(constants, tol, alpha, opts);
    let candidate = if !p.meshed { nested_meshless(&p) } else { dlmcis_meshed(&p) };
    Ok(attach_crosscheck(&p, closed_or_fallback(&p, alpha, candidate)))
}

fn dlmcis_meshed(p: &Problem) -> std::result::Result<Point, String> {
    if !(p.c1 > 0.0) {
        return Err("C1 is zero; closed form undefined".into());
    }
    let r = p.ratio();
    let g = 1.0 + r / 2.0;
    let roots = nested_kappa_roots(p.c1, p.c2, p.c4, r, p.tol);
    let pts: Vec<Point> = roots
        .iter()
        .filter_map(|&k| {
            let denom = 1.0 - k * g;
            if denom <= 0.0 {
                return None;
            }
            let base = p.c1 * p.ca * p.ca / (k * k);
            let n = base / (p.tol * p.tol) + denom * base / p.tol;
            let m = if p.c4 == 0.0 { 1.0 } else { p.c4 / denom / p.tol };
            let h = (r * k / (2.0 * p.c3)).powf(1.0 / p.eta) * p.tol.powf(1.0 / p.eta);
            (h > 0.0).then_some(Point { kappa: k, n: n.max(1.0), m: m.max(1.0), h: Some(h) })
        })
        .collect();
    best_of(p, &pts).ok_or_else(|| "no admissible root of the DLMCIS kappa polynomial in (0, 1)".into())
}

/// MCLA tuner with the Laplace-bias feasibility wall `TOL > C_la2 / N_e`.
pub fn optimal_setting_mcla(constants: &PilotConstants, tol: f64, alpha: f64, opts: &TuneOptions) -> Result<OptimalSetting> {
    check_tol(tol, alpha)?;
    check_variant(constants, &[EstimatorKind::Mcla])?;
    let p = Problem::new(constants, tol, alpha, opts);
    let r = p.ratio();
    if opts.force_kappa1 {
        let h = p.meshed.then(|| ((r / (2.0 * p.c3)).powf(1.0 / p.eta) * tol.powf(1.0 / p.eta)).min(p.h_max));
        let pt = Point { kappa: 1.0, n: p.n_for(1.0, 1.0), m: 1.0, h };
        let mut out = p.finish(&pt, Solver::ClosedForm, alpha);
        out.bias_constraint_waived = true;
        return Ok(out);
    }
    let floor = p.fixed_bias;
    if tol <= floor {
        return Ok(infeasible(
            &p,
            alpha,
            Solver::ClosedForm,
            format!(
                "no MCLA setting meets TOL = {tol:e}: the Laplace bias C_la2/N_e = {floor:e} (N_e = {}) exceeds the tolerance; increase N_e, raise TOL, or use dlmcis",
                constants.n_e
            ),
        ));
    }
    let candidate = if !p.meshed {
        let k = 1.0 - floor / tol;
        p.point(k, None).ok_or_else(|| "degenerate constants".to_string())
    } else {
        let k = (1.0 - floor / tol) / (1.0 + r / 2.0);
        let h = (r * k / (2.0 * p.c3)).powf(1.0 / p.eta) * tol.powf(1.0 / p.eta);
        let n = 2.0 / r * p.c1 * (1.0 - k) / k.powi(3) * p.ca / (tol * tol)
            - 2.0 / r * p.c1 * floor / k.powi(3) * p.ca * p.ca / tol.powi(3);
        if n > 0.0 && h > 0.0 {
            Ok(Point { kappa: k, n: n.max(1.0), m: 1.0, h: Some(h) })
        } else {
            Err(format!("closed form gives non-positive N = {n:e}"))
        }
    };
    Ok(attach_crosscheck(&p, closed_or_fallback(&p, alpha, candidate)))
}

/// Dispatches to the tuner of the constants' variant.
pub fn optimal_setting(constants: &PilotConstants, tol: f64, alpha: f64, opts: &TuneOptions) -> Result<OptimalSetting> {
    match constants.variant {
        EstimatorKind::Dlmc => optimal_setting_dlmc(constants, tol, alpha, opts),
        EstimatorKind::Dlmcis => optimal_setting_dlmcis(constants, tol, alpha, opts),
        EstimatorKind::Mcla => optimal_setting_mcla(constants, tol, alpha, opts),
    }
}

/// Checks both constraints of `setting` against `constants`; `Err` carries a description.
pub fn verify_setting(constants: &PilotConstants, setting: &EstimatorSetting, opts: &TuneOptions) -> std::result::Result<(), String> {
    let p = Problem::new(constants, setting.tol, setting.alpha, opts);
    p.verify(setting)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constants(variant: EstimatorKind, c1: f64, c2: f64, c4: f64) -> PilotConstants {
        PilotConstants {
            variant,
            c1,
            c2,
            c3: 0.0,
            c4,
            eta: 1.0,
            gamma: 0.0,
            c_la2: 0.0,
            laplace_bias: 0.0,
            laplace_bias_std_error: 0.0,
            n_e: 1,
            outer_overhead: if variant == EstimatorKind::Mcla { 2.0 } else { 1.0 },
            pilot_n: 100,
            pilot_m: 100,
            pilot_seed: 0,
            pilot_h: None,
        }
    }

    fn meshed(mut c: PilotConstants, c3: f64, eta: f64, gamma: f64) -> PilotConstants {
        c.c3 = c3;
        c.eta = eta;
        c.gamma = gamma;
        c
    }

    #[test]
    fn meshless_kappa_is_two_thirds_without_c2() {
        let c = constants(EstimatorKind::Dlmc, 1.5, 0.0, 5.0);
        for tol in [1.0, 0.1, 1e-3] {
            let s = optimal_setting_dlmc(&c, tol, 0.05, &TuneOptions::default()).unwrap();
            assert!((s.setting.kappa - 2.0 / 3.0).abs() < 1e-12);
            assert_eq!(s.solver, Solver::ClosedForm);
        }
    }

    #[test]
    fn huge_tolerance_gives_unit_sizes() {
        let c = constants(EstimatorKind::Dlmc, 1.4, 5.0, 7.0);
        let s = optimal_setting_dlmc(&c, 1e3, 0.05, &TuneOptions::default()).unwrap();
        assert_eq!((s.setting.n, s.setting.m), (1, 1));
    }

    #[test]
    fn perfect_proposal_needs_one_inner_sample() {
        let c = constants(EstimatorKind::Dlmcis, 1.0, 0.0, 0.0);
        let s = optimal_setting_dlmcis(&c, 0.01, 0.05, &TuneOptions::default()).unwrap();
        assert_eq!(s.setting.m, 1);
        assert!(s.feasible);
    }

    #[test]
    fn asymptotic_scaling() {
        let c = constants(EstimatorKind::Dlmc, 1.4, 5.0, 7.0);
        let a = optimal_setting_dlmc(&c, 1e-4, 0.05, &TuneOptions::default()).unwrap().setting;
        let b = optimal_setting_dlmc(&c, 2e-4, 0.05, &TuneOptions::default()).unwrap().setting;
        let sn = (b.n as f64 / a.n as f64).log2();
        let sm = (b.m as f64 / a.m as f64).log2();
        assert!((sn + 2.0).abs() < 0.1, "N slope {sn}");
        assert!((sm + 1.0).abs() < 0.1, "M slope {sm}");
    }

    #[test]
    fn mcla_wall_and_bias_free_limit() {
        let mut c = constants(EstimatorKind::Mcla, 0.3, 0.0, 0.0);
        c.c_la2 = 0.05;
        let s = optimal_setting_mcla(&c, 0.04, 0.05, &TuneOptions::default()).unwrap();
        assert!(!s.feasible);
        assert!(s.message.unwrap().contains("Laplace bias"));
        let f = numeric_fallback(&c, 0.04, 0.05, &TuneOptions::default()).unwrap();
        assert!(!f.feasible);
        c.c_la2 = 0.0;
        let s = optimal_setting_mcla(&c, 0.01, 0.05, &TuneOptions::default()).unwrap();
        assert_eq!(s.setting.kappa, 1.0);
        let ca = c_alpha(0.05);
        assert_eq!(s.setting.n, (0.3 * ca * ca / 1e-4f64).ceil() as usize);
    }

    #[test]
    fn force_kappa1_ignores_wall() {
        let mut c = constants(EstimatorKind::Mcla, 0.3, 0.0, 0.0);
        c.c_la2 = 0.05;
        let s = optimal_setting_mcla(&c, 1e-3, 0.05, &TuneOptions { force_kappa1: true, ..Default::default() }).unwrap();
        assert!(s.feasible && s.bias_constraint_waived);
        assert_eq!(s.setting.kappa, 1.0);
    }

    #[test]
    fn closed_form_matches_numeric() {
        let c = constants(EstimatorKind::Dlmc, 1.4, 5.0, 7.0);
        for tol in [1.0, 0.1, 0.01] {
            let s = optimal_setting_dlmc(&c, tol, 0.05, &TuneOptions::default()).unwrap();
            let r = s.crosscheck_ratio.unwrap();
            assert!((r - 1.0).abs() < 0.05, "tol {tol}: ratio {r}");
        }
    }

    #[test]
    fn numeric_recovers_single_constraint_solution() {
        let c = constants(EstimatorKind::Dlmc, 2.0, 0.0, 3.0);
        let tol = 0.01;
        let s = numeric_fallback(&c, tol, 0.05, &TuneOptions::default()).unwrap();
        let k = s.setting.kappa;
        assert!((k - 2.0 / 3.0).abs() < 1e-3);
        let ca = c_alpha(0.05);
        let n = 2.0 * ca * ca / (k * tol).powi(2);
        assert!((s.setting.n as f64 / n - 1.0).abs() < 1e-3);
    }

    #[test]
    fn meshed_settings_verify() {
        for variant in [EstimatorKind::Dlmc, EstimatorKind::Dlmcis] {
            let c = meshed(constants(variant, 1.4, 5.0, 7.0), 0.5, 1.0, 1.0);
            for tol in [1.0, 0.1, 0.01, 1e-3] {
                let s = optimal_setting(&c, tol, 0.05, &TuneOptions::default()).unwrap();
                assert!(s.feasible);
                verify_setting(&c, &s.setting, &TuneOptions::default()).unwrap();
                assert!(matches!(s.setting.mesh, Mesh::Size(_)));
            }
        }
        let mut c = meshed(constants(EstimatorKind::Mcla, 0.3, 0.0, 0.0), 0.5, 1.0, 1.0);
        c.c_la2 = 1e-3;
        for tol in [1.0, 0.1, 0.01] {
            let s = optimal_setting(&c, tol, 0.05, &TuneOptions::default()).unwrap();
            assert!(s.feasible, "{s:?}");
            verify_setting(&c, &s.setting, &TuneOptions::default()).unwrap();
        }
    }

    #[test]
    fn dlmcis_polynomial_reduces_to_classical_split() {
        let c = meshed(constants(EstimatorKind::Dlmcis, 1.0, 0.0, 0.1), 0.5, 1.0, 2.0);
        let s = optimal_setting_dlmcis(&c, 1e-3, 0.05, &TuneOptions::default()).unwrap();
        assert!((s.setting.kappa - 0.4).abs() < 1e-9, "kappa {}", s.setting.kappa);
    }
}
