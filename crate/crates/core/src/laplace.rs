//! MAP estimation, finite-difference Jacobians and the Gaussian (Laplace)
//! approximation of the posterior.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{Dataset, ExperimentSpec, Mesh, Work};
use crate::rng::StreamRng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FdKind {
    Forward,
    Backward,
    Central,
}

/// Finite-difference scheme with a relative step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdScheme {
    pub kind: FdKind,
    pub step: f64,
}

impl Default for FdScheme {
    fn default() -> Self {
        Self { kind: FdKind::Central, step: f64::EPSILON.cbrt() }
    }
}

impl FdScheme {
    pub fn new(kind: FdKind, step: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
        }
        Ok(Self { kind, step })
    }

    /// Model evaluations per Jacobian: `d + 1` one-sided, `2d` central.
    pub fn n_jac(&self, d: usize) -> usize {
        match self.kind {
            FdKind::Forward | FdKind::Backward => d + 1,
            FdKind::Central => 2 * d,
        }
    }
}

/// Scratch buffers reused across Jacobian evaluations.
#[derive(Debug, Default)]
pub(crate) struct JacScratch {
    point: Vec<f64>,
    gp: Vec<f64>,
    gm: Vec<f64>,
}

/// Fills `out` (row-major `q x d`) with `J = -grad g` at `theta`.
///
/// `g0`, when given, must hold `g(theta)` and is reused instead of re-evaluated.
/// Steps are clipped to the prior box when the prior is uniform.
#[allow(clippy::too_many_arguments)]
pub(crate) fn jacobian_into(
    spec: &ExperimentSpec,
    theta: &[f64],
    g0: Option<&[f64]>,
    mesh: Mesh,
    scheme: FdScheme,
    scratch: &mut JacScratch,
    work: &mut Work,
    out: &mut [f64],
) -> Result<()> {
    let (d, q) = (spec.d(), spec.q());
    scratch.point.clear();
    scratch.point.extend_from_slice(theta);
    scratch.gp.resize(q, 0.0);
    scratch.gm.resize(q, 0.0);
    let mut base: Option<Vec<f64>> = None;
    let mut base_value = |work: &mut Work| -> Result<Vec<f64>> {
        if let Some(g) = g0 {
            return Ok(g.to_vec());
        }
        if base.is_none() {
            let mut g = vec![0.0; q];
            spec.eval(theta, mesh, &mut g, work)?;
            base = Some(g);
        }
        Ok(base.clone().unwrap())
    };
    let bounds = spec.prior.bounds();
    for j in 0..d {
        let t = theta[j];
        let s = scheme.step * t.abs().max(1.0);
        if !s.is_finite() || t + s == t || t - s == t {
            return Err(Error::StepUnderflow { component: j, value: t });
        }
        let (lo, hi) = bounds.map(|(l, u)| (l[j], u[j])).unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
        let (xp, xm) = match scheme.kind {
            FdKind::Central => ((t + s).min(hi), (t - s).max(lo)),
            FdKind::Forward => {
                if t + s <= hi {
                    (t + s, t)
                } else {
                    (t, t - s)
                }
            }
            FdKind::Backward => {
                if t - s >= lo {
                    (t, t - s)
                } else {
                    (t + s, t)
                }
            }
        };
        let width = xp - xm;
        if !(width > 0.0) {
            return Err(Error::StepUnderflow { component: j, value: t });
        }
        if xp == t {
            scratch.gp.copy_from_slice(&base_value(work)?);
        } else {
            scratch.point[j] = xp;
            spec.eval(&scratch.point, mesh, &mut scratch.gp, work)?;
        }
        if xm == t {
            scratch.gm.copy_from_slice(&base_value(work)?);
        } else {
            scratch.point[j] = xm;
            spec.eval(&scratch.point, mesh, &mut scratch.gm, work)?;
        }
        scratch.point[j] = t;
        for i in 0..q {
            out[i * d + j] = -(scratch.gp[i] - scratch.gm[i]) / width;
        }
    }
    Ok(())
}

/// Finite-difference Jacobian `J = -grad g` (`q x d`) and the number of
/// evaluations it consumed (`d + 1` or `2d`).
pub fn jacobian(
    spec: &ExperimentSpec,
    theta: &[f64],
    mesh: Mesh,
    scheme: FdScheme,
    work: &mut Work,
) -> Result<(DMatrix<f64>, u64)> {
    let (d, q) = (spec.d(), spec.q());
    if theta.len() != d {
        return Err(Error::Dimension { what: "theta", expected: d, got: theta.len() });
    }
    let before = work.evals;
    let mut out = vec![0.0; q * d];
    jacobian_into(spec, theta, None, mesh, scheme, &mut JacScratch::default(), work, &mut out)?;
    Ok((DMatrix::from_row_slice(q, d, &out), work.evals - before))
}

/// Posterior precision `N_e J^T Sigma_eps^-1 J - hess log pi`.
pub fn laplace_precision(spec: &ExperimentSpec, theta: &[f64], j: &DMatrix<f64>) -> DMatrix<f64> {
    let _ = theta;
    let (d, q) = (spec.d(), spec.q());
    let w = spec.noise.inverse_variances();
    let ne = spec.n_e as f64;
    let mut p = -spec.prior.hess_log_pdf();
    for a in 0..d {
        for b in a..d {
            let s: f64 = (0..q).map(|i| j[(i, a)] * w[i] * j[(i, b)]).sum();
            p[(a, b)] += ne * s;
            if a != b {
                p[(b, a)] += ne * s;
            }
        }
    }
    p
}

/// Covariance of the Laplace approximation, its Cholesky factor and log-determinant.
#[derive(Debug, Clone)]
pub struct LaplaceCovariance {
    pub cov: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    pub log_det: f64,
}

fn covariance_from_precision(precision: DMatrix<f64>) -> Result<LaplaceCovariance> {
    let p = (&precision + precision.transpose()) * 0.5;
    let finite = p.iter().all(|v| v.is_finite());
    let spectrum = |m: &DMatrix<f64>| {
        if m.iter().all(|v| v.is_finite()) {
            let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
            ev.sort_by(|a, b| a.total_cmp(b));
            ev
        } else {
            vec![f64::NAN; m.nrows()]
        }
    };
    if !finite {
        return Err(Error::NotPositiveDefinite { spectrum: spectrum(&p) });
    }
    let d = p.nrows();
    if d == 1 {
        let v = p[(0, 0)];
        if !(v > 0.0) {
            return Err(Error::NotPositiveDefinite { spectrum: vec![v] });
        }
        let c = 1.0 / v;
        return Ok(LaplaceCovariance {
            cov: DMatrix::from_element(1, 1, c),
            chol: DMatrix::from_element(1, 1, c.sqrt()),
            log_det: c.ln(),
        });
    }
    let chol_p = Cholesky::new(p.clone()).ok_or_else(|| Error::NotPositiveDefinite { spectrum: spectrum(&p) })?;
    let min_diag = chol_p.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, b| a.min(b.abs()));
    let max_diag = chol_p.l_dirty().diagonal().amax();
    if !(min_diag > max_diag * 1e-8) {
        return Err(Error::NotPositiveDefinite { spectrum: spectrum(&p) });
    }
    let mut cov = chol_p.inverse();
    cov = (&cov + cov.transpose()) * 0.5;
    let chol = Cholesky::new(cov.clone()).ok_or_else(|| Error::NotPositiveDefinite { spectrum: spectrum(&p) })?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(LaplaceCovariance { cov, chol: chol.l(), log_det })
}

/// `Sigma_hat = (N_e J^T Sigma_eps^-1 J - hess log pi)^-1`, symmetrized.
pub fn laplace_covariance(spec: &ExperimentSpec, theta: &[f64], j: &DMatrix<f64>) -> Result<LaplaceCovariance> {
    if j.nrows() != spec.q() || j.ncols() != spec.d() {
        return Err(Error::Dimension { what: "Jacobian rows", expected: spec.q(), got: j.nrows() });
    }
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("Jacobian has non-finite entries"));
    }
    covariance_from_precision(laplace_precision(spec, theta, j))
}

/// Optimizer settings for the MAP search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the Newton decrement `sqrt(g^T H^-1 g)`.
    pub gradient_tol: f64,
    /// Random prior draws used as extra starting points.
    pub extra_starts: usize,
    pub fd: FdScheme,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self { max_iterations: 100, gradient_tol: 1e-8, extra_starts: 2, fd: FdScheme::default() }
    }
}

/// Result of a MAP search together with the Laplace covariance at the MAP.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub theta_hat: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    pub log_det_cov: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// MAP lies on the boundary of a uniform prior box.
    pub boundary: bool,
    pub n_evals: u64,
}

/// Reusable buffers for MAP searches; one per worker thread.
#[derive(Debug, Default)]
pub struct MapWorkspace {
    jac: JacScratch,
    g: Vec<f64>,
    g_trial: Vec<f64>,
    theta: Vec<f64>,
    trial: Vec<f64>,
    j: Vec<f64>,
    grad: Vec<f64>,
    prior_grad: Vec<f64>,
    resid_sum: Vec<f64>,
    best_theta: Vec<f64>,
    best_j: Vec<f64>,
    free: Vec<usize>,
}

struct StartResult {
    objective: f64,
    iterations: usize,
    converged: bool,
}

fn objective(spec: &ExperimentSpec, data: &Dataset, theta: &[f64], g: &[f64]) -> f64 {
    let lp = spec.prior.log_pdf(theta);
    0.5 * data.weighted_sq_dist(g, spec.noise.inverse_variances()) - lp
}

fn project(spec: &ExperimentSpec, theta: &mut [f64]) {
    if let Some((lo, hi)) = spec.prior.bounds() {
        for ((t, l), h) in theta.iter_mut().zip(lo).zip(hi) {
            *t = t.clamp(*l, *h);
        }
    }
}

/// Gauss-Newton with backtracking and box projection from one start. On
/// return `ws.theta`, `ws.g` and `ws.j` hold the final point, response and Jacobian.
fn gauss_newton(
    spec: &ExperimentSpec,
    data: &Dataset,
    mesh: Mesh,
    opts: &MapOptions,
    ws: &mut MapWorkspace,
    work: &mut Work,
) -> Result<StartResult> {
    let (d, q) = (spec.d(), spec.q());
    let w = spec.noise.inverse_variances();
    let ne = spec.n_e as f64;
    let bounds = spec.prior.bounds();
    project(spec, &mut ws.theta);
    spec.eval(&ws.theta, mesh, &mut ws.g, work)?;
    let mut f = objective(spec, data, &ws.theta, &ws.g);
    let mut iterations = 0;
    let mut converged = false;
    loop {
        jacobian_into(spec, &ws.theta, Some(&ws.g), mesh, opts.fd, &mut ws.jac, work, &mut ws.j)?;
        // Gradient of F: J^T W sum_i (y_i - g) - grad log pi.
        for ((r, m), g) in ws.resid_sum.iter_mut().zip(data.mean_row()).zip(&ws.g) {
            *r = ne * (m - g);
        }
        spec.prior.grad_log_pdf(&ws.theta, &mut ws.prior_grad);
        for a in 0..d {
            ws.grad[a] = (0..q).map(|k| ws.j[k * d + a] * w[k] * ws.resid_sum[k]).sum::<f64>() - ws.prior_grad[a];
        }
        // Free set: drop components held at a bound by an outward-pointing descent direction.
        ws.free.clear();
        for a in 0..d {
            let held = match bounds {
                Some((lo, hi)) => (ws.theta[a] <= lo[a] && ws.grad[a] > 0.0) || (ws.theta[a] >= hi[a] && ws.grad[a] < 0.0),
                None => false,
            };
            if !held {
                ws.free.push(a);
            }
        }
        let k = ws.free.len();
        if k == 0 {
            converged = true;
            break;
        }
        let (step, decrement) = if k == 1 {
            // Scalar Newton step without matrix allocations.
            let a = ws.free[0];
            let s: f64 = (0..q).map(|i| ws.j[i * d + a] * ws.j[i * d + a] * w[i]).sum();
            let mut h = ne * s + spec.prior.neg_hess_entry(a, a);
            if !(h > 0.0) {
                h = h.abs().max(ne * 1e-12) * 1e-6 + 1e-300;
            }
            let g = ws.grad[a];
            (DVector::from_element(1, g / h), (g * g / h).max(0.0).sqrt())
        } else {
            let idx = &ws.free;
            let jm = DMatrix::from_row_slice(q, d, &ws.j);
            let prec = laplace_precision(spec, &ws.theta, &jm);
            let h = DMatrix::from_fn(k, k, |r, c| prec[(idx[r], idx[c])]);
            let gvec = DVector::from_fn(k, |r, _| ws.grad[idx[r]]);
            let step = match Cholesky::new(h.clone()) {
                Some(ch) => ch.solve(&gvec),
                None => {
                    // Levenberg damping when the Gauss-Newton matrix is singular.
                    let scale = h.diagonal().amax().max(ne * 1e-12);
                    let damped = &h + DMatrix::identity(k, k) * (scale * 1e-6 + 1e-300);
                    match Cholesky::new(damped) {
                        Some(ch) => ch.solve(&gvec),
                        None => gvec.clone(),
                    }
                }
            };
            let dec = gvec.dot(&step).max(0.0).sqrt();
            (step, dec)
        };
        if decrement <= opts.gradient_tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        iterations += 1;
        // Backtracking line search along the projected path.
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-12 {
            ws.trial.copy_from_slice(&ws.theta);
            for (r, &a) in ws.free.iter().enumerate() {
                ws.trial[a] -= alpha * step[r];
            }
            project(spec, &mut ws.trial);
            let moved: f64 = (0..d).map(|a| ws.grad[a] * (ws.trial[a] - ws.theta[a])).sum();
            if ws.trial == ws.theta {
                break;
            }
            spec.eval(&ws.trial, mesh, &mut ws.g_trial, work)?;
            let ft = objective(spec, data, &ws.trial, &ws.g_trial);
            if ft <= f + 1e-4 * moved {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // No further decrease representable: accept as converged when the decrement is small.
            converged = decrement <= opts.gradient_tol.sqrt();
            break;
        }
        std::mem::swap(&mut ws.theta, &mut ws.trial);
        std::mem::swap(&mut ws.g, &mut ws.g_trial);
        f = objective(spec, data, &ws.theta, &ws.g);
    }
    Ok(StartResult { objective: f, iterations, converged })
}

/// Minimizes `F(theta) = 1/2 sum_i ||y_i - g(theta)||^2_{Sigma_eps^-1} - log pi(theta)`
/// by multistart Gauss-Newton and builds the Laplace covariance at the minimizer.
pub fn fit_laplace(
    spec: &ExperimentSpec,
    data: &Dataset,
    mesh: Mesh,
    opts: &MapOptions,
    rng: &mut StreamRng,
    ws: &mut MapWorkspace,
    work: &mut Work,
) -> Result<LaplaceFit> {
    let (d, q) = (spec.d(), spec.q());
    if data.n_e() == 0 {
        return Err(Error::invalid("dataset is empty"));
    }
    let before = work.evals;
    for v in [&mut ws.g, &mut ws.g_trial, &mut ws.resid_sum] {
        v.resize(q, 0.0);
    }
    for v in [&mut ws.theta, &mut ws.trial, &mut ws.grad, &mut ws.prior_grad] {
        v.resize(d, 0.0);
    }
    ws.j.resize(q * d, 0.0);
    let mut best: Option<StartResult> = None;
    let mut total_iter = 0;
    for start in 0..=opts.extra_starts {
        if start == 0 {
            ws.theta.copy_from_slice(&spec.prior.center());
        } else {
            spec.prior.sample(rng, &mut ws.theta);
        }
        let r = gauss_newton(spec, data, mesh, opts, ws, work)?;
        total_iter += r.iterations;
        let better = match &best {
            None => true,
            Some(b) => (r.converged && !b.converged) || (r.converged == b.converged && r.objective < b.objective),
        };
        if better {
            ws.best_theta.clone_from(&ws.theta);
            ws.best_j.clone_from(&ws.j);
            best = Some(r);
        }
    }
    let best = best.expect("at least one start");
    let jm = DMatrix::from_row_slice(q, d, &ws.best_j);
    let lc = laplace_covariance(spec, &ws.best_theta, &jm)?;
    let boundary = match spec.prior.bounds() {
        Some((lo, hi)) => ws.best_theta.iter().zip(lo.iter().zip(hi)).any(|(t, (l, h))| t <= l || t >= h),
        None => false,
    };
    Ok(LaplaceFit {
        theta_hat: ws.best_theta.clone(),
        cov: lc.cov,
        chol: lc.chol,
        log_det_cov: lc.log_det,
        objective: best.objective,
        iterations: total_iter,
        converged: best.converged,
        boundary,
        n_evals: work.evals - before,
    })
}

/// MAP search only; convenience wrapper returning the fit's point estimate.
pub fn find_map(
    spec: &ExperimentSpec,
    data: &Dataset,
    mesh: Mesh,
    opts: &MapOptions,
    rng: &mut StreamRng,
    work: &mut Work,
) -> Result<LaplaceFit> {
    fit_laplace(spec, data, mesh, opts, rng, &mut MapWorkspace::default(), work)
}

/// Whether the Laplace proposal is cut to the prior box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalSupport {
    /// Truncate to the box of a uniform prior when the covariance is diagonal;
    /// otherwise identical to `Unbounded`.
    TruncatedToPrior,
    /// Plain multivariate normal on all of `R^d`.
    Unbounded,
}

#[derive(Debug, Clone)]
struct Truncation {
    lower: Vec<f64>,
    upper: Vec<f64>,
    cdf_lo: Vec<f64>,
    mass: Vec<f64>,
    log_mass: f64,
}

/// Gaussian importance density `N(theta_hat, Sigma_hat)`, optionally truncated.
#[derive(Debug, Clone)]
pub struct LaplaceProposal {
    mean: Vec<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
    truncation: Option<Truncation>,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

impl LaplaceProposal {
    pub fn new(mean: Vec<f64>, chol: DMatrix<f64>, log_det: f64) -> Self {
        let d = mean.len();
        Self { mean, chol, log_norm: -0.5 * (d as f64 * LN_2PI + log_det), truncation: None }
    }

    pub fn from_fit(fit: &LaplaceFit, spec: &ExperimentSpec, support: ProposalSupport) -> Self {
        let mut p = Self::new(fit.theta_hat.clone(), fit.chol.clone(), fit.log_det_cov);
        if support == ProposalSupport::TruncatedToPrior {
            if let Some((lo, hi)) = spec.prior.bounds() {
                let d = p.mean.len();
                let diagonal = (0..d).all(|i| (0..i).all(|j| p.chol[(i, j)] == 0.0));
                if diagonal {
                    p.truncate(lo, hi);
                }
            }
        }
        p
    }

    fn truncate(&mut self, lo: &[f64], hi: &[f64]) {
        let n = std_normal();
        let d = self.mean.len();
        let mut cdf_lo = Vec::with_capacity(d);
        let mut mass = Vec::with_capacity(d);
        for j in 0..d {
            let s = self.chol[(j, j)];
            let a = n.cdf((lo[j] - self.mean[j]) / s);
            // Upper tail via the complement keeps precision when the box edge is far out.
            let b_sf = n.sf((hi[j] - self.mean[j]) / s);
            cdf_lo.push(a);
            mass.push((1.0 - b_sf) - a);
        }
        let log_mass = mass.iter().map(|m| m.ln()).sum();
        self.truncation = Some(Truncation { lower: lo.to_vec(), upper: hi.to_vec(), cdf_lo, mass, log_mass });
    }

    pub fn is_truncated(&self) -> bool {
        self.truncation.is_some()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sample(&self, rng: &mut StreamRng, out: &mut [f64]) {
        let d = self.mean.len();
        match &self.truncation {
            None => {
                let mut z = [0.0f64; 16];
                let z: &mut [f64] = if d <= 16 { &mut z[..d] } else { &mut vec![0.0; d][..] };
                for zi in z.iter_mut() {
                    *zi = rng.sample(StandardNormal);
                }
                for (i, o) in out.iter_mut().enumerate().take(d) {
                    *o = self.mean[i] + (0..=i).map(|j| self.chol[(i, j)] * z[j]).sum::<f64>();
                }
            }
            Some(t) => {
                let n = std_normal();
                for (j, o) in out.iter_mut().enumerate().take(d) {
                    let u = t.cdf_lo[j] + t.mass[j] * rng.random::<f64>();
                    let z = n.inverse_cdf(u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0));
                    *o = (self.mean[j] + self.chol[(j, j)] * z).clamp(t.lower[j], t.upper[j]);
                }
            }
        }
    }

    pub fn log_pdf(&self, theta: &[f64]) -> f64 {
        let d = self.mean.len();
        if let Some(t) = &self.truncation {
            if theta.iter().zip(t.lower.iter().zip(&t.upper)).any(|(x, (l, h))| x < l || x > h) {
                return f64::NEG_INFINITY;
            }
        }
        // Whitened residual by forward substitution.
        let mut q = 0.0;
        let mut z = [0.0f64; 16];
        let mut zv;
        let z: &mut [f64] = if d <= 16 {
            &mut z[..d]
        } else {
            zv = vec![0.0; d];
            &mut zv[..]
        };
        for i in 0..d {
            let s: f64 = (0..i).map(|j| self.chol[(i, j)] * z[j]).sum();
            z[i] = (theta[i] - self.mean[i] - s) / self.chol[(i, i)];
            q += z[i] * z[i];
        }
        let lm = self.truncation.as_ref().map(|t| t.log_mass).unwrap_or(0.0);
        self.log_norm - 0.5 * q - lm
    }
}
