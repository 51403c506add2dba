//! Expected information gain estimators: double-loop Monte Carlo (DLMC),
//! Monte Carlo with the Laplace approximation (MCLA) and double-loop Monte
//! Carlo with Laplace-based importance sampling (DLMCIS).

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::laplace::{fit_laplace, jacobian_into, laplace_covariance, FdScheme, JacScratch, LaplaceProposal, MapOptions, MapWorkspace, ProposalSupport};
use crate::model::{simulate_data, simulate_data_with_response, Dataset, ExperimentSpec, Mesh, Work};
use crate::rng::{substream, Purpose};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const CHUNK: usize = 8192;

/// `log` of the smallest positive normal `f64`; inner sets whose largest
/// log-likelihood falls below it would underflow to zero in linear domain.
pub fn underflow_threshold() -> f64 {
    f64::MIN_POSITIVE.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Dlmc,
    Mcla,
    Dlmcis,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Dlmc, EstimatorKind::Mcla, EstimatorKind::Dlmcis];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Dlmc => "dlmc",
            EstimatorKind::Mcla => "mcla",
            EstimatorKind::Dlmcis => "dlmcis",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dlmc" => Ok(EstimatorKind::Dlmc),
            "mcla" => Ok(EstimatorKind::Mcla),
            "dlmcis" => Ok(EstimatorKind::Dlmcis),
            other => Err(Error::invalid(format!("unknown estimator '{other}' (expected dlmc, mcla or dlmcis)"))),
        }
    }
}

/// `C_alpha = Phi^-1(1 - alpha/2)`.
pub fn c_alpha(alpha: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - alpha / 2.0)
}

/// Sample sizes, mesh and error split for one estimator run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSetting {
    pub n: usize,
    pub m: usize,
    pub mesh: Mesh,
    pub kappa: f64,
    pub tol: f64,
    pub alpha: f64,
}

impl EstimatorSetting {
    /// Fixed sample sizes without a tolerance target.
    pub fn fixed(n: usize, m: usize) -> Self {
        Self { n, m, mesh: Mesh::Exact, kappa: 0.5, tol: f64::INFINITY, alpha: 0.05 }
    }

    pub fn with_mesh(mut self, mesh: Mesh) -> Self {
        self.mesh = mesh;
        self
    }

    pub fn c_alpha(&self) -> f64 {
        c_alpha(self.alpha)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.m < 1 {
            return Err(Error::invalid(format!("sample sizes must be >= 1 (N = {}, M = {})", self.n, self.m)));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::invalid(format!("error split kappa must lie in (0, 1], got {}", self.kappa)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("tolerance must be positive, got {}", self.tol)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if let Mesh::Size(h) = self.mesh {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::invalid(format!("mesh size must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

/// Importance density used for the inner loop of DLMCIS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalKind {
    /// Gaussian centered at the MAP with the Laplace covariance.
    Laplace,
    /// The prior itself (no change of measure).
    Prior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub map: MapOptions,
    /// Scheme for MCLA Jacobians.
    pub fd: FdScheme,
    pub proposal: ProposalKind,
    pub support: ProposalSupport,
    /// Keep the per-outer terms in the result.
    pub keep_terms: bool,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            map: MapOptions::default(),
            fd: FdScheme::default(),
            proposal: ProposalKind::Laplace,
            support: ProposalSupport::TruncatedToPrior,
            keep_terms: false,
        }
    }
}

/// Result of an estimator run. Values are in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigEstimate {
    pub estimator: EstimatorKind,
    pub value: f64,
    pub std_error: f64,
    /// Outer samples whose inner likelihoods would all underflow in linear domain.
    pub underflow_count: usize,
    /// Outer samples dropped from the average (singular Laplace covariance for
    /// MCLA, all-zero importance weights for DLMCIS).
    pub excluded_count: usize,
    /// DLMCIS: MAP searches that hit the iteration limit.
    pub map_nonconverged: usize,
    /// DLMCIS: MAP estimates on the prior box boundary.
    pub map_boundary: usize,
    /// DLMCIS: outer samples whose Laplace covariance failed and used the prior as proposal.
    pub proposal_fallbacks: usize,
    pub n_outer: usize,
    pub work_units: f64,
    pub evaluations: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_outer_terms: Option<Vec<f64>>,
}

/// `log(mean(exp(v)))` by max-shift. All-`-inf` input is an error.
pub fn log_mean_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::invalid("log_mean_exp of an empty vector"));
    }
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return Err(Error::AllNegativeInfinite);
    }
    if mx.is_nan() || mx == f64::INFINITY {
        return Err(Error::invalid("log_mean_exp input contains NaN or +inf"));
    }
    let s: f64 = v.iter().map(|x| (x - mx).exp()).sum();
    Ok(mx + (s / v.len() as f64).ln())
}

/// KL divergence between two univariate Gaussians, posterior from prior.
pub fn kl_gaussian_1d(mu_pr: f64, var_pr: f64, mu_post: f64, var_post: f64) -> Result<f64> {
    if !(var_pr > 0.0 && var_post > 0.0) {
        return Err(Error::invalid("variances must be positive"));
    }
    let dm = mu_post - mu_pr;
    Ok(0.5 * (var_pr / var_post).ln() + 0.5 * (var_post / var_pr - 1.0 + dm * dm / var_pr))
}

/// Per-outer-sample output shared by estimators and pilot runs.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct OuterRecord {
    pub term: f64,
    /// Sample variance of the normalized inner weights `w_m / mean(w)`.
    pub weight_var: f64,
    pub underflow: bool,
    pub excluded: bool,
    pub nonconverged: bool,
    pub boundary: bool,
    pub fallback: bool,
    pub work: Work,
}

#[derive(Default)]
pub(crate) struct Workspace {
    theta: Vec<f64>,
    inner: Vec<f64>,
    g: Vec<f64>,
    logw: Vec<f64>,
    jac: Vec<f64>,
    jac_scratch: JacScratch,
    map: MapWorkspace,
}

/// Parameter and dataset drawn for outer index `n` of a run with root `seed`.
/// All estimators share these draws for equal seeds.
pub fn outer_sample(spec: &ExperimentSpec, mesh: Mesh, seed: u64, n: u64) -> Result<(Vec<f64>, Dataset)> {
    let mut rng = substream(seed, Purpose::Outer, n, 0);
    let mut theta = vec![0.0; spec.d()];
    spec.prior.sample(&mut rng, &mut theta);
    let data = simulate_data(spec, &theta, mesh, &mut rng, &mut Work::default())?;
    Ok((theta, data))
}

fn summarize_weights(logw: &[f64], rec: &mut OuterRecord) -> Option<f64> {
    let mx = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    rec.underflow = mx < underflow_threshold();
    let lme = match log_mean_exp(logw) {
        Ok(v) => v,
        Err(_) => {
            rec.excluded = true;
            return None;
        }
    };
    let m = logw.len();
    if m > 1 {
        // Normalized weights have mean exactly one by construction.
        let ss: f64 = logw.iter().map(|l| {
            let r = (l - lme).exp() - 1.0;
            r * r
        }).sum();
        rec.weight_var = ss / (m - 1) as f64;
    }
    Some(lme)
}

fn dlmc_outer(
    spec: &ExperimentSpec,
    setting: &EstimatorSetting,
    seed: u64,
    n: u64,
    ws: &mut Workspace,
) -> Result<OuterRecord> {
    let mut rec = OuterRecord::default();
    let (d, q) = (spec.d(), spec.q());
    let mut rng = substream(seed, Purpose::Outer, n, 0);
    ws.theta.resize(d, 0.0);
    ws.inner.resize(d, 0.0);
    ws.g.resize(q, 0.0);
    spec.prior.sample(&mut rng, &mut ws.theta);
    let data = simulate_data_with_response(spec, &ws.theta, setting.mesh, &mut rng, &mut rec.work, &mut ws.g)?;
    let ll = spec.log_likelihood_at(&data, &ws.g);
    let mut rng_in = substream(seed, Purpose::Inner, n, 0);
    ws.logw.clear();
    for _ in 0..setting.m {
        spec.prior.sample(&mut rng_in, &mut ws.inner);
        spec.eval(&ws.inner, setting.mesh, &mut ws.g, &mut rec.work)?;
        ws.logw.push(spec.log_likelihood_at(&data, &ws.g));
    }
    if let Some(lme) = summarize_weights(&ws.logw, &mut rec) {
        rec.term = ll - lme;
    }
    Ok(rec)
}

fn dlmcis_outer(
    spec: &ExperimentSpec,
    setting: &EstimatorSetting,
    opts: &EstimatorOptions,
    seed: u64,
    n: u64,
    ws: &mut Workspace,
) -> Result<OuterRecord> {
    let mut rec = OuterRecord::default();
    let (d, q) = (spec.d(), spec.q());
    let mut rng = substream(seed, Purpose::Outer, n, 0);
    ws.theta.resize(d, 0.0);
    ws.inner.resize(d, 0.0);
    ws.g.resize(q, 0.0);
    spec.prior.sample(&mut rng, &mut ws.theta);
    let data = simulate_data_with_response(spec, &ws.theta, setting.mesh, &mut rng, &mut rec.work, &mut ws.g)?;
    let ll = spec.log_likelihood_at(&data, &ws.g);

    is_log_weights(spec, &data, setting.mesh, setting.m, opts, seed, n, ws, &mut rec)?;
    if let Some(lme) = summarize_weights(&ws.logw, &mut rec) {
        rec.term = ll - lme;
    }
    Ok(rec)
}

/// Fits the proposal for `data` and fills `ws.logw` with `M` importance
/// log-weights `log p(Y|theta_m) + log pi(theta_m) - log q(theta_m)`.
#[allow(clippy::too_many_arguments)]
fn is_log_weights(
    spec: &ExperimentSpec,
    data: &Dataset,
    mesh: Mesh,
    m: usize,
    opts: &EstimatorOptions,
    seed: u64,
    n: u64,
    ws: &mut Workspace,
    rec: &mut OuterRecord,
) -> Result<()> {
    ws.inner.resize(spec.d(), 0.0);
    ws.g.resize(spec.q(), 0.0);
    let proposal = match opts.proposal {
        ProposalKind::Prior => None,
        ProposalKind::Laplace => {
            let mut rng_map = substream(seed, Purpose::MapStart, n, 0);
            match fit_laplace(spec, data, mesh, &opts.map, &mut rng_map, &mut ws.map, &mut rec.work) {
                Ok(fit) => {
                    rec.nonconverged = !fit.converged;
                    rec.boundary = fit.boundary;
                    Some(LaplaceProposal::from_fit(&fit, spec, opts.support))
                }
                Err(Error::NotPositiveDefinite { .. }) => {
                    rec.fallback = true;
                    None
                }
                Err(e) => return Err(e),
            }
        }
    };

    let mut rng_in = substream(seed, Purpose::Inner, n, 0);
    ws.logw.clear();
    for _ in 0..m {
        let log_ratio = match &proposal {
            Some(p) => {
                p.sample(&mut rng_in, &mut ws.inner);
                let lp = spec.prior.log_pdf(&ws.inner);
                if lp == f64::NEG_INFINITY {
                    ws.logw.push(f64::NEG_INFINITY);
                    continue;
                }
                lp - p.log_pdf(&ws.inner)
            }
            None => {
                spec.prior.sample(&mut rng_in, &mut ws.inner);
                0.0
            }
        };
        spec.eval(&ws.inner, mesh, &mut ws.g, &mut rec.work)?;
        ws.logw.push(spec.log_likelihood_at(data, &ws.g) + log_ratio);
    }
    Ok(())
}

/// Importance-sampling estimate of `log p(Y)` with `m` draws from the
/// proposal configured in `opts`.
pub fn is_log_evidence(
    spec: &ExperimentSpec,
    data: &Dataset,
    mesh: Mesh,
    m: usize,
    seed: u64,
    opts: &EstimatorOptions,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::invalid("at least one inner sample is required"));
    }
    let mut ws = Workspace::default();
    let mut rec = OuterRecord::default();
    is_log_weights(spec, data, mesh, m, opts, seed, 0, &mut ws, &mut rec)?;
    log_mean_exp(&ws.logw)
}

fn mcla_outer(
    spec: &ExperimentSpec,
    setting: &EstimatorSetting,
    opts: &EstimatorOptions,
    seed: u64,
    n: u64,
    ws: &mut Workspace,
) -> Result<OuterRecord> {
    let mut rec = OuterRecord::default();
    let (d, q) = (spec.d(), spec.q());
    let mut rng = substream(seed, Purpose::Outer, n, 0);
    ws.theta.resize(d, 0.0);
    ws.jac.resize(q * d, 0.0);
    spec.prior.sample(&mut rng, &mut ws.theta);
    jacobian_into(spec, &ws.theta, None, setting.mesh, opts.fd, &mut ws.jac_scratch, &mut rec.work, &mut ws.jac)?;
    let j = nalgebra::DMatrix::from_row_slice(q, d, &ws.jac);
    match laplace_covariance(spec, &ws.theta, &j) {
        Ok(c) => {
            rec.term = -0.5 * (d as f64 * LN_2PI + c.log_det) - 0.5 * d as f64 - spec.prior.log_pdf(&ws.theta);
        }
        Err(Error::NotPositiveDefinite { .. }) => rec.excluded = true,
        Err(e) => return Err(e),
    }
    Ok(rec)
}

/// Runs `n_total` outer iterations in parallel and feeds the records to `sink`
/// in index order.
pub(crate) fn for_each_outer<F, S>(n_total: usize, f: F, mut sink: S) -> Result<()>
where
    F: Fn(u64, &mut Workspace) -> Result<OuterRecord> + Sync,
    S: FnMut(OuterRecord),
{
    let mut start = 0;
    while start < n_total {
        let end = (start + CHUNK).min(n_total);
        let recs: Vec<Result<OuterRecord>> =
            (start..end).into_par_iter().map_init(Workspace::default, |ws, n| f(n as u64, ws)).collect();
        for r in recs {
            sink(r?);
        }
        start = end;
    }
    Ok(())
}

pub(crate) fn outer_records(
    kind: EstimatorKind,
    spec: &ExperimentSpec,
    setting: &EstimatorSetting,
    seed: u64,
    opts: &EstimatorOptions,
) -> Result<Vec<OuterRecord>> {
    let mut out = Vec::with_capacity(setting.n);
    run(kind, spec, setting, seed, opts, |r| out.push(r))?;
    Ok(out)
}

fn run<S: FnMut(OuterRecord)>(
    kind: EstimatorKind,
    spec: &ExperimentSpec,
    setting: &EstimatorSetting,
    seed: u64,
    opts: &EstimatorOptions,
    sink: S,
) -> Result<()> {
    setting.validate()?;
    match kind {
        EstimatorKind::Dlmc => for_each_outer(setting.n, |n, ws| dlmc_outer(spec, setting, seed, n, ws), sink),
        EstimatorKind::Dlmcis => {
            for_each_outer(setting.n, |n, ws| dlmcis_outer(spec, setting, opts, seed, n, ws), sink)
        }
        EstimatorKind::Mcla => for_each_outer(setting.n, |n, ws| mcla_outer(spec, setting, opts, seed, n, ws), sink),
    }
}

/// Runs the chosen estimator. Deterministic in `seed` regardless of the
/// number of worker threads.
pub fn estimate(
    kind: EstimatorKind,
    spec: &ExperimentSpec,
    setting: &EstimatorSetting,
    seed: u64,
    opts: &EstimatorOptions,
) -> Result<EigEstimate> {
    let mut est = EigEstimate {
        estimator: kind,
        value: 0.0,
        std_error: 0.0,
        underflow_count: 0,
        excluded_count: 0,
        map_nonconverged: 0,
        map_boundary: 0,
        proposal_fallbacks: 0,
        n_outer: setting.n,
        work_units: 0.0,
        evaluations: 0,
        per_outer_terms: opts.keep_terms.then(Vec::new),
    };
    // Welford accumulation in index order.
    let (mut count, mut mean, mut m2) = (0usize, 0.0f64, 0.0f64);
    let mut work = Work::default();
    run(kind, spec, setting, seed, opts, |r| {
        work.merge(&r.work);
        est.underflow_count += r.underflow as usize;
        est.map_nonconverged += r.nonconverged as usize;
        est.map_boundary += r.boundary as usize;
        est.proposal_fallbacks += r.fallback as usize;
        if r.excluded {
            est.excluded_count += 1;
            return;
        }
        count += 1;
        let delta = r.term - mean;
        mean += delta / count as f64;
        m2 += delta * (r.term - mean);
        if let Some(t) = est.per_outer_terms.as_mut() {
            t.push(r.term);
        }
    })?;
    if count == 0 {
        return Err(Error::invalid(format!("all {} outer samples were excluded", setting.n)));
    }
    est.value = mean;
    est.std_error = if count > 1 { (m2 / (count - 1) as f64 / count as f64).sqrt() } else { f64::INFINITY };
    est.work_units = work.units;
    est.evaluations = work.evals;
    Ok(est)
}

pub fn dlmc(spec: &ExperimentSpec, setting: &EstimatorSetting, seed: u64) -> Result<EigEstimate> {
    estimate(EstimatorKind::Dlmc, spec, setting, seed, &EstimatorOptions::default())
}

pub fn mcla(spec: &ExperimentSpec, setting: &EstimatorSetting, seed: u64) -> Result<EigEstimate> {
    estimate(EstimatorKind::Mcla, spec, setting, seed, &EstimatorOptions::default())
}

pub fn dlmcis(spec: &ExperimentSpec, setting: &EstimatorSetting, seed: u64) -> Result<EigEstimate> {
    estimate(EstimatorKind::Dlmcis, spec, setting, seed, &EstimatorOptions::default())
}
