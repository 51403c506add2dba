//! Forward models, priors, noise and the Gaussian log-likelihood.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Discretization level at which a model is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Mesh {
    Exact,
    Size(f64),
}

impl Mesh {
    /// Work units charged for one evaluation on this mesh.
    pub fn cost(self, gamma: f64) -> f64 {
        match self {
            Mesh::Exact => 1.0,
            Mesh::Size(h) => h.powf(-gamma),
        }
    }

    pub fn size(self) -> Option<f64> {
        match self {
            Mesh::Exact => None,
            Mesh::Size(h) => Some(h),
        }
    }
}

impl fmt::Display for Mesh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mesh::Exact => f.write_str("exact"),
            Mesh::Size(h) => write!(f, "{h}"),
        }
    }
}

/// A deterministic map `g(theta, xi)` from parameters to responses.
pub trait ForwardModel: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn param_dim(&self) -> usize;
    fn response_dim(&self) -> usize;
    fn design_dim(&self) -> usize {
        1
    }
    /// Closed bounds of the design space, one pair per design component.
    fn design_bounds(&self) -> Vec<(f64, f64)> {
        vec![(f64::NEG_INFINITY, f64::INFINITY); self.design_dim()]
    }
    /// Writes `g_h(theta, xi)` into `out` (length `response_dim`).
    fn evaluate(&self, theta: &[f64], xi: &[f64], mesh: Mesh, out: &mut [f64]) -> Result<()>;
    /// Per-call work grows like `h^-gamma`.
    fn work_exponent(&self) -> f64 {
        0.0
    }
    /// Discretization bias decays like `h^eta`.
    fn convergence_rate(&self) -> f64 {
        1.0
    }
    /// Row-major `q x d` matrix of partial derivatives of `g` (not negated), if known.
    fn analytic_gradient(&self, _theta: &[f64], _xi: &[f64], _out: &mut [f64]) -> Option<()> {
        None
    }
}

/// `g(theta, xi) = theta (1 + xi)^2`.
#[derive(Debug, Clone, Default)]
pub struct LinearScalar;

impl ForwardModel for LinearScalar {
    fn name(&self) -> &str {
        "linear-scalar"
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn response_dim(&self) -> usize {
        1
    }
    fn evaluate(&self, theta: &[f64], xi: &[f64], _mesh: Mesh, out: &mut [f64]) -> Result<()> {
        let a = (1.0 + xi[0]) * (1.0 + xi[0]);
        out[0] = theta[0] * a;
        Ok(())
    }
    fn analytic_gradient(&self, _theta: &[f64], xi: &[f64], out: &mut [f64]) -> Option<()> {
        out[0] = (1.0 + xi[0]) * (1.0 + xi[0]);
        Some(())
    }
}

/// `g(theta, xi) = theta^3 xi^2 + theta exp(-|0.2 - xi|)` on the design space `[0, 1]`.
#[derive(Debug, Clone, Default)]
pub struct NonlinearScalar;

impl ForwardModel for NonlinearScalar {
    fn name(&self) -> &str {
        "nonlinear-scalar"
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn response_dim(&self) -> usize {
        1
    }
    fn design_bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0)]
    }
    fn evaluate(&self, theta: &[f64], xi: &[f64], _mesh: Mesh, out: &mut [f64]) -> Result<()> {
        let (t, x) = (theta[0], xi[0]);
        out[0] = t * t * t * x * x + t * (-(0.2 - x).abs()).exp();
        Ok(())
    }
    fn analytic_gradient(&self, theta: &[f64], xi: &[f64], out: &mut [f64]) -> Option<()> {
        let (t, x) = (theta[0], xi[0]);
        out[0] = 3.0 * t * t * x * x + (-(0.2 - x).abs()).exp();
        Some(())
    }
}

/// Wraps an exact model and injects a relative discretization error:
/// `g_h = g (1 + c_bias h^eta)`, costing `h^-gamma` per call.
#[derive(Debug, Clone)]
pub struct SyntheticMesh {
    base: Arc<dyn ForwardModel>,
    c_bias: f64,
    eta: f64,
    gamma: f64,
}

impl SyntheticMesh {
    pub fn new(base: Arc<dyn ForwardModel>, c_bias: f64, eta: f64, gamma: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::invalid(format!("convergence rate eta must be positive, got {eta}")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!("work exponent gamma must be >= 0, got {gamma}")));
        }
        if !c_bias.is_finite() {
            return Err(Error::invalid("c_bias must be finite"));
        }
        Ok(Self { base, c_bias, eta, gamma })
    }

    pub fn c_bias(&self) -> f64 {
        self.c_bias
    }

    fn factor(&self, mesh: Mesh) -> f64 {
        match mesh {
            Mesh::Exact => 1.0,
            Mesh::Size(h) => 1.0 + self.c_bias * h.powf(self.eta),
        }
    }
}

impl ForwardModel for SyntheticMesh {
    fn name(&self) -> &str {
        "synthetic-mesh"
    }
    fn param_dim(&self) -> usize {
        self.base.param_dim()
    }
    fn response_dim(&self) -> usize {
        self.base.response_dim()
    }
    fn design_dim(&self) -> usize {
        self.base.design_dim()
    }
    fn design_bounds(&self) -> Vec<(f64, f64)> {
        self.base.design_bounds()
    }
    fn evaluate(&self, theta: &[f64], xi: &[f64], mesh: Mesh, out: &mut [f64]) -> Result<()> {
        self.base.evaluate(theta, xi, Mesh::Exact, out)?;
        let f = self.factor(mesh);
        out.iter_mut().for_each(|v| *v *= f);
        Ok(())
    }
    fn work_exponent(&self) -> f64 {
        self.gamma
    }
    fn convergence_rate(&self) -> f64 {
        self.eta
    }
}

/// Names accepted by [`build_model`].
pub const MODEL_NAMES: [&str; 3] = ["linear-scalar", "nonlinear-scalar", "synthetic-mesh"];

/// Builds a registered model from its name and numeric parameters.
///
/// `synthetic-mesh` reads `c_bias` (default 1), `eta` (default 1), `gamma`
/// (default 1) and `base` (0 for linear-scalar, 1 for nonlinear-scalar; default 1).
pub fn build_model(name: &str, params: &BTreeMap<String, f64>) -> Result<Arc<dyn ForwardModel>> {
    let allowed: &[&str] = match name {
        "linear-scalar" | "nonlinear-scalar" => &[],
        "synthetic-mesh" => &["c_bias", "eta", "gamma", "base"],
        other => {
            return Err(Error::invalid(format!(
                "unknown model '{other}' (known: {})",
                MODEL_NAMES.join(", ")
            )))
        }
    };
    if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::invalid(format!("model '{name}' has no parameter '{k}'")));
    }
    let get = |k: &str, d: f64| params.get(k).copied().unwrap_or(d);
    Ok(match name {
        "linear-scalar" => Arc::new(LinearScalar),
        "nonlinear-scalar" => Arc::new(NonlinearScalar),
        _ => {
            let base: Arc<dyn ForwardModel> = match get("base", 1.0) {
                0.0 => Arc::new(LinearScalar),
                1.0 => Arc::new(NonlinearScalar),
                b => return Err(Error::invalid(format!("synthetic-mesh base must be 0 or 1, got {b}"))),
            };
            Arc::new(SyntheticMesh::new(base, get("c_bias", 1.0), get("eta", 1.0), get("gamma", 1.0))?)
        }
    })
}

#[derive(Debug, Clone)]
enum PriorKind {
    Normal {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        chol: DMatrix<f64>,
        precision: DMatrix<f64>,
        log_norm: f64,
    },
    Uniform {
        lower: Vec<f64>,
        upper: Vec<f64>,
        log_density: f64,
    },
}

/// Parameter prior: a multivariate normal or a uniform box.
#[derive(Debug, Clone)]
pub struct Prior {
    kind: PriorKind,
}

impl Prior {
    pub fn normal(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::invalid("prior dimension must be positive"));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension { what: "prior covariance", expected: d, got: cov.nrows() });
        }
        if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax() {
            return Err(Error::invalid("prior covariance is not symmetric"));
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::invalid("prior covariance is not positive definite"))?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        Ok(Self {
            kind: PriorKind::Normal {
                mean: DVector::from_vec(mean),
                cov,
                chol: l,
                precision,
                log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
            },
        })
    }

    /// Independent normal components with the given variances.
    pub fn normal_diag(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if mean.len() != variances.len() {
            return Err(Error::Dimension { what: "prior variances", expected: mean.len(), got: variances.len() });
        }
        Self::normal(mean, DMatrix::from_diagonal(&DVector::from_vec(variances)))
    }

    pub fn uniform(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::invalid("prior dimension must be positive"));
        }
        if lower.len() != upper.len() {
            return Err(Error::Dimension { what: "uniform upper bounds", expected: lower.len(), got: upper.len() });
        }
        for (j, (a, b)) in lower.iter().zip(&upper).enumerate() {
            if !(a < b) || !a.is_finite() || !b.is_finite() {
                return Err(Error::invalid(format!("uniform bounds must satisfy lower < upper (component {j})")));
            }
        }
        let log_density = -lower.iter().zip(&upper).map(|(a, b)| (b - a).ln()).sum::<f64>();
        Ok(Self { kind: PriorKind::Uniform { lower, upper, log_density } })
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            PriorKind::Normal { mean, .. } => mean.len(),
            PriorKind::Uniform { lower, .. } => lower.len(),
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self.kind, PriorKind::Uniform { .. })
    }

    /// Box bounds for uniform priors.
    pub fn bounds(&self) -> Option<(&[f64], &[f64])> {
        match &self.kind {
            PriorKind::Uniform { lower, upper, .. } => Some((lower, upper)),
            PriorKind::Normal { .. } => None,
        }
    }

    /// Prior mean (center of the box for uniform priors).
    pub fn center(&self) -> Vec<f64> {
        match &self.kind {
            PriorKind::Normal { mean, .. } => mean.iter().copied().collect(),
            PriorKind::Uniform { lower, upper, .. } => {
                lower.iter().zip(upper).map(|(a, b)| 0.5 * (a + b)).collect()
            }
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match &self.kind {
            PriorKind::Normal { cov, .. } => cov.clone(),
            PriorKind::Uniform { lower, upper, .. } => DMatrix::from_diagonal(&DVector::from_iterator(
                lower.len(),
                lower.iter().zip(upper).map(|(a, b)| (b - a) * (b - a) / 12.0),
            )),
        }
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        match &self.kind {
            PriorKind::Normal { .. } => theta.iter().all(|v| v.is_finite()),
            PriorKind::Uniform { lower, upper, .. } => {
                theta.iter().zip(lower.iter().zip(upper)).all(|(t, (a, b))| *a <= *t && *t <= *b)
            }
        }
    }

    /// `log pi(theta)`; `-inf` outside a uniform box.
    pub fn log_pdf(&self, theta: &[f64]) -> f64 {
        match &self.kind {
            PriorKind::Normal { mean, precision, log_norm, .. } => {
                let d = mean.len();
                let mut q = 0.0;
                for i in 0..d {
                    let ri = theta[i] - mean[i];
                    for j in 0..d {
                        q += ri * precision[(i, j)] * (theta[j] - mean[j]);
                    }
                }
                log_norm - 0.5 * q
            }
            PriorKind::Uniform { log_density, .. } => {
                if self.contains(theta) {
                    *log_density
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Gradient of `log pi`; zero inside a uniform box.
    pub fn grad_log_pdf(&self, theta: &[f64], out: &mut [f64]) {
        match &self.kind {
            PriorKind::Normal { mean, precision, .. } => {
                let d = mean.len();
                for i in 0..d {
                    out[i] = -(0..d).map(|j| precision[(i, j)] * (theta[j] - mean[j])).sum::<f64>();
                }
            }
            PriorKind::Uniform { .. } => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    /// Entry `(a, b)` of `-hess log pi` without building the matrix.
    pub fn neg_hess_entry(&self, a: usize, b: usize) -> f64 {
        match &self.kind {
            PriorKind::Normal { precision, .. } => precision[(a, b)],
            PriorKind::Uniform { .. } => 0.0,
        }
    }

    /// Hessian of `log pi`; zero inside a uniform box.
    pub fn hess_log_pdf(&self) -> DMatrix<f64> {
        match &self.kind {
            PriorKind::Normal { precision, .. } => -precision.clone(),
            PriorKind::Uniform { lower, .. } => DMatrix::zeros(lower.len(), lower.len()),
        }
    }

    pub fn sample(&self, rng: &mut StreamRng, out: &mut [f64]) {
        match &self.kind {
            PriorKind::Normal { mean, chol, .. } => {
                let d = mean.len();
                let mut z = [0.0f64; 16];
                let z: &mut [f64] = if d <= 16 { &mut z[..d] } else { &mut vec![0.0; d][..] };
                for zi in z.iter_mut() {
                    *zi = rng.sample(StandardNormal);
                }
                for i in 0..d {
                    out[i] = mean[i] + (0..=i).map(|j| chol[(i, j)] * z[j]).sum::<f64>();
                }
            }
            PriorKind::Uniform { lower, upper, .. } => {
                for (o, (a, b)) in out.iter_mut().zip(lower.iter().zip(upper)) {
                    *o = a + (b - a) * rng.random::<f64>();
                }
            }
        }
    }
}

/// Diagonal Gaussian measurement noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    variances: Vec<f64>,
    inv: Vec<f64>,
    log_det: f64,
}

impl NoiseModel {
    pub fn new(variances: Vec<f64>) -> Result<Self> {
        if variances.is_empty() {
            return Err(Error::invalid("noise model needs at least one variance"));
        }
        if let Some(v) = variances.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("noise variances must be positive and finite, got {v}")));
        }
        let inv = variances.iter().map(|v| 1.0 / v).collect();
        let log_det = variances.iter().map(|v| v.ln()).sum();
        Ok(Self { variances, inv, log_det })
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn inverse_variances(&self) -> &[f64] {
        &self.inv
    }

    /// `log |Sigma_eps|`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }
}

/// How noise variances are obtained for a given design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoiseSpec {
    /// Fixed variances, one per response component.
    Fixed(Vec<f64>),
    /// Scalar standard deviation `base + slope (xi_0 - pivot)`, squared to a variance.
    DesignAffineStd { base: f64, slope: f64, pivot: f64 },
}

impl NoiseSpec {
    pub fn resolve(&self, xi: &[f64], q: usize) -> Result<NoiseModel> {
        match self {
            NoiseSpec::Fixed(v) if v.len() == q => NoiseModel::new(v.clone()),
            NoiseSpec::Fixed(v) if v.len() == 1 => NoiseModel::new(vec![v[0]; q]),
            NoiseSpec::Fixed(v) => Err(Error::Dimension { what: "noise variances", expected: q, got: v.len() }),
            NoiseSpec::DesignAffineStd { base, slope, pivot } => {
                let s = base + slope * (xi[0] - pivot);
                if !(s > 0.0) {
                    return Err(Error::invalid(format!("noise standard deviation {s} is not positive at design {xi:?}")));
                }
                NoiseModel::new(vec![s * s; q])
            }
        }
    }
}

/// Everything needed to define one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub model: Arc<dyn ForwardModel>,
    pub prior: Prior,
    pub noise: NoiseModel,
    pub design: Vec<f64>,
    pub n_e: usize,
}

impl ExperimentSpec {
    pub fn new(
        model: Arc<dyn ForwardModel>,
        prior: Prior,
        noise: NoiseModel,
        design: Vec<f64>,
        n_e: usize,
    ) -> Result<Self> {
        if n_e < 1 {
            return Err(Error::invalid("number of repetitions must be at least 1"));
        }
        if prior.dim() != model.param_dim() {
            return Err(Error::Dimension { what: "prior", expected: model.param_dim(), got: prior.dim() });
        }
        if noise.variances().len() != model.response_dim() {
            return Err(Error::Dimension {
                what: "noise variances",
                expected: model.response_dim(),
                got: noise.variances().len(),
            });
        }
        if design.len() != model.design_dim() {
            return Err(Error::Dimension { what: "design", expected: model.design_dim(), got: design.len() });
        }
        for (j, (x, (lo, hi))) in design.iter().zip(model.design_bounds()).enumerate() {
            if !(lo <= *x && *x <= hi) {
                return Err(Error::invalid(format!(
                    "design component {j} = {x} outside the design space [{lo}, {hi}] of '{}'",
                    model.name()
                )));
            }
        }
        Ok(Self { model, prior, noise, design, n_e })
    }

    pub fn d(&self) -> usize {
        self.model.param_dim()
    }

    pub fn q(&self) -> usize {
        self.model.response_dim()
    }

    /// Same experiment at another design point (noise resolved by `noise_spec`).
    pub fn with_design(&self, design: Vec<f64>, noise_spec: &NoiseSpec) -> Result<Self> {
        let noise = noise_spec.resolve(&design, self.q())?;
        Self::new(self.model.clone(), self.prior.clone(), noise, design, self.n_e)
    }

    /// Evaluates the model and charges the call to `work`.
    pub fn eval(&self, theta: &[f64], mesh: Mesh, out: &mut [f64], work: &mut Work) -> Result<()> {
        work.charge(mesh, self.model.work_exponent(), 1);
        self.model.evaluate(theta, &self.design, mesh, out).map_err(|e| match e {
            Error::Evaluation { .. } => e,
            other => Error::Evaluation { theta: theta.to_vec(), reason: other.to_string() },
        })?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation { theta: theta.to_vec(), reason: "non-finite response".into() });
        }
        Ok(())
    }

    /// `-(N_e/2) log((2 pi)^q |Sigma_eps|)`.
    pub fn log_likelihood_const(&self) -> f64 {
        -0.5 * self.n_e as f64 * (self.q() as f64 * LN_2PI + self.noise.log_det())
    }

    /// Log-likelihood of `data` given a precomputed response `g`.
    pub fn log_likelihood_at(&self, data: &Dataset, g: &[f64]) -> f64 {
        self.log_likelihood_const() - 0.5 * data.weighted_sq_dist(g, self.noise.inverse_variances())
    }
}

/// Tally of model evaluations and the work they cost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Work {
    pub evals: u64,
    pub units: f64,
}

impl Work {
    pub fn charge(&mut self, mesh: Mesh, gamma: f64, calls: u64) {
        self.evals += calls;
        self.units += calls as f64 * mesh.cost(gamma);
    }

    pub fn merge(&mut self, other: &Work) {
        self.evals += other.evals;
        self.units += other.units;
    }
}

/// Observations `Y` (`N_e x q`, row-major) with the parameter that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    n_e: usize,
    q: usize,
    /// Parameter the data were simulated from, if known.
    pub theta: Vec<f64>,
    mean: Vec<f64>,
    /// Within-repetition sum of squares per component.
    ssw: Vec<f64>,
}

impl Dataset {
    /// Row-major `n_e x q` observations.
    pub fn new(y: Vec<f64>, n_e: usize, q: usize, theta: Vec<f64>) -> Result<Self> {
        if n_e == 0 || q == 0 {
            return Err(Error::invalid("dataset must have at least one non-empty row"));
        }
        if y.len() != n_e * q {
            return Err(Error::Dimension { what: "dataset values", expected: n_e * q, got: y.len() });
        }
        let mut mean = vec![0.0; q];
        for row in y.chunks_exact(q) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n_e as f64);
        let mut ssw = vec![0.0; q];
        for row in y.chunks_exact(q) {
            for ((s, v), m) in ssw.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        Ok(Self { y, n_e, q, theta, mean, ssw })
    }

    pub fn from_rows(rows: &[Vec<f64>], theta: Vec<f64>) -> Result<Self> {
        let q = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.is_empty() || q == 0 {
            return Err(Error::invalid("dataset must have at least one non-empty row"));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != q) {
            return Err(Error::Dimension { what: "dataset row", expected: q, got: r.len() });
        }
        Self::new(rows.concat(), rows.len(), q, theta)
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn n_e(&self) -> usize {
        self.n_e
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.y[i * self.q..(i + 1) * self.q]
    }

    /// Per-component mean of the rows.
    pub fn mean_row(&self) -> &[f64] {
        &self.mean
    }

    /// `sum_i ||y_i - g||^2` weighted by `inv_var`, via the split into
    /// within-repetition scatter plus `N_e ||ybar - g||^2`.
    pub fn weighted_sq_dist(&self, g: &[f64], inv_var: &[f64]) -> f64 {
        let ne = self.n_e as f64;
        let mut s = 0.0;
        for (((m, ss), gj), w) in self.mean.iter().zip(&self.ssw).zip(g).zip(inv_var) {
            let r = m - gj;
            s += (ss + ne * r * r) * w;
        }
        s
    }
}

/// Draws `Y` with rows `g_h(theta) + eps_i`, `eps_i ~ N(0, Sigma_eps)`.
pub fn simulate_data(
    spec: &ExperimentSpec,
    theta: &[f64],
    mesh: Mesh,
    rng: &mut StreamRng,
    work: &mut Work,
) -> Result<Dataset> {
    let mut g = vec![0.0; spec.q()];
    simulate_data_with_response(spec, theta, mesh, rng, work, &mut g)
}

/// As [`simulate_data`], also leaving the noise-free response `g_h(theta)` in `g`.
pub fn simulate_data_with_response(
    spec: &ExperimentSpec,
    theta: &[f64],
    mesh: Mesh,
    rng: &mut StreamRng,
    work: &mut Work,
    g: &mut [f64],
) -> Result<Dataset> {
    let q = spec.q();
    spec.eval(theta, mesh, g, work)?;
    let mut y = Vec::with_capacity(spec.n_e * q);
    for _ in 0..spec.n_e {
        for (gj, v) in g.iter().zip(spec.noise.variances()) {
            let z: f64 = rng.sample(StandardNormal);
            y.push(gj + v.sqrt() * z);
        }
    }
    Dataset::new(y, spec.n_e, q, theta.to_vec())
}

/// `log p(Y | theta)` under the Gaussian noise model, evaluated in log domain.
pub fn log_likelihood(
    spec: &ExperimentSpec,
    data: &Dataset,
    theta: &[f64],
    mesh: Mesh,
    work: &mut Work,
) -> Result<f64> {
    check_data(spec, data)?;
    let mut g = vec![0.0; spec.q()];
    spec.eval(theta, mesh, &mut g, work)?;
    Ok(spec.log_likelihood_at(data, &g))
}

fn check_data(spec: &ExperimentSpec, data: &Dataset) -> Result<()> {
    if data.q != spec.q() {
        return Err(Error::Dimension { what: "dataset columns", expected: spec.q(), got: data.q });
    }
    if data.n_e != spec.n_e || data.y.len() != data.n_e * data.q() {
        return Err(Error::Dimension { what: "dataset rows", expected: spec.n_e, got: data.n_e });
    }
    Ok(())
}

/// Additive split of `log p(Y | theta_inner)` for data generated at `theta_outer`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoglikParts {
    pub constant: f64,
    pub model_gap: f64,
    pub cross: f64,
    pub noise_norm: f64,
}

impl LoglikParts {
    pub fn total(&self) -> f64 {
        self.constant + self.model_gap + self.cross + self.noise_norm
    }
}

pub fn loglik_decomposition(
    spec: &ExperimentSpec,
    theta_outer: &[f64],
    theta_inner: &[f64],
    data: &Dataset,
    mesh: Mesh,
    work: &mut Work,
) -> Result<LoglikParts> {
    check_data(spec, data)?;
    let q = spec.q();
    let mut go = vec![0.0; q];
    let mut gi = vec![0.0; q];
    spec.eval(theta_outer, mesh, &mut go, work)?;
    spec.eval(theta_inner, mesh, &mut gi, work)?;
    let w = spec.noise.inverse_variances();
    let gap: Vec<f64> = go.iter().zip(&gi).map(|(a, b)| a - b).collect();
    let gap_sq: f64 = gap.iter().zip(w).map(|(g, w)| g * g * w).sum();
    let (mut cross, mut noise) = (0.0, 0.0);
    for i in 0..data.n_e {
        for j in 0..q {
            let eps = data.row(i)[j] - go[j];
            cross -= eps * w[j] * gap[j];
            noise -= 0.5 * eps * eps * w[j];
        }
    }
    Ok(LoglikParts {
        constant: spec.log_likelihood_const(),
        model_gap: -0.5 * data.n_e as f64 * gap_sq,
        cross,
        noise_norm: noise,
    })
}
