//! Reference values for one-parameter experiments: closed-form linear-Gaussian
//! EIG, quadrature evidence and quadrature EIG.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::kl_gaussian_1d;
use crate::model::{Dataset, ExperimentSpec, Mesh, Prior, Work};
use crate::rng::{substream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureKind {
    GaussLegendre,
    /// Expectation under a standard normal (probabilists' Hermite).
    GaussHermite,
    Trapezoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub kind: QuadratureKind,
    pub n_points: usize,
    /// Integration interval; `(-inf, inf)` for Gauss-Hermite.
    pub domain: (f64, f64),
}

impl QuadratureRule {
    fn finite(kind: QuadratureKind, n: usize, a: f64, b: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("a quadrature rule needs at least 2 points"));
        }
        if !(a < b && a.is_finite() && b.is_finite()) {
            return Err(Error::invalid(format!("quadrature domain [{a}, {b}] must be finite and ordered")));
        }
        Ok(Self { kind, n_points: n, domain: (a, b) })
    }

    pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Result<Self> {
        Self::finite(QuadratureKind::GaussLegendre, n, a, b)
    }

    pub fn trapezoid(n: usize, a: f64, b: f64) -> Result<Self> {
        Self::finite(QuadratureKind::Trapezoid, n, a, b)
    }

    pub fn gauss_hermite(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("a quadrature rule needs at least 2 points"));
        }
        Ok(Self { kind: QuadratureKind::GaussHermite, n_points: n, domain: (f64::NEG_INFINITY, f64::INFINITY) })
    }

    /// Same rule with twice the points.
    pub fn refined(&self) -> Self {
        Self { n_points: 2 * self.n_points, ..self.clone() }
    }

    /// Nodes and positive weights. Gauss-Hermite weights sum to one.
    pub fn nodes_weights(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_points;
        match self.kind {
            QuadratureKind::GaussLegendre => {
                let (x, w) = gauss_legendre_unit(n);
                let (a, b) = self.domain;
                let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
                (x.iter().map(|x| c + r * x).collect(), w.iter().map(|w| r * w).collect())
            }
            QuadratureKind::Trapezoid => {
                let (a, b) = self.domain;
                let h = (b - a) / (n - 1) as f64;
                let x = (0..n).map(|i| a + h * i as f64).collect();
                let w = (0..n).map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h }).collect();
                (x, w)
            }
            QuadratureKind::GaussHermite => gauss_hermite_prob(n),
        }
    }
}

fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 1.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j - 1) as f64 * z * p2 - (j - 1) as f64 * p3) / j as f64;
            }
            pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn gauss_hermite_prob(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jac = DMatrix::from_fn(n, n, |i, j| if i + 1 == j || j + 1 == i { (i.max(j) as f64).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// EIG of `y = A theta + eps` repeated `N_e` times with normal prior and noise.
pub fn linear_gaussian_eig(a: f64, var_prior: f64, var_noise: f64, n_e: usize) -> Result<f64> {
    if !(var_prior > 0.0 && var_noise > 0.0) {
        return Err(Error::invalid("variances must be positive"));
    }
    Ok(0.5 * (n_e as f64 * a * a * var_prior / var_noise).ln_1p())
}

/// KL divergences from prior to posterior for `n` joint draws of `(theta, Y)`
/// in the linear-Gaussian model `y = A theta + eps`.
pub fn linear_gaussian_kl_draws(
    a: f64,
    mean_prior: f64,
    var_prior: f64,
    var_noise: f64,
    n_e: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let prec = 1.0 / var_prior + n_e as f64 * a * a / var_noise;
    let var_post = 1.0 / prec;
    let mut rng = substream(seed, Purpose::Reference, 0, 0);
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            let theta = mean_prior + var_prior.sqrt() * z;
            let mut sum_y = 0.0;
            for _ in 0..n_e {
                let e: f64 = rng.sample(StandardNormal);
                sum_y += a * theta + var_noise.sqrt() * e;
            }
            let mean_post = var_post * (mean_prior / var_prior + a * sum_y / var_noise);
            kl_gaussian_1d(mean_prior, var_prior, mean_post, var_post)
        })
        .collect()
}

/// Nodes and log-weights that integrate `f(theta) pi(theta)` with `rule`.
fn prior_nodes(prior: &Prior, rule: &QuadratureRule) -> Result<(Vec<f64>, Vec<f64>)> {
    if prior.dim() != 1 {
        return Err(Error::Unsupported(format!("quadrature references need d = 1, got d = {}", prior.dim())));
    }
    let (x, w) = rule.nodes_weights();
    match rule.kind {
        QuadratureKind::GaussHermite => {
            if prior.is_uniform() {
                return Err(Error::Unsupported("Gauss-Hermite rules need a normal prior".into()));
            }
            let (mu, sd) = (prior.center()[0], prior.covariance()[(0, 0)].sqrt());
            Ok((x.iter().map(|z| mu + sd * z).collect(), w.iter().map(|w| w.ln()).collect()))
        }
        _ => {
            let lw = x.iter().zip(&w).map(|(t, w)| w.ln() + prior.log_pdf(&[*t])).collect();
            Ok((x, lw))
        }
    }
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// `log p(Y)` by quadrature over the prior (`d = 1`).
pub fn quadrature_evidence(spec: &ExperimentSpec, data: &Dataset, rule: &QuadratureRule, mesh: Mesh) -> Result<f64> {
    let (x, lw) = prior_nodes(&spec.prior, rule)?;
    let mut g = vec![0.0; spec.q()];
    let mut work = Work::default();
    let mut terms = Vec::with_capacity(x.len());
    for (t, l) in x.iter().zip(&lw) {
        if *l == f64::NEG_INFINITY {
            continue;
        }
        spec.eval(&[*t], mesh, &mut g, &mut work)?;
        terms.push(l + spec.log_likelihood_at(data, &g));
    }
    Ok(log_sum_exp(terms.iter().copied()))
}

/// How the expectation over measurement noise is taken in [`quadrature_eig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoiseExpectation {
    /// Gauss-Hermite over the noise of the repetition mean.
    Quadrature(QuadratureRule),
    /// Joint Monte Carlo over `(theta, noise)` with a fixed seed.
    MonteCarlo { draws: usize, seed: u64 },
}

/// Reference EIG for `d = q = 1`: outer quadrature over the prior, noise
/// expectation per [`NoiseExpectation`], inner evidence by `rule_inner`.
///
/// Uses that the repetition mean `ybar` is sufficient: the log-likelihood ratio
/// equals that of one observation of `ybar` with variance `sigma^2 / N_e`.
pub fn quadrature_eig(
    spec: &ExperimentSpec,
    rule_outer: &QuadratureRule,
    noise: &NoiseExpectation,
    rule_inner: &QuadratureRule,
    mesh: Mesh,
) -> Result<f64> {
    if spec.q() != 1 {
        return Err(Error::Unsupported(format!("quadrature EIG needs q = 1, got q = {}", spec.q())));
    }
    let (xo, lwo) = prior_nodes(&spec.prior, rule_outer)?;
    let (xi, lwi) = prior_nodes(&spec.prior, rule_inner)?;
    let mut work = Work::default();
    let mut g1 = [0.0];
    let mut eval = |t: f64| -> Result<f64> {
        spec.eval(&[t], mesh, &mut g1, &mut work)?;
        Ok(g1[0])
    };
    let gi: Vec<f64> = xi.iter().map(|t| eval(*t)).collect::<Result<_>>()?;
    let s2 = spec.noise.variances()[0] / spec.n_e as f64;
    let sd = s2.sqrt();
    let log_ratio = |g_true: f64, z: f64| -> f64 {
        let ybar = g_true + sd * z;
        let ev = log_sum_exp(gi.iter().zip(&lwi).filter(|(_, l)| **l > f64::NEG_INFINITY).map(|(g, l)| {
            let r = ybar - g;
            l - 0.5 * r * r / s2
        }));
        -0.5 * z * z - ev
    };
    match noise {
        NoiseExpectation::Quadrature(rule) => {
            if rule.kind != QuadratureKind::GaussHermite {
                return Err(Error::invalid("noise expectation needs a Gauss-Hermite rule"));
            }
            let (z, wz) = rule.nodes_weights();
            let mut total = 0.0;
            for (t, l) in xo.iter().zip(&lwo) {
                if *l == f64::NEG_INFINITY {
                    continue;
                }
                let gt = eval(*t)?;
                let inner: f64 = z.iter().zip(&wz).map(|(z, w)| w * log_ratio(gt, *z)).sum();
                total += l.exp() * inner;
            }
            Ok(total)
        }
        NoiseExpectation::MonteCarlo { draws, seed } => {
            if *draws < 1 {
                return Err(Error::invalid("Monte Carlo noise expectation needs at least one draw"));
            }
            let mut rng = substream(*seed, Purpose::Reference, 1, 0);
            let mut total = 0.0;
            let mut theta = [0.0];
            for _ in 0..*draws {
                spec.prior.sample(&mut rng, &mut theta);
                let z: f64 = rng.sample(StandardNormal);
                total += log_ratio(eval(theta[0])?, z);
            }
            Ok(total / *draws as f64)
        }
    }
}

/// Rules that resolve a one-parameter prior well: Gauss-Legendre on a uniform
/// box, trapezoid on `mean +- 12 sd` for a normal prior.
pub fn default_prior_rule(prior: &Prior, n: usize) -> Result<QuadratureRule> {
    if prior.dim() != 1 {
        return Err(Error::Unsupported("quadrature references need d = 1".into()));
    }
    match prior.bounds() {
        Some((lo, hi)) => QuadratureRule::gauss_legendre(n, lo[0], hi[0]),
        None => {
            let (mu, sd) = (prior.center()[0], prior.covariance()[(0, 0)].sqrt());
            QuadratureRule::trapezoid(n, mu - 12.0 * sd, mu + 12.0 * sd)
        }
    }
}

/// Reference EIG with rules sized for the scalar examples.
pub fn reference_eig(spec: &ExperimentSpec, mesh: Mesh) -> Result<f64> {
    let outer = default_prior_rule(&spec.prior, 200)?;
    let inner = match spec.prior.bounds() {
        Some((lo, hi)) => QuadratureRule::trapezoid(4001, lo[0], hi[0])?,
        None => default_prior_rule(&spec.prior, 4001)?,
    };
    quadrature_eig(spec, &outer, &NoiseExpectation::Quadrature(QuadratureRule::gauss_hermite(40)?), &inner, mesh)
}
