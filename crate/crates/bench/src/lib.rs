//! Shared fixtures for the benchmarks and the acceptance studies.

use std::path::PathBuf;
use std::sync::Arc;

use eigdesign_core::{ExperimentSpec, LinearScalar, NoiseModel, NonlinearScalar, Prior};

/// Linear model with prior `N(1, 0.01)` and noise standard deviation `2 + (xi - 10)/10`.
pub fn example1(xi: f64, n_e: usize) -> ExperimentSpec {
    let sd = 2.0 + (xi - 10.0) / 10.0;
    ExperimentSpec::new(
        Arc::new(LinearScalar),
        Prior::normal_diag(vec![1.0], vec![0.01]).expect("valid prior"),
        NoiseModel::new(vec![sd * sd]).expect("valid noise"),
        vec![xi],
        n_e,
    )
    .expect("valid experiment")
}

/// Nonlinear model with a uniform prior on `[0, 1]` and noise variance `1e-3`.
pub fn example2(xi: f64, n_e: usize) -> ExperimentSpec {
    ExperimentSpec::new(
        Arc::new(NonlinearScalar),
        Prior::uniform(vec![0.0], vec![1.0]).expect("valid prior"),
        NoiseModel::new(vec![1e-3]).expect("valid noise"),
        vec![xi],
        n_e,
    )
    .expect("valid experiment")
}

/// `y = theta + eps` with standard normal prior and noise.
pub fn unit_linear() -> ExperimentSpec {
    ExperimentSpec::new(
        Arc::new(LinearScalar),
        Prior::normal_diag(vec![0.0], vec![1.0]).expect("valid prior"),
        NoiseModel::new(vec![1.0]).expect("valid noise"),
        vec![0.0],
        1,
    )
    .expect("valid experiment")
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Path of a config shipped in the repository's `configs/` directory.
pub fn shipped_config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_match_their_descriptions() {
        assert_eq!(example1(10.0, 2).noise.variances(), &[4.0]);
        assert_eq!(example1(30.0, 2).noise.variances(), &[16.0]);
        assert_eq!(example2(0.5, 10).n_e, 10);
        let x = [1.0, 10.0, 100.0];
        assert!((log_log_slope(&x, &x.map(|v| 3.0 / (v * v))) + 2.0).abs() < 1e-12);
        assert!(shipped_config("example1.conf").exists());
    }
}
