use std::sync::Arc;

use eigdesign_core::*;
use proptest::prelude::*;

fn example2(n_e: usize) -> ExperimentSpec {
    ExperimentSpec::new(
        Arc::new(NonlinearScalar),
        Prior::uniform(vec![0.0], vec![1.0]).unwrap(),
        NoiseModel::new(vec![1e-3]).unwrap(),
        vec![1.0],
        n_e,
    )
    .unwrap()
}

fn constants(variant: EstimatorKind, c1: f64, c2: f64, c3: f64, c4: f64, gamma: f64) -> PilotConstants {
    PilotConstants {
        variant,
        c1,
        c2,
        c3,
        c4,
        eta: 1.0,
        gamma,
        c_la2: 0.0,
        laplace_bias: 0.0,
        laplace_bias_std_error: 0.0,
        n_e: 1,
        outer_overhead: 0.0,
        pilot_n: 0,
        pilot_m: 0,
        pilot_seed: 0,
        pilot_h: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn log_mean_exp_shift_invariance(
        v in prop::collection::vec(-50.0f64..50.0, 1..40),
        c in -1e6f64..1e6,
    ) {
        let base = log_mean_exp(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let lhs = log_mean_exp(&shifted).unwrap() - c;
        // Adding c rounds each entry to the spacing of f64 near |c|.
        let scale = 1.0f64.max(c.abs()).max(base.abs());
        prop_assert!((lhs - base).abs() <= 1e-12 * scale, "{} vs {}", lhs, base);
    }

    #[test]
    fn log_mean_exp_bounds(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let l = log_mean_exp(&v).unwrap();
        let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mn = v.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(l <= mx + 1e-12 && l >= mn - 1e-12);
    }

    #[test]
    fn likelihood_invariant_under_row_permutation(
        rows in prop::collection::vec(-2.0f64..2.0, 2..12),
        theta in 0.0f64..1.0,
        rot in 0usize..12,
    ) {
        let spec = example2(rows.len());
        let a: Vec<Vec<f64>> = rows.iter().map(|y| vec![*y]).collect();
        let mut b = a.clone();
        b.rotate_left(rot % a.len());
        b.reverse();
        let da = Dataset::from_rows(&a, vec![theta]).unwrap();
        let db = Dataset::from_rows(&b, vec![theta]).unwrap();
        let la = log_likelihood(&spec, &da, &[theta], Mesh::Exact, &mut Work::default()).unwrap();
        let lb = log_likelihood(&spec, &db, &[theta], Mesh::Exact, &mut Work::default()).unwrap();
        prop_assert!((la - lb).abs() <= 1e-9 * la.abs().max(1.0));
    }

    #[test]
    fn tuned_settings_meet_their_constraints(
        c1 in 0.01f64..10.0,
        c2 in 0.0f64..10.0,
        c4 in 1e-4f64..10.0,
        log_tol in -3.0f64..0.0,
        variant in prop::sample::select(vec![EstimatorKind::Dlmc, EstimatorKind::Dlmcis]),
    ) {
        let tol = 10f64.powf(log_tol);
        let c = constants(variant, c1, c2, 0.0, c4, 0.0);
        let s = optimal_setting(&c, tol, 0.05, &TuneOptions::default()).unwrap();
        prop_assert!(s.feasible);
        prop_assert!(verify_setting(&c, &s.setting, &TuneOptions::default()).is_ok());
        prop_assert!(s.setting.kappa > 0.0 && s.setting.kappa <= 1.0);
    }

    #[test]
    fn meshed_settings_meet_their_constraints(
        c1 in 0.1f64..10.0,
        c3 in 0.01f64..10.0,
        c4 in 1e-3f64..10.0,
        log_tol in -2.0f64..0.0,
    ) {
        let tol = 10f64.powf(log_tol);
        let c = constants(EstimatorKind::Dlmc, c1, 0.0, c3, c4, 1.0);
        let s = optimal_setting(&c, tol, 0.05, &TuneOptions::default()).unwrap();
        prop_assert!(verify_setting(&c, &s.setting, &TuneOptions::default()).is_ok());
    }

    #[test]
    fn optimal_work_grows_as_tolerance_shrinks(
        c1 in 0.01f64..10.0,
        c4 in 1e-4f64..10.0,
        log_tol in -3.0f64..0.0,
        variant in prop::sample::select(vec![EstimatorKind::Dlmc, EstimatorKind::Dlmcis, EstimatorKind::Mcla]),
    ) {
        let tol = 10f64.powf(log_tol);
        let c = constants(variant, c1, 0.0, 0.0, if variant == EstimatorKind::Mcla { 0.0 } else { c4 }, 0.0);
        let opts = TuneOptions::default();
        let loose = optimal_setting(&c, tol, 0.05, &opts).unwrap();
        let tight = optimal_setting(&c, tol / 2.0, 0.05, &opts).unwrap();
        prop_assert!(tight.predicted_work >= loose.predicted_work * (1.0 - 1e-9));
    }
}

#[test]
fn is_weights_average_to_the_evidence() {
    let spec = example2(1);
    let rule = default_prior_rule(&spec.prior, 4000).unwrap();
    for n in 0..10u64 {
        let (_, data) = outer_sample(&spec, Mesh::Exact, 2024, n).unwrap();
        let exact = quadrature_evidence(&spec, &data, &rule, Mesh::Exact).unwrap();
        let is = is_log_evidence(&spec, &data, Mesh::Exact, 20_000, 7 + n, &EstimatorOptions::default()).unwrap();
        let rel = (is - exact).exp() - 1.0;
        assert!(rel.abs() < 0.01, "dataset {n}: relative error {rel}");
    }
}
