use magcal_core::graph::{build_graph, FieldChangeWeight, Layout, ParamBlock, ParamPrior, StateVector, WeightConfig};
use magcal_core::magmodel::CalParams;
use magcal_core::measurement::MeasurementSet;
use magcal_core::simulator::{simulate, NoiseSpec, ProfileSpec, Scenario, TruthRecord, TruthSpec};
use magcal_core::solver::{calibrate, gauss_newton, initialize, SolverConfig, SolverError, Termination};
use nalgebra::{DMatrix, Matrix3, Matrix4};

fn run(noise: NoiseSpec, truth: TruthSpec, seed: u64) -> (TruthRecord, MeasurementSet) {
    let scenario = Scenario {
        profile: ProfileSpec::default(),
        truth: TruthSpec {
            soft_iron_sigma: 0.0,
            ..truth
        },
        noise,
    };
    simulate(&scenario, seed).unwrap()
}

fn truth_state(t: &TruthRecord) -> StateVector {
    StateVector::new(t.cal, t.fields.clone(), t.attitudes.clone()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn truth_initialization_converges_in_one_step() {
    let (truth, meas) = run(NoiseSpec::zero(), TruthSpec::default(), 1);
    let graph = build_graph(&meas, &WeightConfig::default()).unwrap();
    let report = gauss_newton(&graph, truth_state(&truth), &SolverConfig::default()).unwrap();
    assert!(report.converged);
    assert_eq!(report.iterations, 1);
    assert!(report.last_step < 1e-10, "step {}", report.last_step);
}

#[test]
fn default_initializer_recovers_noiseless_truth() {
    for seed in [2, 3] {
        let (truth, meas) = run(NoiseSpec::zero(), TruthSpec::default(), seed);
        let report = calibrate(&meas, &WeightConfig::default(), &SolverConfig::default()).unwrap();
        assert!(report.converged);
        assert!(report.iterations <= 15, "iterations {}", report.iterations);
        let est = &report.state;
        assert!((est.cal.h_hi - truth.cal.h_hi).amax() < 1e-6);
        assert!((est.cal.h_vec - truth.cal.h_vec).amax() < 1e-6);
        assert!(max_abs_diff(&est.cal.t_vec.to_array(), &truth.cal.t_vec.to_array()) < 1e-9);
        for (e, t) in est.fields.iter().zip(&truth.fields) {
            assert!((e - t).amax() < 1e-4);
        }
    }
}

#[test]
fn initializer_is_exact_without_noise_or_distortion() {
    let (truth, meas) = run(NoiseSpec::zero(), TruthSpec::undistorted(), 4);
    let init = initialize(&meas);
    assert_eq!(init.cal, CalParams::identity());
    for k in 0..meas.len() {
        assert!((init.fields[k] - truth.fields[k]).amax() < 1e-9);
        assert!((init.dcm(k).matrix() - truth.attitudes[k].matrix()).amax() < 1e-12);
    }
    assert_eq!(initialize(&meas), init);
}

#[test]
fn linear_subproblem_is_solved_by_the_first_step() {
    let (truth, mut meas) = run(NoiseSpec::zero(), TruthSpec::default(), 5);
    // attitudes pinned, scalar channel switched off, T and h_vec pinned by
    // priors (without the scalar row only T h_hi + h_vec is observable)
    meas.noise.attitude = Matrix3::identity() * 1e-16;
    meas.noise.gyro = Matrix3::identity() * 1e-16;
    let mut mag = Matrix4::identity() * 25.0;
    mag[(3, 3)] = 1e30;
    meas.noise.mag = mag;
    let weights = WeightConfig {
        priors: vec![
            ParamPrior {
                block: ParamBlock::ScaleOrtho,
                mean: truth.cal.t_vec.to_array().to_vec(),
                sigma: 1e-12,
            },
            ParamPrior {
                block: ParamBlock::VectorBias,
                mean: truth.cal.h_vec.iter().copied().collect(),
                sigma: 1e-12,
            },
        ],
        ..WeightConfig::default()
    };
    let graph = build_graph(&meas, &weights).unwrap();
    let mut init = initialize(&meas);
    init.cal.t_vec = truth.cal.t_vec;
    let report = gauss_newton(&graph, init, &SolverConfig::default()).unwrap();
    let after_first = report.cost_history[1];
    let last = *report.cost_history.last().unwrap();
    assert!(report.cost_history[0] > 1e6);
    assert!((after_first - last).abs() <= 1e-9 * report.cost_history[0] + 1e-9);
    assert!(report.iterations <= 2, "iterations {}", report.iterations);
}

#[test]
fn noisy_solution_is_first_order_optimal() {
    let (truth, meas) = run(NoiseSpec::default(), TruthSpec::default(), 6);
    let report = calibrate(&meas, &WeightConfig::default(), &SolverConfig::default()).unwrap();
    assert!(report.converged);
    assert!(
        report.scaled_gradient_norm < 1e-6,
        "scaled gradient {}",
        report.scaled_gradient_norm
    );
    assert!((report.state.cal.h_hi - truth.cal.h_hi).norm() < 5.0);
    assert!(report.final_cost <= report.initial_cost);
    let p = &report.param_covariance;
    assert!((p - p.transpose()).amax() < 1e-9 * p.amax());
    assert!(p.clone().cholesky().is_some());
}

#[test]
fn fixed_field_mode_holds_field_constant() {
    let (_, meas) = run(NoiseSpec::default(), TruthSpec::default(), 7);
    let report = calibrate(&meas, &WeightConfig::fixed_field(), &SolverConfig::default()).unwrap();
    assert!(report.converged);
    let e0 = report.state.fields[0];
    for e in &report.state.fields {
        assert!((e - e0).amax() < 1e-6, "field spread {}", (e - e0).amax());
    }
}

#[test]
fn damping_never_increases_cost_and_matches_undamped() {
    let (_, meas) = run(NoiseSpec::default(), TruthSpec::default(), 8);
    let plain = calibrate(&meas, &WeightConfig::default(), &SolverConfig::default()).unwrap();
    let damped = calibrate(&meas, &WeightConfig::default(), &SolverConfig::damped(1e-3)).unwrap();
    assert!(damped.converged);
    for w in damped.cost_history.windows(2) {
        assert!(w[1] <= w[0], "cost rose from {} to {}", w[0], w[1]);
    }
    assert!((damped.state.cal.h_hi - plain.state.cal.h_hi).amax() < 1e-6);
}

#[test]
fn solve_is_deterministic_and_order_invariant() {
    let (_, meas) = run(NoiseSpec::default(), TruthSpec::default(), 9);
    let cfg = SolverConfig::default();
    let a = calibrate(&meas, &WeightConfig::default(), &cfg).unwrap();
    let b = calibrate(&meas, &WeightConfig::default(), &cfg).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.cost_history, b.cost_history);

    let mut graph = build_graph(&meas, &WeightConfig::default()).unwrap();
    graph.factors_mut().reverse();
    let c = gauss_newton(&graph, initialize(&meas), &cfg).unwrap();
    assert!((a.state.cal.h_hi - c.state.cal.h_hi).amax() < 1e-6);
    assert!(max_abs_diff(&a.state.cal.t_vec.to_array(), &c.state.cal.t_vec.to_array()) < 1e-6);
}

#[test]
fn diagnostics_match_dense_linear_algebra() {
    let scenario = Scenario {
        profile: ProfileSpec {
            sample_rate: 2.5,
            ..ProfileSpec::default()
        },
        truth: TruthSpec {
            soft_iron_sigma: 0.0,
            ..TruthSpec::default()
        },
        noise: NoiseSpec::default(),
    };
    let (_, meas) = simulate(&scenario, 10).unwrap();
    let graph = build_graph(&meas, &WeightConfig::default()).unwrap();
    let report = gauss_newton(&graph, initialize(&meas), &SolverConfig::default()).unwrap();
    let l = graph.linearize(&report.state).unwrap().l.to_dense();
    let normal = l.transpose() * &l;
    let inv = normal.clone().try_inverse().unwrap();
    let p = Layout::PARAMS;
    let expected: DMatrix<f64> = inv.view((0, 0), (p, p)).into_owned();
    assert!((&report.param_covariance - &expected).amax() < 1e-6 * expected.amax());

    let sv = l.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    assert!((report.condition.sigma_max / smax - 1.0).abs() < 1e-3);
    assert!(
        (report.condition.sigma_min / smin - 1.0).abs() < 0.05,
        "{} vs {}",
        report.condition.sigma_min,
        smin
    );
}

#[test]
fn underdetermined_problem_is_singular() {
    let (_, mut meas) = run(NoiseSpec::zero(), TruthSpec::default(), 11);
    meas.epochs.truncate(1);
    let err = calibrate(&meas, &WeightConfig::default(), &SolverConfig::default()).unwrap_err();
    assert!(matches!(err, SolverError::NormalEquationsSingular { .. }));
}

#[test]
fn iteration_cap_is_reported_not_fatal() {
    let (_, meas) = run(NoiseSpec::default(), TruthSpec::default(), 12);
    let cfg = SolverConfig {
        max_iterations: 1,
        ..SolverConfig::default()
    };
    let report = calibrate(&meas, &WeightConfig::default(), &cfg).unwrap();
    assert!(!report.converged);
    assert_eq!(report.termination, Termination::MaxIterations);
    assert_eq!(report.iterations, 1);
}

#[test]
fn invalid_configurations_are_rejected() {
    let (_, meas) = run(NoiseSpec::zero(), TruthSpec::default(), 13);
    for cfg in [
        SolverConfig {
            max_iterations: 0,
            ..SolverConfig::default()
        },
        SolverConfig {
            step_tolerance: 0.0,
            ..SolverConfig::default()
        },
        SolverConfig {
            damping: -1.0,
            ..SolverConfig::default()
        },
    ] {
        assert!(matches!(
            calibrate(&meas, &WeightConfig::default(), &cfg),
            Err(SolverError::InvalidConfig(_))
        ));
    }
    let bad = WeightConfig {
        field_change: FieldChangeWeight::Variance { variance: -1.0 },
        ..WeightConfig::default()
    };
    assert!(calibrate(&meas, &bad, &SolverConfig::default()).is_err());
}
