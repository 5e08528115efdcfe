use magcal_core::baselines::{
    tolles_lawson_calibrate, twostep_calibrate, BaselineError, FilterSpec, TlConfig, TlTerms,
};
use magcal_core::measurement::MeasurementSet;
use magcal_core::simulator::{simulate, NoiseSpec, ProfileSpec, Scenario, TruthRecord, TruthSpec};

fn offset_only(h_hi: f64, noise: NoiseSpec, seed: u64) -> (TruthRecord, MeasurementSet) {
    let scenario = Scenario {
        profile: ProfileSpec::default(),
        truth: TruthSpec {
            h_hi_magnitude: h_hi,
            ..TruthSpec::undistorted()
        },
        noise,
    };
    simulate(&scenario, seed).unwrap()
}

fn passband_variance(x: &[f64], dt: f64) -> f64 {
    let y = FilterSpec::default().design(1.0 / dt).unwrap().filtfilt(x, 300);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64
}

#[test]
fn twostep_recovers_zero_offset() {
    let (truth, meas) = offset_only(0.0, NoiseSpec::zero(), 1);
    let r = twostep_calibrate(&meas, truth.fields[0].norm()).unwrap();
    assert!(r.converged);
    assert!(r.bias.norm() < 1e-6, "bias {}", r.bias);
}

#[test]
fn twostep_recovers_known_offset() {
    for seed in [2, 3, 4] {
        let (truth, meas) = offset_only(100.0, NoiseSpec::zero(), seed);
        let r = twostep_calibrate(&meas, truth.fields[0].norm()).unwrap();
        assert!(r.converged);
        assert!(
            (r.bias - truth.cal.h_hi).norm() < 1e-6,
            "error {}",
            (r.bias - truth.cal.h_hi).norm()
        );
    }
}

#[test]
fn twostep_second_step_strictly_decreases_cost() {
    let (truth, meas) = offset_only(3000.0, NoiseSpec::default(), 5);
    let r = twostep_calibrate(&meas, truth.fields[0].norm()).unwrap();
    assert!(r.cost_history.len() >= 2);
    for w in r.cost_history.windows(2) {
        assert!(w[1] < w[0], "cost {} -> {}", w[0], w[1]);
    }
    assert!((r.bias - truth.cal.h_hi).norm() < 20.0);
}

#[test]
fn twostep_flags_missing_attitude_diversity() {
    let (truth, mut meas) = offset_only(100.0, NoiseSpec::zero(), 6);
    let first = meas.epochs[0].mag;
    for e in &mut meas.epochs {
        e.mag = first;
    }
    let err = twostep_calibrate(&meas, truth.fields[0].norm()).unwrap_err();
    assert!(matches!(err, BaselineError::IllConditioned { .. }));

    meas.epochs.truncate(5);
    assert!(matches!(
        twostep_calibrate(&meas, 5e4),
        Err(BaselineError::InsufficientData { .. })
    ));
    assert!(twostep_calibrate(&meas, -1.0).is_err());
}

#[test]
fn tolles_lawson_fits_nothing_when_undisturbed() {
    let (_, meas) = offset_only(0.0, NoiseSpec::zero(), 7);
    let c = tolles_lawson_calibrate(&meas, &TlConfig::default()).unwrap();
    assert_eq!(c.coefficients.len(), 18);
    let worst = c.coefficients.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 1e-6, "largest coefficient {worst}");
}

#[test]
fn tolles_lawson_permanent_terms_track_hard_iron() {
    let cfg = TlConfig {
        terms: TlTerms {
            permanent: true,
            induced: false,
            eddy: false,
        },
        ..TlConfig::default()
    };
    for seed in [8, 9] {
        let (truth, meas) = offset_only(100.0, NoiseSpec::zero(), seed);
        let c = tolles_lawson_calibrate(&meas, &cfg).unwrap();
        let p = c.permanent().unwrap();
        assert!(c.induced().is_none() && c.eddy().is_none());
        assert!((p - truth.cal.h_hi).norm() < 1.0, "permanent {p} vs {}", truth.cal.h_hi);
    }
}

#[test]
fn tolles_lawson_compensation_reduces_passband_variance() {
    let scenario = Scenario {
        truth: TruthSpec {
            soft_iron_sigma: 0.0,
            ..TruthSpec::default()
        },
        ..Scenario::default()
    };
    for seed in [10, 11] {
        let (_, meas) = simulate(&scenario, seed).unwrap();
        let c = tolles_lawson_calibrate(&meas, &TlConfig::default()).unwrap();
        let raw: Vec<f64> = meas.scalar_samples().collect();
        let comp = c.compensate(&meas);
        let ratio = passband_variance(&comp, meas.dt) / passband_variance(&raw, meas.dt);
        assert!(ratio < 1.0, "variance ratio {ratio}");
    }
}

#[test]
fn tolles_lawson_rejects_degenerate_regressors() {
    let (_, mut meas) = offset_only(100.0, NoiseSpec::zero(), 12);
    let first = meas.epochs[0].mag;
    for e in &mut meas.epochs {
        e.mag = first;
    }
    assert!(matches!(
        tolles_lawson_calibrate(&meas, &TlConfig::default()),
        Err(BaselineError::RankDeficient { .. })
    ));
    let none = TlConfig {
        terms: TlTerms {
            permanent: false,
            induced: false,
            eddy: false,
        },
        ..TlConfig::default()
    };
    assert!(tolles_lawson_calibrate(&meas, &none).is_err());
    let bad_filter = TlConfig {
        filter: FilterSpec {
            low_hz: 2.0,
            high_hz: 1.0,
            order: 4,
        },
        ..TlConfig::default()
    };
    let (_, ok) = offset_only(100.0, NoiseSpec::zero(), 13);
    assert!(matches!(
        tolles_lawson_calibrate(&ok, &bad_filter),
        Err(BaselineError::InvalidFilter(_))
    ));
}
