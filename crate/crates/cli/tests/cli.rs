use magcal_cli::commands::{cmd_calibrate, cmd_study, load_measurements, parse_vector};
use magcal_cli::{parse_csv, CliError, IngestError, IngestOptions, RunConfig, SensorLog};
use magcal_core::eval::{Estimator, StudySpec};
use magcal_core::magmodel::predict;
use magcal_core::simulator::{simulate, NoiseSpec, ProfileSpec, Scenario, TruthSpec};
use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

const HEADER: &str = "t,mx,my,mz,mscalar,wx,wy,wz,roll,pitch,yaw";

fn magcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_magcal")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap()
}

fn write_config(dir: &Path, name: &str, value: &Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string(value).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn quiet_config() -> Value {
    serde_json::json!({
        "seed": 3,
        "scenario": { "truth": { "soft-iron-sigma": 0.0 } }
    })
}

#[test]
fn three_row_log_parses() {
    let text = format!("{HEADER}\n0,1,2,3,4,0,0,0,0,0,0\n0.1,1,2,3,4,0.01,0,0,0,0,0\n0.2,1,2,3,4,0,0.01,0,0.1,0,0\n");
    let log = parse_csv(&text).unwrap();
    assert_eq!(log.len(), 3);
    assert!((log.dt - 0.1).abs() < 1e-15);
    assert_eq!(log.records[2].roll, 0.1);
}

#[test]
fn shuffled_time_names_first_offending_line() {
    let text = format!("{HEADER}\n0,1,2,3,4,0,0,0,0,0,0\n0.2,1,2,3,4,0,0,0,0,0,0\n0.1,1,2,3,4,0,0,0,0,0,0\n");
    match parse_csv(&text) {
        Err(IngestError::MonotonicityError { line, .. }) => assert_eq!(line, 4),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_logs_are_rejected_with_locations() {
    let missing = "t,mx,my,mz,mscalar,wx,wy,wz,roll,pitch\n0,1,2,3,4,0,0,0,0,0\n";
    assert!(matches!(parse_csv(missing), Err(IngestError::SchemaError(m)) if m.contains("yaw")));
    let extra = format!("{HEADER},temp\n0,1,2,3,4,0,0,0,0,0,0,9\n");
    assert!(matches!(parse_csv(&extra), Err(IngestError::SchemaError(m)) if m.contains("temp")));

    let bad_number = format!("{HEADER}\n0,1,2,3,4,0,0,0,0,0,0\n0.1,1,x,3,4,0,0,0,0,0,0\n");
    match parse_csv(&bad_number) {
        Err(IngestError::ParseError { line, column, .. }) => assert_eq!((line, column.as_str()), (3, "my")),
        other => panic!("unexpected {other:?}"),
    }
    let non_finite = format!("{HEADER}\n0,1,2,3,4,0,0,0,0,0,0\n0.1,1,2,3,NaN,0,0,0,0,0,0\n");
    assert!(matches!(
        parse_csv(&non_finite),
        Err(IngestError::ParseError { line: 3, .. })
    ));
    let jitter = format!(
        "{HEADER}\n0,1,2,3,4,0,0,0,0,0,0\n0.1,1,2,3,4,0,0,0,0,0,0\n0.2,1,2,3,4,0,0,0,0,0,0\n0.31,1,2,3,4,0,0,0,0,0,0\n"
    );
    assert!(matches!(
        parse_csv(&jitter),
        Err(IngestError::JitterError { line: 5, .. })
    ));
}

#[test]
fn simulator_export_round_trips() {
    let (_, meas) = simulate(&Scenario::default(), 8).unwrap();
    let log = parse_csv(&SensorLog::from_measurements(&meas).to_csv_string()).unwrap();
    let back = log.to_measurements(meas.noise, &IngestOptions::default());
    assert_eq!(back.epochs, meas.epochs);
    assert!((back.dt - meas.dt).abs() < 1e-12);
}

#[test]
fn gyro_rates_are_integrated_and_decimation_composes() {
    let (_, meas) = simulate(&Scenario::default(), 9).unwrap();
    let mut log = SensorLog::from_measurements(&meas);
    for r in &mut log.records {
        r.wx /= meas.dt;
        r.wy /= meas.dt;
        r.wz /= meas.dt;
    }
    let opts = IngestOptions {
        gyro_rates: true,
        decimate: 0,
    };
    let back = log.to_measurements(meas.noise, &opts);
    for (a, b) in back.epochs.iter().zip(&meas.epochs) {
        assert!((a.gyro.0 - b.gyro.0).amax() < 1e-15);
    }

    let log = SensorLog::from_measurements(&meas);
    let dec = log.to_measurements(
        meas.noise,
        &IngestOptions {
            gyro_rates: false,
            decimate: 5,
        },
    );
    assert_eq!(dec.len(), (meas.len() - 1) / 5 + 1);
    assert!((dec.dt - 5.0 * meas.dt).abs() < 1e-12);
    assert_eq!(dec.epochs[2].t, meas.epochs[10].t);
    assert_eq!(dec.epochs[2].rpy, meas.epochs[10].rpy);
    let avg = meas.epochs[6..=10].iter().map(|e| e.mag.m_scalar).sum::<f64>() / 5.0;
    assert!((dec.epochs[2].mag.m_scalar - avg).abs() < 1e-9);
}

#[test]
fn simulate_is_byte_identical_and_zero_noise_matches_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = magcal(&[
            "simulate",
            "--seed",
            "11",
            "--zero-noise",
            "--out",
            out.to_str().unwrap(),
        ]);
        let doc = stdout_json(&o);
        assert_eq!(doc["seed"], 11);
        assert_eq!(doc["config-hash"].as_str().unwrap().len(), 64);
    }
    for f in ["log.csv", "truth.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }

    let truth = magcal_cli::commands::load_truth(&a.join("truth.json")).unwrap();
    let log = magcal_cli::ingest_csv(&a.join("log.csv")).unwrap();
    for (k, r) in log.records.iter().enumerate() {
        let m = predict(&truth.cal, &truth.soft_iron, &truth.attitudes[k], &truth.fields[k]);
        let got = [r.mx, r.my, r.mz, r.mscalar];
        let want = [m.m_vec.x, m.m_vec.y, m.m_vec.z, m.m_scalar];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0), "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn calibrate_reports_each_method() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let cfg = write_config(dir.path(), "cfg.json", &quiet_config());
    stdout_json(&magcal(&[
        "simulate",
        "--config",
        &cfg,
        "--zero-noise",
        "--out",
        out.to_str().unwrap(),
    ]));
    let log = out.join("log.csv");
    let truth = out.join("truth.json");

    let fg = stdout_json(&magcal(&[
        "calibrate",
        "--config",
        &cfg,
        "--log",
        log.to_str().unwrap(),
        "--method",
        "fg",
        "--truth",
        truth.to_str().unwrap(),
    ]));
    assert_eq!(fg["method"], "fg");
    assert_eq!(fg["schema-version"], "1.0");
    assert!(fg["diagnostics"]["converged"].as_bool().unwrap());
    assert!(fg["metrics"]["eps-hi"].as_f64().unwrap() < 1e-6, "{}", fg["metrics"]);

    let tl = stdout_json(&magcal(&[
        "calibrate",
        "--log",
        log.to_str().unwrap(),
        "--method",
        "tl",
    ]));
    assert_eq!(tl["parameters"]["coefficients"].as_array().unwrap().len(), 18);

    let report_dir = dir.path().join("report");
    let ts = stdout_json(&magcal(&[
        "calibrate",
        "--log",
        log.to_str().unwrap(),
        "--method",
        "twostep",
        "--truth",
        truth.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]));
    let written: Value = serde_json::from_slice(&std::fs::read(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(written, ts);
    assert!(ts["metrics"]["eps-hi"].as_f64().unwrap() > 1.0);
}

#[test]
fn missing_file_exits_with_code_2() {
    let o = magcal(&["calibrate", "--log", "/nonexistent/log.csv"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr_json(&o);
    assert_eq!(err["error"]["kind"], "FileNotFound");
    assert_eq!(err["error"]["exit-code"], 2);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &serde_json::json!({ "seed": 1, "sead": 2 }));
    let o = magcal(&["simulate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"]["kind"], "InvalidConfig");
}

#[test]
fn numerical_failure_exits_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("still");
    let cfg = write_config(
        dir.path(),
        "still.json",
        &serde_json::json!({
            "scenario": { "profile": { "headings": [0.0, 0.0, 0.0, 0.0], "amplitude": 0.0, "heading-jitter": 0.0 } }
        }),
    );
    stdout_json(&magcal(&[
        "simulate",
        "--config",
        &cfg,
        "--zero-noise",
        "--out",
        out.to_str().unwrap(),
    ]));
    let o = magcal(&[
        "calibrate",
        "--log",
        out.join("log.csv").to_str().unwrap(),
        "--method",
        "twostep",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"]["kind"], "IllConditioned");
}

#[test]
fn smoke_study_is_fast_deterministic_and_schema_valid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "study.json",
        &serde_json::json!({ "hi-magnitudes": [1000.0], "estimators": ["fg", "twostep", "tl"] }),
    );
    let start = Instant::now();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let doc = stdout_json(&magcal(&[
            "study",
            "--config",
            &cfg,
            "--runs",
            "2",
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(doc["seed"], 5);
        assert_eq!(doc["runs"], 2);
        outputs.push(out);
    }
    assert!(start.elapsed().as_secs() < 60);
    for f in ["study.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(outputs[0].join(f)).unwrap(),
            std::fs::read(outputs[1].join(f)).unwrap(),
            "{f} differs"
        );
    }
    let csv = std::fs::read_to_string(outputs[0].join("study.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(csv.starts_with("estimator,hi_magnitude,field_q,run,seed,status"));

    let schema: Value = serde_json::from_str(include_str!("../schemas/summary.schema.json")).unwrap();
    let summary: Value = serde_json::from_slice(&std::fs::read(outputs[0].join("summary.json")).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&summary).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

#[test]
fn study_function_matches_binary_output() {
    let dir = tempfile::tempdir().unwrap();
    let spec = StudySpec {
        runs: 1,
        hi_magnitudes: vec![0.0],
        estimators: vec![Estimator::Twostep],
        scenario: Scenario {
            profile: ProfileSpec {
                sample_rate: 5.0,
                ..ProfileSpec::default()
            },
            ..Scenario::default()
        },
        ..StudySpec::default()
    };
    let doc = cmd_study(&spec, dir.path()).unwrap();
    let written: Value = serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(doc, written);
}

#[test]
fn delta_of_identical_logs_is_zero_and_reports_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    stdout_json(&magcal(&["simulate", "--seed", "4", "--out", out.to_str().unwrap()]));
    let log = out.join("log.csv");
    let doc = stdout_json(&magcal(&[
        "delta",
        "--before",
        log.to_str().unwrap(),
        "--after",
        log.to_str().unwrap(),
        "--reference",
        "-260.97,-122.07,-1742.65",
    ]));
    let delta: Vec<f64> = serde_json::from_value(doc["delta-h-hi"].clone()).unwrap();
    assert_eq!(delta, vec![0.0, 0.0, 0.0]);
    let eps: Vec<f64> = serde_json::from_value(doc["epsilon"].clone()).unwrap();
    assert_eq!(eps, vec![260.97, 122.07, 1742.65]);
    let norm = doc["epsilon-norm"].as_f64().unwrap();
    assert!((norm - (260.97f64.powi(2) + 122.07f64.powi(2) + 1742.65f64.powi(2)).sqrt()).abs() < 1e-9);
}

#[test]
fn library_entry_points_validate_inputs() {
    assert!(parse_vector("1,2").is_err());
    assert!(parse_vector("1,b,3").is_err());
    assert_eq!(
        parse_vector(" 1, -2 ,3").unwrap(),
        nalgebra::Vector3::new(1.0, -2.0, 3.0)
    );

    let cfg = RunConfig::default();
    assert!(matches!(
        load_measurements(&cfg, Path::new("/nonexistent.csv")),
        Err(CliError::FileNotFound(_))
    ));
    let bad = RunConfig {
        scenario: Scenario {
            noise: NoiseSpec {
                sigma_vec: -1.0,
                ..NoiseSpec::default()
            },
            truth: TruthSpec::default(),
            ..Scenario::default()
        },
        ..RunConfig::default()
    };
    let err = cmd_calibrate(&bad, Path::new("x.csv"), Estimator::Fg, None, None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
