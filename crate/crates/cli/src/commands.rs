//! Subcommand implementations. Each returns the JSON document it reports and
//! writes any files under the output directory.

use crate::config::{config_hash, RunConfig, SCHEMA_VERSION};
use crate::error::CliError;
use crate::ingest::{ingest_csv, SensorLog};
use magcal_core::baselines::{tolles_lawson_calibrate, twostep_with};
use magcal_core::eval::{compute_metrics, delta_hi_experiment, run_study, Estimator, StudySpec};
use magcal_core::graph::WeightConfig;
use magcal_core::measurement::MeasurementSet;
use magcal_core::simulator::{simulate, NoiseSpec, TruthRecord};
use magcal_core::solver::calibrate;
use nalgebra::Vector3;
use serde::Serialize;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

pub const LOG_FILE: &str = "log.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const REPORT_FILE: &str = "report.json";
pub const STUDY_CSV: &str = "study.csv";
pub const SUMMARY_FILE: &str = "summary.json";

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::from_io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::from_io(dir, e))
}

fn header<T: Serialize>(command: &str, config: &T, seed: u64) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("schema-version".into(), json!(SCHEMA_VERSION));
    m.insert("command".into(), json!(command));
    m.insert("config-hash".into(), json!(config_hash(config)));
    m.insert("seed".into(), json!(seed));
    m
}

/// Simulates one run; writes the sensor log and the truth record.
pub fn cmd_simulate(mut cfg: RunConfig, out: &Path, zero_noise: bool) -> Result<Value, CliError> {
    if zero_noise {
        cfg.scenario.noise = NoiseSpec::zero();
    }
    cfg.validate()?;
    let (truth, meas) = simulate(&cfg.scenario, cfg.seed).map_err(|e| CliError::InvalidConfig(e.to_string()))?;
    ensure_dir(out)?;
    SensorLog::from_measurements(&meas).write_csv(&out.join(LOG_FILE))?;
    let mut doc = header("simulate", &cfg, cfg.seed);
    doc.insert("epochs".into(), json!(meas.len()));
    doc.insert("dt".into(), json!(meas.dt));
    doc.insert("truth".into(), serde_json::to_value(&truth).expect("truth serializes"));
    let doc = Value::Object(doc);
    write_json(&out.join(TRUTH_FILE), &doc)?;
    Ok(json!({
        "schema-version": SCHEMA_VERSION,
        "command": "simulate",
        "config-hash": doc["config-hash"],
        "seed": cfg.seed,
        "epochs": meas.len(),
        "log": out.join(LOG_FILE),
        "truth": out.join(TRUTH_FILE),
    }))
}

/// Reads a log and attaches the configured measurement weighting.
pub fn load_measurements(cfg: &RunConfig, path: &Path) -> Result<MeasurementSet, CliError> {
    let log = ingest_csv(path)?;
    let noise = cfg.scenario.noise.weighting(log.dt * cfg.ingest.decimate.max(1) as f64);
    Ok(log.to_measurements(noise, &cfg.ingest))
}

/// Reads a truth record written by `simulate`.
pub fn load_truth(path: &Path) -> Result<TruthRecord, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
    let doc: Value =
        serde_json::from_str(&text).map_err(|e| CliError::InvalidConfig(format!("{}: {e}", path.display())))?;
    let truth = doc.get("truth").cloned().unwrap_or(doc);
    serde_json::from_value(truth).map_err(|e| CliError::InvalidConfig(format!("{}: {e}", path.display())))
}

fn hi_metrics(truth: &TruthRecord, h_hat: &Vector3<f64>) -> Value {
    let err = truth.cal.h_hi - h_hat;
    json!({ "eps-hi": err.norm(), "hi-error": [err.x, err.y, err.z] })
}

/// Runs one calibrator on a log.
pub fn cmd_calibrate(
    cfg: &RunConfig,
    log: &Path,
    method: Estimator,
    truth: Option<&Path>,
    out: Option<&Path>,
) -> Result<Value, CliError> {
    cfg.validate()?;
    let meas = load_measurements(cfg, log)?;
    let truth = truth.map(load_truth).transpose()?;
    let mut doc = header("calibrate", cfg, cfg.seed);
    doc.insert("method".into(), json!(method.name()));
    doc.insert("epochs".into(), json!(meas.len()));
    match method {
        Estimator::Fg | Estimator::FgFixed => {
            let weights = match method {
                Estimator::FgFixed => WeightConfig {
                    field_change: magcal_core::graph::FieldChangeWeight::Fixed,
                    ..cfg.weights.clone()
                },
                _ => cfg.weights.clone(),
            };
            let report = calibrate(&meas, &weights, &cfg.solver)?;
            let cal = &report.state.cal;
            doc.insert(
                "parameters".into(),
                json!({
                    "h-hi": cal.h_hi,
                    "h-vec": cal.h_vec,
                    "t-vec": cal.t_vec,
                }),
            );
            let sigma: Vec<f64> = (0..12).map(|i| report.param_covariance[(i, i)].sqrt()).collect();
            doc.insert("parameter-sigma".into(), json!(sigma));
            doc.insert(
                "diagnostics".into(),
                json!({
                    "converged": report.converged,
                    "termination": report.termination,
                    "iterations": report.iterations,
                    "initial-cost": report.initial_cost,
                    "final-cost": report.final_cost,
                    "gradient-norm": report.gradient_norm,
                    "scaled-gradient-norm": report.scaled_gradient_norm,
                    "last-step": report.last_step,
                    "condition-number": report.condition.condition_number(),
                }),
            );
            if let Some(t) = &truth {
                let m = compute_metrics(t, &report.state).map_err(|e| CliError::InvalidConfig(e.to_string()))?;
                doc.insert("metrics".into(), serde_json::to_value(m).expect("metrics serialize"));
            }
        }
        Estimator::Twostep => {
            let magnitude = match &truth {
                Some(t) => t.fields[0].norm(),
                None => cfg.scenario.truth.e0_magnitude,
            };
            let r = twostep_with(&meas, magnitude, &cfg.twostep)?;
            doc.insert(
                "parameters".into(),
                json!({ "bias": r.bias, "field-magnitude": magnitude }),
            );
            doc.insert(
                "diagnostics".into(),
                json!({ "converged": r.converged, "iterations": r.iterations, "cost-history": r.cost_history }),
            );
            if let Some(t) = &truth {
                doc.insert("metrics".into(), hi_metrics(t, &r.bias));
            }
        }
        Estimator::Tl => {
            let c = tolles_lawson_calibrate(&meas, &cfg.tolles_lawson)?;
            let comp = c.compensate(&meas);
            doc.insert(
                "parameters".into(),
                json!({
                    "terms": c.terms,
                    "coefficients": c.coefficients,
                    "permanent": c.permanent(),
                    "induced": c.induced(),
                    "eddy": c.eddy(),
                }),
            );
            let raw: Vec<f64> = meas.scalar_samples().collect();
            let std = |v: &[f64]| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
            };
            doc.insert(
                "diagnostics".into(),
                json!({ "scalar-std-raw": std(&raw), "scalar-std-compensated": std(&comp) }),
            );
            if let (Some(t), Some(p)) = (&truth, c.permanent()) {
                doc.insert("metrics".into(), hi_metrics(t, &p));
            }
        }
    }
    let doc = Value::Object(doc);
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_json(&dir.join(REPORT_FILE), &doc)?;
    }
    Ok(doc)
}

/// Runs a Monte Carlo study; writes per-run rows as CSV and the aggregate
/// summary as JSON.
pub fn cmd_study(spec: &StudySpec, out: &Path) -> Result<Value, CliError> {
    let table = run_study(spec)?;
    ensure_dir(out)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &table.rows {
        w.serialize(row).map_err(|e| CliError::Io {
            path: out.join(STUDY_CSV),
            message: e.to_string(),
        })?;
    }
    let bytes = w.into_inner().expect("in-memory flush");
    write_file(&out.join(STUDY_CSV), &bytes)?;

    let failures: usize = table.cells.iter().map(|c| c.failures).sum();
    let mut doc = header("study", spec, spec.base_seed);
    doc.insert("runs".into(), json!(spec.runs));
    doc.insert("rows".into(), json!(table.rows.len()));
    doc.insert("failures".into(), json!(failures));
    doc.insert("spec".into(), serde_json::to_value(spec).expect("spec serializes"));
    doc.insert(
        "cells".into(),
        serde_json::to_value(&table.cells).expect("cells serialize"),
    );
    let doc = Value::Object(doc);
    write_json(&out.join(SUMMARY_FILE), &doc)?;
    Ok(doc)
}

/// Calibrates a before and an after log and reports the hard-iron change.
pub fn cmd_delta(
    cfg: &RunConfig,
    before: &Path,
    after: &Path,
    reference: Option<Vector3<f64>>,
) -> Result<Value, CliError> {
    cfg.validate()?;
    let b = load_measurements(cfg, before)?;
    let a = load_measurements(cfg, after)?;
    let r = delta_hi_experiment(&b, &a, &cfg.weights, &cfg.solver, reference)?;
    let mut doc = header("delta", cfg, cfg.seed);
    doc.insert("before-h-hi".into(), json!(r.before_h_hi));
    doc.insert("after-h-hi".into(), json!(r.after_h_hi));
    doc.insert("delta-h-hi".into(), json!(r.delta));
    doc.insert("reference".into(), json!(r.reference));
    doc.insert("epsilon".into(), json!(r.error));
    doc.insert("epsilon-norm".into(), json!(r.error_norm));
    doc.insert("converged".into(), json!(r.before_converged && r.after_converged));
    Ok(Value::Object(doc))
}

/// Parses `x,y,z`.
pub fn parse_vector(text: &str) -> Result<Vector3<f64>, CliError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let bad = || CliError::InvalidConfig(format!("expected three comma-separated numbers, got '{text}'"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut v = Vector3::zeros();
    for (i, p) in parts.iter().enumerate() {
        v[i] = p.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(bad)?;
    }
    Ok(v)
}

pub fn default_out() -> PathBuf {
    PathBuf::from("out")
}
