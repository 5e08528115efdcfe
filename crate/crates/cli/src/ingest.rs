//! Sensor-log CSV reading and writing.
//!
//! Header (exact): `t,mx,my,mz,mscalar,wx,wy,wz,roll,pitch,yaw`. Units are
//! s, nT and rad. The gyro columns hold per-step angle increments unless the
//! log is read with [`IngestOptions::gyro_rates`].

use magcal_core::geometry::{dcm_from_rotvec, rotvec_from_dcm, Dcm, EulerRpy, RotVec};
use magcal_core::magmodel::MagMeasurement;
use magcal_core::measurement::{Epoch, MeasurementNoise, MeasurementSet};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const HEADER: [&str; 11] = [
    "t", "mx", "my", "mz", "mscalar", "wx", "wy", "wz", "roll", "pitch", "yaw",
];

/// Allowed relative deviation of any sample interval from the median.
pub const DT_JITTER: f64 = 0.01;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}, column {column}: {reason}")]
    ParseError { line: u64, column: String, reason: String },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("line {line}: time {t} does not increase")]
    MonotonicityError { line: u64, t: f64 },
    #[error("line {line}: interval {dt} s deviates more than 1% from the nominal {nominal} s")]
    JitterError { line: u64, dt: f64, nominal: f64 },
}

/// One CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: f64,
    pub mx: f64,
    pub my: f64,
    pub mz: f64,
    pub mscalar: f64,
    pub wx: f64,
    pub wy: f64,
    pub wz: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl LogRecord {
    fn values(&self) -> [f64; 11] {
        [
            self.t,
            self.mx,
            self.my,
            self.mz,
            self.mscalar,
            self.wx,
            self.wy,
            self.wz,
            self.roll,
            self.pitch,
            self.yaw,
        ]
    }
}

/// A validated, time-ordered sensor log.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorLog {
    pub records: Vec<LogRecord>,
    /// Nominal sample interval, s.
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct IngestOptions {
    /// Gyro columns are rates in rad/s rather than per-step increments.
    pub gyro_rates: bool,
    /// Keep every n-th sample after a moving-average anti-alias filter on
    /// the magnetometer channels; 0 or 1 disables decimation.
    pub decimate: usize,
}

fn open(path: &Path) -> Result<File, IngestError> {
    File::open(path).map_err(|source| match source.kind() {
        std::io::ErrorKind::NotFound => IngestError::FileNotFound(path.to_path_buf()),
        _ => IngestError::Io {
            path: path.to_path_buf(),
            source,
        },
    })
}

pub fn ingest_csv(path: &Path) -> Result<SensorLog, IngestError> {
    let mut text = String::new();
    open(path)?
        .read_to_string(&mut text)
        .map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    parse_csv(&text)
}

/// Parses and validates log text. Line numbers in errors are 1-based and
/// count the header.
pub fn parse_csv(text: &str) -> Result<SensorLog, IngestError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| IngestError::SchemaError(e.to_string()))?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    if names != HEADER {
        let missing: Vec<&str> = HEADER.iter().copied().filter(|h| !names.contains(h)).collect();
        let extra: Vec<&str> = names.iter().copied().filter(|n| !HEADER.contains(n)).collect();
        return Err(IngestError::SchemaError(format!(
            "expected header {}; missing [{}], unexpected [{}]",
            HEADER.join(","),
            missing.join(","),
            extra.join(",")
        )));
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            IngestError::ParseError {
                line,
                column: String::new(),
                reason: e.to_string(),
            }
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != HEADER.len() {
            return Err(IngestError::ParseError {
                line,
                column: String::new(),
                reason: format!("expected {} fields, found {}", HEADER.len(), row.len()),
            });
        }
        let mut v = [0.0; 11];
        for (i, field) in row.iter().enumerate() {
            let parsed: f64 = field.trim().parse().map_err(|_| IngestError::ParseError {
                line,
                column: HEADER[i].into(),
                reason: format!("'{field}' is not a number"),
            })?;
            if !parsed.is_finite() {
                return Err(IngestError::ParseError {
                    line,
                    column: HEADER[i].into(),
                    reason: "non-finite value".into(),
                });
            }
            v[i] = parsed;
        }
        records.push((
            line,
            LogRecord {
                t: v[0],
                mx: v[1],
                my: v[2],
                mz: v[3],
                mscalar: v[4],
                wx: v[5],
                wy: v[6],
                wz: v[7],
                roll: v[8],
                pitch: v[9],
                yaw: v[10],
            },
        ));
    }
    if records.len() < 2 {
        return Err(IngestError::SchemaError("a log needs at least two records".into()));
    }
    for w in records.windows(2) {
        if !(w[1].1.t > w[0].1.t) {
            return Err(IngestError::MonotonicityError {
                line: w[1].0,
                t: w[1].1.t,
            });
        }
    }
    let mut diffs: Vec<f64> = records.windows(2).map(|w| w[1].1.t - w[0].1.t).collect();
    diffs.sort_by(f64::total_cmp);
    let nominal = diffs[diffs.len() / 2];
    for w in records.windows(2) {
        let dt = w[1].1.t - w[0].1.t;
        if (dt - nominal).abs() > DT_JITTER * nominal {
            return Err(IngestError::JitterError {
                line: w[1].0,
                dt,
                nominal,
            });
        }
    }
    let n = records.len();
    let dt = (records[n - 1].1.t - records[0].1.t) / (n - 1) as f64;
    Ok(SensorLog {
        records: records.into_iter().map(|(_, r)| r).collect(),
        dt,
    })
}

impl SensorLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn from_measurements(meas: &MeasurementSet) -> SensorLog {
        let records = meas
            .epochs
            .iter()
            .map(|e| LogRecord {
                t: e.t,
                mx: e.mag.m_vec.x,
                my: e.mag.m_vec.y,
                mz: e.mag.m_vec.z,
                mscalar: e.mag.m_scalar,
                wx: e.gyro.0.x,
                wy: e.gyro.0.y,
                wz: e.gyro.0.z,
                roll: e.rpy.roll,
                pitch: e.rpy.pitch,
                yaw: e.rpy.yaw,
            })
            .collect();
        SensorLog { records, dt: meas.dt }
    }

    /// Measurement set with the given noise covariances, after optional
    /// rate integration and decimation.
    pub fn to_measurements(&self, noise: MeasurementNoise, opts: &IngestOptions) -> MeasurementSet {
        let scale = if opts.gyro_rates { self.dt } else { 1.0 };
        let mut epochs: Vec<Epoch> = self
            .records
            .iter()
            .enumerate()
            .map(|(k, r)| Epoch {
                t: r.t,
                mag: MagMeasurement {
                    m_vec: Vector3::new(r.mx, r.my, r.mz),
                    m_scalar: r.mscalar,
                },
                gyro: if k == 0 {
                    RotVec::zeros()
                } else {
                    RotVec::new(r.wx * scale, r.wy * scale, r.wz * scale)
                },
                rpy: EulerRpy::new(r.roll, r.pitch, r.yaw),
            })
            .collect();
        let mut dt = self.dt;
        if opts.decimate > 1 {
            epochs = decimate(&epochs, opts.decimate);
            dt *= opts.decimate as f64;
        }
        MeasurementSet { dt, epochs, noise }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), IngestError> {
        let io = |source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = File::create(path).map_err(io)?;
        file.write_all(self.to_csv_string().as_bytes()).map_err(io)
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for r in &self.records {
            w.write_record(r.values().iter().map(|v| v.to_string()))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
    }
}

/// Moving average of the magnetometer over each window ending at a kept
/// sample, composed gyro increments, and the attitude at the kept sample.
fn decimate(epochs: &[Epoch], factor: usize) -> Vec<Epoch> {
    let mut out = vec![epochs[0]];
    let mut k = factor;
    while k < epochs.len() {
        let window = &epochs[k + 1 - factor..=k];
        let n = window.len() as f64;
        let m_vec = window.iter().map(|e| e.mag.m_vec).sum::<Vector3<f64>>() / n;
        let m_scalar = window.iter().map(|e| e.mag.m_scalar).sum::<f64>() / n;
        let increment = window
            .iter()
            .fold(Dcm::identity(), |acc, e| dcm_from_rotvec(&e.gyro) * acc);
        out.push(Epoch {
            t: epochs[k].t,
            mag: MagMeasurement { m_vec, m_scalar },
            gyro: rotvec_from_dcm(&increment),
            rpy: epochs[k].rpy,
        });
        k += factor;
    }
    out
}
