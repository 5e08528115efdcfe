//! Butterworth band-pass as cascaded second-order sections (bilinear
//! transform with frequency prewarping) and zero-phase forward-backward
//! filtering.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::BaselineError;

/// Band-pass design: high-pass at `low_hz`, low-pass at `high_hz`, each of `order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct FilterSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            low_hz: 0.1,
            high_hz: 1.0,
            order: 4,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self, sample_rate: f64) -> Result<(), BaselineError> {
        let nyquist = 0.5 * sample_rate;
        if self.order == 0 || !self.order.is_multiple_of(2) {
            return Err(BaselineError::InvalidFilter("order must be even and positive".into()));
        }
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < nyquist) {
            return Err(BaselineError::InvalidFilter(format!(
                "need 0 < low ({}) < high ({}) < nyquist ({nyquist})",
                self.low_hz, self.high_hz
            )));
        }
        Ok(())
    }

    pub fn design(&self, sample_rate: f64) -> Result<Cascade, BaselineError> {
        self.validate(sample_rate)?;
        let mut sections = butterworth(self.order, self.low_hz, sample_rate, Kind::HighPass);
        sections.extend(butterworth(self.order, self.high_hz, sample_rate, Kind::LowPass));
        Ok(Cascade { sections })
    }
}

#[derive(Clone, Copy)]
enum Kind {
    LowPass,
    HighPass,
}

/// `H(z) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// DC gain.
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct form II state for a constant input `x`.
    fn steady_state(&self, x: f64) -> [f64; 2] {
        let y = self.dc_gain() * x;
        [y - self.b[0] * x, self.b[2] * x - self.a[1] * y]
    }

    fn run(&self, data: &mut [f64], mut z: [f64; 2]) {
        for v in data.iter_mut() {
            let x = *v;
            let y = self.b[0] * x + z[0];
            z[0] = self.b[1] * x - self.a[0] * y + z[1];
            z[1] = self.b[2] * x - self.a[1] * y;
            *v = y;
        }
    }
}

fn butterworth(order: usize, cutoff: f64, sample_rate: f64, kind: Kind) -> Vec<Biquad> {
    let k = (PI * cutoff / sample_rate).tan();
    (1..=order / 2)
        .map(|i| {
            let q = 1.0 / (2.0 * (PI * (2 * i - 1) as f64 / (2 * order) as f64).sin());
            let norm = 1.0 / (1.0 + k / q + k * k);
            let a = [2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm];
            let b = match kind {
                Kind::LowPass => {
                    let b0 = k * k * norm;
                    [b0, 2.0 * b0, b0]
                }
                Kind::HighPass => [norm, -2.0 * norm, norm],
            };
            Biquad { b, a }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    pub sections: Vec<Biquad>,
}

impl Cascade {
    /// Single forward pass starting from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            s.run(&mut y, [0.0; 2]);
        }
        y
    }

    /// Zero-phase forward-backward filtering with odd reflection padding of
    /// `pad` samples and steady-state initial conditions at each end.
    pub fn filtfilt(&self, x: &[f64], pad: usize) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = pad.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        self.pass(&mut ext);
        ext.reverse();
        self.pass(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }

    fn pass(&self, data: &mut [f64]) {
        for s in &self.sections {
            let z = s.steady_state(data[0]);
            s.run(data, z);
        }
    }
}
