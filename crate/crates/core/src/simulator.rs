//! Synthetic calibration runs: doublet attitude profiles on four headings, a
//! random-walk external field, Table-style calibration truth and noisy
//! measurements.
//!
//! Every generator takes an explicit seed. Sub-streams (profile, field,
//! truth parameters, measurement noise) are derived from one run seed with
//! [`derive_seed`], so two runs with the same seed are bit-identical.

use crate::geometry::{dcm_from_euler, relative_rotvec, Dcm, EulerRpy, RotVec};
use crate::magmodel::{predict, CalParams, ExternalField, ScaleOrtho, SoftIron};
use crate::measurement::{Epoch, MeasurementNoise, MeasurementSet};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid noise specification: {0}")]
    InvalidNoise(String),
    #[error("invalid truth specification: {0}")]
    InvalidTruth(String),
    #[error("truth record is empty")]
    EmptyTruth,
}

/// SplitMix64 finalizer used to derive independent stream seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_PROFILE: u64 = 1;
const STREAM_FIELD: u64 = 2;
const STREAM_TRUTH: u64 = 3;
const STREAM_NOISE: u64 = 4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gauss3<R: Rng>(rng: &mut R) -> Vector3<f64> {
    Vector3::new(gauss(rng), gauss(rng), gauss(rng))
}

fn random_direction<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = gauss3(rng);
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn wrap_pi(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// Attitude profile parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct ProfileSpec {
    /// Yaw set-points, rad.
    pub headings: Vec<f64>,
    /// Doublet deflection, rad.
    pub amplitude: f64,
    /// Doublet period (one +A lobe and one -A lobe), s.
    pub period: f64,
    /// Level hold before the doublets on each heading, s.
    pub dwell: f64,
    /// Duration of each heading change, s.
    pub transition: f64,
    pub sample_rate: f64,
    /// Standard deviation of the seeded perturbation of each heading, rad.
    pub heading_jitter: f64,
    /// Passes through the heading sequence.
    pub cycles: usize,
}

impl Default for ProfileSpec {
    fn default() -> Self {
        // 4 x (2.4 s + 3 x 3.2 s) + 3 x 4 s = 60 s at 10 Hz: 601 epochs, k = 600.
        ProfileSpec {
            headings: vec![0.0, FRAC_PI_2, PI, -FRAC_PI_2],
            amplitude: 15f64.to_radians(),
            period: 3.2,
            dwell: 2.4,
            transition: 4.0,
            sample_rate: 10.0,
            heading_jitter: 2f64.to_radians(),
            cycles: 1,
        }
    }
}

impl ProfileSpec {
    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidProfile(m.to_string()));
        if self.headings.len() != 4 {
            return bad("exactly four headings are required");
        }
        if !(self.amplitude >= 0.0 && self.amplitude <= FRAC_PI_4) {
            return bad("amplitude must lie in [0, pi/4]");
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return bad("sample rate must be positive");
        }
        if !(self.period > 0.0 && self.dwell >= 0.0 && self.transition >= 0.0) {
            return bad("durations must be nonnegative and the period positive");
        }
        if !(self.heading_jitter >= 0.0) {
            return bad("heading jitter must be nonnegative");
        }
        if self.cycles == 0 {
            return bad("at least one cycle is required");
        }
        Ok(())
    }

    fn samples(&self, seconds: f64) -> usize {
        (seconds * self.sample_rate).round() as usize
    }

    /// Samples per doublet lobe, rounded up to an even count so the lobe peak
    /// falls on a sample.
    fn lobe_samples(&self) -> usize {
        let n = self.samples(self.period / 2.0).max(2);
        n + n % 2
    }
}

#[derive(Clone, Copy)]
enum Axis {
    Roll,
    Pitch,
    Yaw,
}

/// Roll/pitch/yaw sequence: on each heading a level dwell, then pitch, roll
/// and yaw doublets, then a raised-cosine turn to the next heading. The
/// heading sequence is flown `cycles` times.
pub fn generate_profile(spec: &ProfileSpec, seed: u64) -> Result<Vec<EulerRpy>, SimError> {
    spec.validate()?;
    let mut rng = rng(derive_seed(seed, STREAM_PROFILE));
    let jittered: Vec<f64> = spec
        .headings
        .iter()
        .map(|h| h + spec.heading_jitter * gauss(&mut rng))
        .collect();
    let headings: Vec<f64> = (0..spec.cycles).flat_map(|_| jittered.iter().copied()).collect();

    let lobe = spec.lobe_samples();
    let dwell = spec.samples(spec.dwell);
    let turn = spec.samples(spec.transition);
    let mut out = Vec::new();

    for (i, &heading) in headings.iter().enumerate() {
        let level = EulerRpy::new(0.0, 0.0, wrap_pi(heading));
        out.extend(std::iter::repeat_n(level, dwell));
        for axis in [Axis::Pitch, Axis::Roll, Axis::Yaw] {
            for s in 0..2 * lobe {
                let (sign, j) = if s < lobe { (1.0, s) } else { (-1.0, s - lobe) };
                let shape = 0.5 * (1.0 - (2.0 * PI * j as f64 / lobe as f64).cos());
                let d = sign * spec.amplitude * shape;
                let mut e = level;
                match axis {
                    Axis::Roll => e.roll = d,
                    Axis::Pitch => e.pitch = d,
                    Axis::Yaw => e.yaw = wrap_pi(heading + d),
                }
                out.push(e);
            }
        }
        if let Some(&next) = headings.get(i + 1) {
            for s in 0..turn {
                let f = 0.5 * (1.0 - (PI * s as f64 / turn as f64).cos());
                out.push(EulerRpy::new(0.0, 0.0, wrap_pi(heading + (next - heading) * f)));
            }
        }
    }
    // closing sample at the final level attitude
    out.push(EulerRpy::new(0.0, 0.0, wrap_pi(*headings.last().unwrap())));
    Ok(out)
}

/// External field sequence: uniformly oriented initial field of the given
/// magnitude followed by a per-axis random walk of intensity `q` nT/sqrt(hr).
pub fn generate_field(epochs: usize, e0_magnitude: f64, q: f64, dt: f64, seed: u64) -> Vec<ExternalField> {
    let mut rng = rng(derive_seed(seed, STREAM_FIELD));
    let mut e = random_direction(&mut rng) * e0_magnitude;
    let step_sigma = q * (dt / 3600.0).sqrt();
    let mut out = Vec::with_capacity(epochs);
    for k in 0..epochs {
        if k > 0 && step_sigma > 0.0 {
            e += gauss3(&mut rng) * step_sigma;
        }
        out.push(e);
    }
    out
}

/// Sensor noise used to corrupt simulated measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Vector magnetometer, nT per axis.
    pub sigma_vec: f64,
    /// Scalar magnetometer, nT.
    pub sigma_scalar: f64,
    /// Gyro bias instability, rad/s (steady-state sigma of the Gauss-Markov bias).
    pub gyro_bias_instability: f64,
    /// Gyro angle random walk, rad/sqrt(s).
    pub gyro_arw: f64,
    /// Correlation time of the gyro bias process, s.
    pub gyro_bias_correlation_time: f64,
    /// Euler angle noise, rad per axis.
    pub sigma_attitude: f64,
    /// External field random walk, nT/sqrt(hr).
    pub field_random_walk: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma_vec: 5.0,
            sigma_scalar: 1.0,
            gyro_bias_instability: 3.87e-5,
            gyro_arw: 9.89e-5,
            gyro_bias_correlation_time: 1000.0,
            sigma_attitude: 0.043,
            field_random_walk: 0.0,
        }
    }
}

impl NoiseSpec {
    /// No noise on any channel and a constant field.
    pub fn zero() -> Self {
        NoiseSpec {
            sigma_vec: 0.0,
            sigma_scalar: 0.0,
            gyro_bias_instability: 0.0,
            gyro_arw: 0.0,
            gyro_bias_correlation_time: 1000.0,
            sigma_attitude: 0.0,
            field_random_walk: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let all = [
            self.sigma_vec,
            self.sigma_scalar,
            self.gyro_bias_instability,
            self.gyro_arw,
            self.sigma_attitude,
            self.field_random_walk,
        ];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(SimError::InvalidNoise(
                "all sigmas must be finite and nonnegative".into(),
            ));
        }
        if !(self.gyro_bias_correlation_time > 0.0) {
            return Err(SimError::InvalidNoise("bias correlation time must be positive".into()));
        }
        Ok(())
    }

    /// Per-step gyro increment sigma: white angle noise plus the bias
    /// integrated over one step.
    pub fn gyro_step_sigma(&self, dt: f64) -> f64 {
        (self.gyro_arw * self.gyro_arw * dt + (self.gyro_bias_instability * dt).powi(2)).sqrt()
    }

    /// Covariances attached to synthesized measurements. Channels simulated
    /// without noise fall back to the nominal sensor sigmas so the estimator
    /// weighting stays defined.
    pub fn weighting(&self, dt: f64) -> MeasurementNoise {
        let nominal = NoiseSpec::default();
        let pick = |v: f64, d: f64| if v > 0.0 { v } else { d };
        let gyro = self.gyro_step_sigma(dt);
        MeasurementNoise::from_sigmas(
            pick(self.sigma_vec, nominal.sigma_vec),
            pick(self.sigma_scalar, nominal.sigma_scalar),
            pick(gyro, nominal.gyro_step_sigma(dt)),
            pick(self.sigma_attitude, nominal.sigma_attitude),
        )
    }
}

/// Distributions of the static calibration truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TruthSpec {
    /// Initial external field magnitude, nT.
    pub e0_magnitude: f64,
    /// Hard-iron magnitude, nT (random orientation).
    pub h_hi_magnitude: f64,
    /// Vector-sensor bias magnitude, nT (random orientation).
    pub h_vec_magnitude: f64,
    /// Sigma of the scale factors around 1.
    pub scale_sigma: f64,
    /// Sigma of the non-orthogonality angles, rad.
    pub angle_sigma: f64,
    /// Sigma of the symmetric soft-iron perturbation entries.
    pub soft_iron_sigma: f64,
}

impl Default for TruthSpec {
    fn default() -> Self {
        TruthSpec {
            e0_magnitude: 50000.0,
            h_hi_magnitude: 5000.0,
            h_vec_magnitude: 1000.0,
            scale_sigma: 0.1,
            angle_sigma: 0.01,
            soft_iron_sigma: 1e-5,
        }
    }
}

impl TruthSpec {
    /// All distortions off: unit scale, no offsets, identity soft iron.
    pub fn undistorted() -> Self {
        TruthSpec {
            h_hi_magnitude: 0.0,
            h_vec_magnitude: 0.0,
            scale_sigma: 0.0,
            angle_sigma: 0.0,
            soft_iron_sigma: 0.0,
            ..TruthSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.e0_magnitude > 0.0) {
            return Err(SimError::InvalidTruth("e0 magnitude must be positive".into()));
        }
        let rest = [
            self.h_hi_magnitude,
            self.h_vec_magnitude,
            self.scale_sigma,
            self.angle_sigma,
            self.soft_iron_sigma,
        ];
        if rest.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(SimError::InvalidTruth(
                "magnitudes and sigmas must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Simulation ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub dt: f64,
    pub euler: Vec<EulerRpy>,
    pub attitudes: Vec<Dcm>,
    pub fields: Vec<ExternalField>,
    pub cal: CalParams,
    pub soft_iron: SoftIron,
}

impl TruthRecord {
    pub fn len(&self) -> usize {
        self.attitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attitudes.is_empty()
    }
}

/// Draws calibration parameters and soft iron.
pub fn sample_calibration(spec: &TruthSpec, seed: u64) -> (CalParams, SoftIron) {
    let mut rng = rng(derive_seed(seed, STREAM_TRUTH));
    let h_hi = random_direction(&mut rng) * spec.h_hi_magnitude;
    let h_vec = random_direction(&mut rng) * spec.h_vec_magnitude;
    let scale = Normal::new(1.0, spec.scale_sigma).expect("validated sigma");
    let angle = Normal::new(0.0, spec.angle_sigma).expect("validated sigma");
    let t_vec = loop {
        let t = ScaleOrtho {
            kx: scale.sample(&mut rng),
            ky: scale.sample(&mut rng),
            kz: scale.sample(&mut rng),
            alpha: angle.sample(&mut rng),
            beta: angle.sample(&mut rng),
            gamma: angle.sample(&mut rng),
        };
        if t.validate().is_ok() {
            break t;
        }
    };
    let soft_iron = loop {
        let s = spec.soft_iron_sigma;
        let mut d = [0.0; 6];
        for v in d.iter_mut() {
            *v = s * gauss(&mut rng);
        }
        if let Ok(si) = SoftIron::new(1.0 + d[0], d[1], d[2], 1.0 + d[3], d[4], 1.0 + d[5]) {
            break si;
        }
    };
    (CalParams { h_hi, h_vec, t_vec }, soft_iron)
}

/// Full truth record for one run.
pub fn generate_truth(
    profile: &ProfileSpec,
    truth: &TruthSpec,
    field_random_walk: f64,
    seed: u64,
) -> Result<TruthRecord, SimError> {
    truth.validate()?;
    let euler = generate_profile(profile, seed)?;
    let attitudes = euler.iter().map(dcm_from_euler).collect::<Vec<_>>();
    let fields = generate_field(euler.len(), truth.e0_magnitude, field_random_walk, profile.dt(), seed);
    let (cal, soft_iron) = sample_calibration(truth, seed);
    Ok(TruthRecord {
        dt: profile.dt(),
        euler,
        attitudes,
        fields,
        cal,
        soft_iron,
    })
}

/// Noisy measurements of a truth record.
pub fn synthesize_measurements(truth: &TruthRecord, noise: &NoiseSpec, seed: u64) -> Result<MeasurementSet, SimError> {
    noise.validate()?;
    if truth.is_empty() {
        return Err(SimError::EmptyTruth);
    }
    let mut rng = rng(derive_seed(seed, STREAM_NOISE));
    let dt = truth.dt;
    let phi = (-dt / noise.gyro_bias_correlation_time).exp();
    let bias_drive = noise.gyro_bias_instability * (1.0 - phi * phi).sqrt();
    let mut bias = gauss3(&mut rng) * noise.gyro_bias_instability;
    let arw_step = noise.gyro_arw * dt.sqrt();

    let mut epochs = Vec::with_capacity(truth.len());
    for k in 0..truth.len() {
        let c = &truth.attitudes[k];
        let mut mag = predict(&truth.cal, &truth.soft_iron, c, &truth.fields[k]);
        mag.m_vec += gauss3(&mut rng) * noise.sigma_vec;
        mag.m_scalar += gauss(&mut rng) * noise.sigma_scalar;

        let gyro = if k == 0 {
            RotVec::zeros()
        } else {
            bias = bias * phi + gauss3(&mut rng) * bias_drive;
            let inc = relative_rotvec(&truth.attitudes[k - 1], c);
            RotVec(inc.0 + bias * dt + gauss3(&mut rng) * arw_step)
        };

        let e = truth.euler[k];
        let s = noise.sigma_attitude;
        let rpy = EulerRpy::new(
            wrap_pi(e.roll + s * gauss(&mut rng)),
            e.pitch + s * gauss(&mut rng),
            wrap_pi(e.yaw + s * gauss(&mut rng)),
        );
        epochs.push(Epoch {
            t: k as f64 * dt,
            mag,
            gyro,
            rpy,
        });
    }
    Ok(MeasurementSet {
        dt,
        epochs,
        noise: noise.weighting(dt),
    })
}

/// Everything needed to simulate one calibration run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct Scenario {
    pub profile: ProfileSpec,
    pub truth: TruthSpec,
    pub noise: NoiseSpec,
}

/// Truth and measurements for one seeded run.
pub fn simulate(scenario: &Scenario, seed: u64) -> Result<(TruthRecord, MeasurementSet), SimError> {
    let truth = generate_truth(
        &scenario.profile,
        &scenario.truth,
        scenario.noise.field_random_walk,
        seed,
    )?;
    let meas = synthesize_measurements(&truth, &scenario.noise, seed)?;
    Ok((truth, meas))
}
