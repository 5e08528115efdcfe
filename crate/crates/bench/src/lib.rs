//! Shared fixtures for the criterion benches.

use magcal_core::{simulate, MeasurementSet, Scenario};

/// A default-scenario measurement set, truncated to `steps + 1` epochs.
pub fn fixture(seed: u64, steps: usize) -> MeasurementSet {
    let (_, mut meas) = simulate(&Scenario::default(), seed).expect("default scenario simulates");
    meas.epochs.truncate(steps + 1);
    meas
}
