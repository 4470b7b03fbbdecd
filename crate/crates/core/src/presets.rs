//! Operating points of the fiber-trap experiment and calibrated defaults.

use crate::atom::{rabi_from_saturation, LaserDrive, Level, LevelScheme};
use crate::constants::mhz_to_angular;

/// Saturation parameter of the 397 nm beam for the spectrum (0.39 µW).
pub const SPECTRUM_SATURATION: f64 = 1.3;
/// Saturation parameter for the correlation measurement: 0.16 µW, scaled
/// linearly in power from the 0.39 µW ≙ 1.3 I_s calibration.
pub const CORRELATION_SATURATION: f64 = 1.3 * 0.16 / 0.39;
/// 397 nm detuning during the correlation measurement, MHz.
pub const CORRELATION_DETUNING_MHZ: f64 = -6.0;

// Repump calibration. Only the beam powers are known, so these are free
// parameters. The 850 nm Rabi frequency sets how long the ion stays shelved
// in D3/2, which broadens the 397 nm line to the observed width. The 854 nm
// beam is kept off Raman resonance with the 850 nm beam: with both resonant,
// the D3/2-P3/2-D5/2 system has a dark superposition that traps population.

/// 850 nm repump Rabi frequency, MHz.
pub const REPUMP_850_RABI_MHZ: f64 = 10.0;
/// 850 nm repump detuning, MHz.
pub const REPUMP_850_DETUNING_MHZ: f64 = 0.0;
/// 854 nm repump Rabi frequency, MHz.
pub const REPUMP_854_RABI_MHZ: f64 = 10.0;
/// 854 nm repump detuning, MHz.
pub const REPUMP_854_DETUNING_MHZ: f64 = 10.0;

/// The default 850/854 nm repump drives.
pub fn repump_drives() -> [LaserDrive; 2] {
    [
        LaserDrive::new(
            Level::D32,
            Level::P32,
            mhz_to_angular(REPUMP_850_RABI_MHZ),
            mhz_to_angular(REPUMP_850_DETUNING_MHZ),
        ),
        LaserDrive::new(
            Level::D52,
            Level::P32,
            mhz_to_angular(REPUMP_854_RABI_MHZ),
            mhz_to_angular(REPUMP_854_DETUNING_MHZ),
        ),
    ]
}

/// Appends the default repump drives to `drives`.
pub fn with_repumps(drives: &[LaserDrive]) -> Vec<LaserDrive> {
    let mut all = drives.to_vec();
    all.extend(repump_drives());
    all
}

/// 397 nm cooling drive with saturation parameter `s` (relative to the P1/2
/// linewidth) and detuning in rad/s.
pub fn cooling_drive(scheme: &LevelScheme, s: f64, detuning: f64) -> LaserDrive {
    let gamma = scheme.total_decay_rate(Level::P12);
    LaserDrive::new(Level::S12, Level::P12, rabi_from_saturation(s, gamma), detuning)
}

/// Cooling plus repump drives at the spectrum settings.
pub fn spectrum_drives(scheme: &LevelScheme, detuning: f64) -> Vec<LaserDrive> {
    with_repumps(&[cooling_drive(scheme, SPECTRUM_SATURATION, detuning)])
}

/// Cooling plus repump drives at the correlation-measurement settings.
pub fn correlation_drives(scheme: &LevelScheme) -> Vec<LaserDrive> {
    with_repumps(&[cooling_drive(scheme, CORRELATION_SATURATION, mhz_to_angular(CORRELATION_DETUNING_MHZ))])
}
