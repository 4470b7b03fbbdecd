//! Physical constants (CODATA 2018) and unit helpers.

use std::f64::consts::PI;

/// Elementary charge, C.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// Atomic mass unit, kg.
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
/// Speed of light, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Converts a frequency in MHz (cycles) to an angular frequency in rad/s.
pub fn mhz_to_angular(f_mhz: f64) -> f64 {
    2.0 * PI * f_mhz * 1e6
}

/// Converts an angular frequency in rad/s to MHz (cycles).
pub fn angular_to_mhz(omega: f64) -> f64 {
    omega / (2.0 * PI * 1e6)
}

/// Joules to electron-volts.
pub fn joule_to_ev(e: f64) -> f64 {
    e / ELEMENTARY_CHARGE
}
