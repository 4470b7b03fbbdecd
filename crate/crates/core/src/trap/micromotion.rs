//! Excess micromotion caused by a static stray field, and the smallest
//! displacement the Doppler-modulation measurement can see.

use serde::{Deserialize, Serialize};

use super::geometry::RfDrive;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Micromotion {
    /// Shift of the ion from the RF node, m.
    pub displacement: f64,
    /// Amplitude of the driven motion at the RF frequency, m.
    pub amplitude: f64,
    /// Phase-modulation index seen by a laser of wave number `k`.
    pub modulation_index: f64,
}

/// Stray field `stray` (V/m) pushing an ion with secular frequency
/// `secular` (rad/s) off the node.
pub fn micromotion_analysis(stray: [f64; 3], secular: f64, drive: &RfDrive, mass: f64, charge: f64, wavenumber: f64) -> Micromotion {
    let e = stray.iter().map(|v| v * v).sum::<f64>().sqrt();
    let displacement = charge * e / (mass * secular * secular);
    let q_mathieu = 2.0 * std::f64::consts::SQRT_2 * secular / drive.angular_frequency;
    let amplitude = 0.5 * q_mathieu * displacement;
    Micromotion { displacement, amplitude, modulation_index: wavenumber * amplitude }
}

/// Prefactor tying the shot-noise-limited modulation index to a detectable
/// displacement. It absorbs lineshape factors of the Doppler-modulation
/// signal and is fixed by the measured 4 s, 0.016 Γ/√Hz operating point.
pub const DETECTION_CALIBRATION: f64 = 0.75;

/// Smallest detectable displacement (m) for a measurement with
/// `sensitivity` (Γ/√Hz) integrated for `acquisition` seconds, at a secular
/// frequency `omega` and wavelength `wavelength`.
pub fn detection_limit(sensitivity: f64, acquisition: f64, gamma: f64, omega: f64, wavelength: f64) -> f64 {
    let m_min = sensitivity / acquisition.sqrt();
    DETECTION_CALIBRATION * m_min * (gamma / omega) * wavelength
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atom::AtomConfig;
    use crate::constants::mhz_to_angular;

    fn drive() -> RfDrive {
        RfDrive::new(200.0, mhz_to_angular(14.9)).unwrap()
    }

    #[test]
    fn one_volt_per_centimeter() {
        let c = AtomConfig::ca40_default();
        let m = micromotion_analysis([100.0, 0.0, 0.0], mhz_to_angular(3.8), &drive(), c.mass, c.charge, 1.0);
        // qE/(mω²) for ⁴⁰Ca⁺.
        assert!((m.displacement / 4.235e-7 - 1.0).abs() < 1e-3, "{}", m.displacement);
        let q = 2.0 * std::f64::consts::SQRT_2 * 3.8 / 14.9;
        assert!((m.amplitude - 0.5 * q * m.displacement).abs() < 1e-18);
    }

    #[test]
    fn zero_and_linear() {
        let c = AtomConfig::ca40_default();
        let k = 2.0 * std::f64::consts::PI / 397e-9;
        let w = mhz_to_angular(1.9);
        let zero = micromotion_analysis([0.0; 3], w, &drive(), c.mass, c.charge, k);
        assert_eq!(zero, Micromotion { displacement: 0.0, amplitude: 0.0, modulation_index: 0.0 });
        let one = micromotion_analysis([30.0, -40.0, 0.0], w, &drive(), c.mass, c.charge, k);
        let two = micromotion_analysis([60.0, -80.0, 0.0], w, &drive(), c.mass, c.charge, k);
        assert!((two.displacement - 2.0 * one.displacement).abs() < 1e-15 * two.displacement);
        assert!((two.amplitude - 2.0 * one.amplitude).abs() < 1e-15 * two.amplitude);
        assert!((two.modulation_index - 2.0 * one.modulation_index).abs() < 1e-12 * two.modulation_index);
    }

    #[test]
    fn operating_point_limit() {
        let (g, w) = (mhz_to_angular(22.3), mhz_to_angular(3.8));
        let dz = detection_limit(0.016, 4.0, g, w, 1.0);
        assert!((dz - 0.0352).abs() < 1e-4, "{dz}");
        let longer = detection_limit(0.016, 16.0, g, w, 1.0);
        assert!((longer - 0.5 * dz).abs() < 1e-15);
        assert!(detection_limit(0.016, 4.0, g, 1e30, 1.0) < 1e-20);
    }
}
