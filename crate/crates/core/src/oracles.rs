//! Closed-form and brute-force reference results used by the test suites.
//!
//! Everything here is computed independently of the production code paths it
//! is compared against.

use std::f64::consts::PI;

/// Two-level excited population in steady state, `s = 2Ω²/Γ²`, `x = 2δ/Γ`.
pub fn bloch_excited_population(s: f64, x: f64) -> f64 {
    (s / 2.0) / (1.0 + s + x * x)
}

/// Resonantly driven two-level atom: g²(τ) = 1 − e^{−3Γτ/4}(cos Ω′τ + 3Γ/(4Ω′) sin Ω′τ),
/// Ω′ = sqrt(Ω² − Γ²/16). Valid for Ω > Γ/4.
pub fn two_level_g2(rabi: f64, gamma: f64, tau: f64) -> f64 {
    let tau = tau.abs();
    let wp = (rabi * rabi - gamma * gamma / 16.0).sqrt();
    1.0 - (-0.75 * gamma * tau).exp() * ((wp * tau).cos() + 0.75 * gamma / wp * (wp * tau).sin())
}

/// Two-level Lorentzian fluorescence line shape relative to its peak.
pub fn bloch_lineshape(s: f64, x: f64) -> f64 {
    (1.0 + s) / (1.0 + s + x * x)
}

/// Captured fraction of 4π through a disk of radius `r` at distance `d`, via
/// the cone half-angle cosine.
pub fn disk_solid_angle_fraction(r: f64, d: f64) -> f64 {
    let cos_theta = d / (r * r + d * d).sqrt();
    (1.0 - cos_theta) / 2.0
}

/// All-pairs start/stop correlation with the first-stop rule: for each start
/// the earliest stop whose separation lies in the window is binned.
/// Returns the histogram over `bins` bins; `bin_of` maps τ to a bin index
/// (or `None` outside the window).
pub fn brute_force_first_stop(
    starts: &[f64],
    stops: &[f64],
    bins: usize,
    bin_of: impl Fn(f64) -> Option<usize>,
) -> Vec<u64> {
    let mut hist = vec![0u64; bins];
    for &a in starts {
        let mut best: Option<(f64, usize)> = None;
        for &b in stops {
            let tau = b - a;
            if let Some(k) = bin_of(tau) {
                if best.is_none_or(|(t, _)| tau < t) {
                    best = Some((tau, k));
                }
            }
        }
        if let Some((_, k)) = best {
            hist[k] += 1;
        }
    }
    hist
}

/// Coaxial cylinders: potential at radius `r` between inner radius `a` (at
/// `va`) and outer radius `b` (at `vb`).
pub fn coaxial_potential(a: f64, b: f64, va: f64, vb: f64, r: f64) -> f64 {
    va + (vb - va) * (r / a).ln() / (b / a).ln()
}

/// Pseudopotential in eV for field `e_field` (V/m), particle mass `mass_kg`,
/// charge `charge_c`, drive angular frequency `omega`.
pub fn pseudopotential_ev(e_field: f64, mass_kg: f64, charge_c: f64, omega: f64) -> f64 {
    charge_c * e_field * e_field / (4.0 * mass_kg * omega * omega)
}

/// Poisson expectation of coincidences per bin for independent streams.
pub fn poisson_coincidences(r1: f64, r2: f64, duration: f64, bin: f64) -> f64 {
    r1 * r2 * duration * bin
}

/// Angular frequency from MHz.
pub fn w(mhz: f64) -> f64 {
    2.0 * PI * mhz * 1e6
}
