//! Stray fields inferred from compensation voltages, and the fit of their
//! decay after loading.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::fit::{levenberg_marquardt, ExpDecay, FitOptions};
use crate::{Error, Result};

/// Compensation voltages recorded at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompensationSample {
    /// s.
    pub time: f64,
    /// V.
    pub voltages: [f64; 3],
}

fn check_invertible(calibration: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let scale = calibration.abs().max();
    let inv = calibration.try_inverse().ok_or(Error::Singular)?;
    if scale == 0.0 || calibration.determinant().abs() <= 1e-12 * scale.powi(3) {
        return Err(Error::Singular);
    }
    Ok(inv)
}

/// The compensation field `M·v` cancels the stray field, so the stray field
/// is `−M·v`. `calibration` maps volts to V/cm at the trap center.
pub fn stray_field_from_voltages(sample: &CompensationSample, calibration: &Matrix3<f64>) -> Result<[f64; 3]> {
    check_invertible(calibration)?;
    let e = -(calibration * Vector3::from(sample.voltages));
    Ok([e.x, e.y, e.z])
}

/// Voltages that cancel the stray field `field` (V/cm).
pub fn voltages_from_field(field: [f64; 3], calibration: &Matrix3<f64>) -> Result<[f64; 3]> {
    let v = -(check_invertible(calibration)? * Vector3::from(field));
    Ok([v.x, v.y, v.z])
}

/// Result of fitting `|E|(t) = A·e^{−γ(t−t₀)} + C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldDecay {
    /// γ, 1/s.
    pub rate: f64,
    pub rate_error: f64,
    /// Fitted |E| at the first sample, V/cm.
    pub initial_magnitude: f64,
    /// A, V/cm.
    pub amplitude: f64,
    /// C, V/cm.
    pub floor: f64,
    /// Mean unit vector of the field.
    pub direction: [f64; 3],
    /// Azimuth of `direction` in the x-y plane, rad.
    pub azimuth: f64,
    /// Azimuth of the charge that produces the field, rad.
    pub source_azimuth: f64,
    /// Root-mean-square misfit of |E|, V/cm.
    pub rms_residual: f64,
}

/// Azimuth of a positive charge producing a field that points along
/// `field_azimuth`: the field points away from the charge.
pub fn source_azimuth(field_azimuth: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let a = field_azimuth + pi;
    if a > pi {
        a - 2.0 * pi
    } else {
        a
    }
}

/// Fits the decay of the field magnitude. A series with no significant trend
/// is reported as γ ≈ 0 with the error bar of the trend.
pub fn fit_field_decay(series: &[(f64, [f64; 3])]) -> Result<FieldDecay> {
    if series.len() < 5 {
        return Err(Error::Config(format!("field-decay fit needs at least 5 samples, got {}", series.len())));
    }
    if series.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::Config("sample times must be strictly increasing".into()));
    }
    let t0 = series[0].0;
    let t: Vec<f64> = series.iter().map(|(s, _)| s - t0).collect();
    let mag: Vec<f64> = series.iter().map(|(_, e)| e.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();

    let mut dir = Vector3::zeros();
    for (&m, (_, e)) in mag.iter().zip(series) {
        if m > 0.0 {
            dir += Vector3::from(*e) / m;
        }
    }
    let direction = if dir.norm() > 0.0 { dir.normalize() } else { dir };
    let azimuth = direction.y.atan2(direction.x);

    let n = t.len() as f64;
    let (tm, ym) = (t.iter().sum::<f64>() / n, mag.iter().sum::<f64>() / n);
    let sxx: f64 = t.iter().map(|v| (v - tm).powi(2)).sum();
    let slope = t.iter().zip(&mag).map(|(a, b)| (a - tm) * (b - ym)).sum::<f64>() / sxx;
    let lin_res: f64 = t.iter().zip(&mag).map(|(a, b)| (b - ym - slope * (a - tm)).powi(2)).sum();
    let slope_err = (lin_res / (n - 2.0) / sxx).sqrt();

    let base = FieldDecay {
        rate: 0.0,
        rate_error: 0.0,
        initial_magnitude: ym,
        amplitude: 0.0,
        floor: ym,
        direction: [direction.x, direction.y, direction.z],
        azimuth,
        source_azimuth: source_azimuth(azimuth),
        rms_residual: (lin_res / n).sqrt(),
    };
    if slope.abs() <= 3.0 * slope_err || ym == 0.0 {
        // No detectable trend: express the linear slope as a rate.
        let scale = ym.max(f64::MIN_POSITIVE);
        return Ok(FieldDecay { rate: -slope / scale, rate_error: slope_err / scale, ..base });
    }

    let floor0 = mag[mag.len() - mag.len() / 5..].iter().sum::<f64>() / (mag.len() / 5).max(1) as f64;
    let floor0 = floor0.min(mag.iter().copied().fold(f64::INFINITY, f64::min));
    let amp0 = mag[0] - floor0;
    let half = t.iter().zip(&mag).find(|(_, m)| **m - floor0 <= 0.5 * amp0).map_or(t[t.len() - 1], |(s, _)| *s);
    let rate0 = std::f64::consts::LN_2 / half.max(t[1]);
    let fit = levenberg_marquardt(&ExpDecay, &t, &mag, None, &[amp0, rate0, floor0], FitOptions::default())?;
    let [a, g, c] = [fit.params[0], fit.params[1], fit.params[2]];
    Ok(FieldDecay {
        rate: g,
        rate_error: fit.errors[1],
        initial_magnitude: a + c,
        amplitude: a,
        floor: c,
        rms_residual: (fit.chi2 / n).sqrt(),
        ..base
    })
}
