//! Fluorescence spectra from detuning scans of the 397 nm beam, Lorentzian
//! line fits and signal-to-background ratios.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atom::{hamiltonian, LaserDrive, Level, LevelScheme};
use crate::constants::angular_to_mhz;
use crate::dynamics::{scattering_rate, steady_state};
use crate::fit::{levenberg_marquardt, FitOptions, Lorentzian};
use crate::photostream::DetectorModel;
use crate::{Error, Result};

/// Predicted detector count rates along a scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    /// rad/s.
    pub detunings: Vec<f64>,
    /// counts/s, both channels including background.
    pub combined: Vec<f64>,
    /// counts/s per channel including background.
    pub channels: [Vec<f64>; 2],
    /// counts/s per channel.
    pub background: [f64; 2],
    /// 397 nm emission rate of the ion, photons/s.
    pub emission: Vec<f64>,
}

impl ScanResult {
    pub fn total_background(&self) -> f64 {
        self.background[0] + self.background[1]
    }

    /// Index of the largest combined rate.
    pub fn peak_index(&self) -> usize {
        (0..self.combined.len()).max_by(|&a, &b| self.combined[a].total_cmp(&self.combined[b])).unwrap_or(0)
    }

    /// Writes `detuning_MHz,counts_combined,counts_ch1,counts_ch2,background`.
    pub fn write_csv<W: Write>(&self, mut w: W, header: &[String]) -> Result<()> {
        for line in header {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "detuning_MHz,counts_combined,counts_ch1,counts_ch2,background")?;
        for i in 0..self.detunings.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                (angular_to_mhz(self.detunings[i]) * 1e9).round() / 1e9,
                self.combined[i],
                self.channels[0][i],
                self.channels[1][i],
                self.total_background()
            )?;
        }
        Ok(())
    }
}

/// Replaces the detuning of the S1/2–P1/2 drive in `template`.
fn with_cooling_detuning(template: &[LaserDrive], detuning: f64) -> Result<Vec<LaserDrive>> {
    let mut drives = template.to_vec();
    let d = drives
        .iter_mut()
        .find(|d| d.lower() == Level::S12 && d.upper() == Level::P12)
        .ok_or_else(|| Error::Config("scan template has no S1/2 <-> P1/2 drive".into()))?;
    d.detuning = detuning;
    Ok(drives)
}

/// Steady-state count rates with the 397 nm beam at each detuning.
pub fn line_scan(scheme: &LevelScheme, template: &[LaserDrive], detunings: &[f64], detector: &DetectorModel) -> Result<ScanResult> {
    if detunings.iter().any(|d| !d.is_finite()) {
        return Err(Error::Config("detunings must be finite".into()));
    }
    let p = detector.routing_probabilities()?;
    let channel = *scheme.fluorescence_channel().ok_or_else(|| Error::Config("no P1/2 -> S1/2 channel".into()))?;
    let emission = detunings
        .par_iter()
        .map(|&d| {
            let drives = with_cooling_detuning(template, d)?;
            let h = hamiltonian(scheme, &drives)?;
            Ok(scattering_rate(&steady_state(&h, &scheme.decays)?, &channel))
        })
        .collect::<Result<Vec<f64>>>()?;
    let channels = [0, 1].map(|i| emission.iter().map(|e| e * p[i] + detector.background[i]).collect::<Vec<_>>());
    let combined = channels[0].iter().zip(&channels[1]).map(|(a, b)| a + b).collect();
    Ok(ScanResult { detunings: detunings.to_vec(), combined, channels, background: detector.background, emission })
}

/// Lorentzian line parameters with standard errors. Frequencies in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub center: f64,
    pub hwhm: f64,
    pub peak: f64,
    pub floor: f64,
    /// Standard errors of `[center, hwhm, peak, floor]`.
    pub errors: [f64; 4],
    pub reduced_chi2: f64,
}

/// Least-squares Lorentzian on a floor. Initial values come from the data:
/// the floor from the minimum, the peak from the maximum and the width from
/// the points above half maximum.
pub fn lorentzian_fit(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() < 5 || x.len() != y.len() {
        return Err(Error::Config(format!("Lorentzian fit needs at least 5 paired points, got {}", x.len())));
    }
    if y.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Config("Lorentzian fit needs non-negative data".into()));
    }
    let imax = (0..y.len()).max_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
    let floor = y.iter().copied().fold(f64::INFINITY, f64::min);
    let peak = y[imax] - floor;
    let half: Vec<f64> = x.iter().zip(y).filter(|(_, v)| **v - floor >= 0.5 * peak).map(|(u, _)| *u).collect();
    let span = x.iter().copied().fold(f64::NEG_INFINITY, f64::max) - x.iter().copied().fold(f64::INFINITY, f64::min);
    let lo = half.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = half.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // With only one side of the line the half-maximum set ends at the peak.
    let width = (hi - lo).max(span / 20.0);
    let one_sided = imax == 0 || imax == x.len() - 1;
    let hwhm0 = if one_sided { width } else { 0.5 * width };
    let fit = levenberg_marquardt(&Lorentzian, x, y, None, &[x[imax], hwhm0, peak, floor], FitOptions::default())?;
    let p = &fit.params;
    Ok(LineFit {
        center: p[0],
        hwhm: p[1].abs(),
        peak: p[2],
        floor: p[3],
        errors: [fit.errors[0], fit.errors[1], fit.errors[2], fit.errors[3]],
        reduced_chi2: fit.reduced_chi2,
    })
}

/// Signal-to-background ratio. Passing the total peak rate as `signal`
/// gives the "peak over background" convention used for the spectrum.
pub fn sbr(signal: f64, background: f64) -> f64 {
    assert!(background > 0.0, "background must be positive");
    signal / background
}
