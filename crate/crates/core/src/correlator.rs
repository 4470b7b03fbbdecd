//! Start/stop time-to-digital converter emulation for the two fiber channels.
//!
//! Each channel starts a measurement that is stopped by the first click of
//! the other channel inside the window; a fixed delay on the stop inputs
//! makes negative separations visible. Both traces record the stop minus the
//! start time, so after removing the delay they share the τ axis and are
//! summed bin by bin. Exchanging the two channels only swaps the traces.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::G2Curve;
use crate::photostream::PhotonStream;
use crate::{Error, Result};

/// Delay, binning and window of the correlator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdcConfig {
    /// Delay on each stop input, s.
    pub delay: f64,
    pub bin_width: f64,
    /// Half-width of the recorded τ range, s.
    pub half_window: f64,
}

impl Default for TdcConfig {
    fn default() -> Self {
        TdcConfig { delay: 200e-9, bin_width: 1e-9, half_window: 150e-9 }
    }
}

impl TdcConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.bin_width > 0.0 && self.half_window >= self.bin_width && self.delay > self.half_window;
        if !ok || !self.delay.is_finite() {
            return Err(Error::Config(format!(
                "correlator needs delay > half window >= bin width > 0, got {:e} / {:e} / {:e}",
                self.delay, self.half_window, self.bin_width
            )));
        }
        Ok(())
    }

    /// Number of bins on each side of the τ = 0 bin.
    pub fn side_bins(&self) -> usize {
        (self.half_window / self.bin_width).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        2 * self.side_bins() + 1
    }

    /// Signed bin number `k` of separation τ; bin `k` is centered on `k·Δτ`.
    fn signed_bin(&self, tau: f64) -> f64 {
        (tau / self.bin_width + 0.5).floor()
    }

    /// Histogram index of τ, or `None` outside the window.
    pub fn bin_of(&self, tau: f64) -> Option<usize> {
        let k = self.signed_bin(tau);
        let side = self.side_bins() as f64;
        (k.abs() <= side).then(|| (k + side) as usize)
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        let side = self.side_bins() as i64;
        (-side..=side).map(|k| k as f64 * self.bin_width).collect()
    }
}

/// Summed two-direction coincidence histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub config: TdcConfig,
    /// s, symmetric about 0.
    pub bin_centers: Vec<f64>,
    pub counts: Vec<u64>,
    /// Starts issued by channel 1 and channel 2.
    pub starts: [u64; 2],
    /// s.
    pub duration: f64,
    /// Mean click rate of each channel, counts/s.
    pub rates: [f64; 2],
}

impl CorrelationHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// First stop of `stops` whose separation from each start falls in the
/// window, accumulated into `hist`. Both inputs must be sorted.
fn first_stop_trace(starts: &[f64], stops: &[f64], cfg: &TdcConfig, hist: &mut [u64]) {
    let side = cfg.side_bins() as f64;
    let mut j = 0;
    for &a in starts {
        // Separations grow with the stop time, so the first stop not below
        // the window only moves forward as the start time grows.
        while j < stops.len() && cfg.signed_bin(stops[j] - a) < -side {
            j += 1;
        }
        if j == stops.len() {
            break;
        }
        if let Some(k) = cfg.bin_of(stops[j] - a) {
            hist[k] += 1;
        }
    }
}

/// Builds the coincidence histogram of two streams.
pub fn tdc_crosscorrelate(a: &PhotonStream, b: &PhotonStream, cfg: &TdcConfig) -> Result<CorrelationHistogram> {
    cfg.validate()?;
    let mut counts = vec![0u64; cfg.n_bins()];
    let mut reverse = vec![0u64; cfg.n_bins()];
    rayon::join(
        || first_stop_trace(&a.times, &b.times, cfg, &mut counts),
        || first_stop_trace(&b.times, &a.times, cfg, &mut reverse),
    );
    for (c, r) in counts.iter_mut().zip(reverse) {
        *c += r;
    }
    let duration = a.duration.max(b.duration);
    Ok(CorrelationHistogram {
        config: *cfg,
        bin_centers: cfg.bin_centers(),
        counts,
        starts: [a.len() as u64, b.len() as u64],
        duration,
        rates: [a.len() as f64 / duration, b.len() as f64 / duration],
    })
}

/// Variance of a bin count in units of its mean. A pair closer than half a
/// bin is recorded by both traces, so the zero bin counts every pair twice
/// and its variance doubles; elsewhere the two traces hold disjoint pairs.
pub fn count_variance_factor(tau: f64, bin_width: f64) -> f64 {
    if tau.abs() < 0.5 * bin_width { 2.0 } else { 1.0 }
}

/// Normalizes by the coincidences expected for uncorrelated light in both
/// directions, `2·r₁·r₂·T·Δτ`. Errors are Poissonian, with an empty bin
/// counted as one.
pub fn normalize(h: &CorrelationHistogram) -> Result<G2Curve> {
    if !(h.rates[0] > 0.0 && h.rates[1] > 0.0 && h.duration > 0.0) {
        return Err(Error::ZeroRate);
    }
    let width = h.config.bin_width;
    let norm = 2.0 * h.rates[0] * h.rates[1] * h.duration * width;
    let values = h.counts.iter().map(|&c| c as f64 / norm).collect();
    let errors = h
        .counts
        .iter()
        .zip(&h.bin_centers)
        .map(|(&c, &tau)| (count_variance_factor(tau, width) * c.max(1) as f64).sqrt() / norm)
        .collect();
    let mut metadata = BTreeMap::new();
    metadata.insert("method".into(), "start/stop correlation".into());
    metadata.insert("duration_s".into(), h.duration.to_string());
    metadata.insert("rate1_cps".into(), h.rates[0].to_string());
    metadata.insert("rate2_cps".into(), h.rates[1].to_string());
    Ok(G2Curve {
        tau: h.bin_centers.clone(),
        values,
        errors: Some(errors),
        counts: Some(h.counts.clone()),
        norm: Some(norm),
        metadata,
    })
}

/// Fraction of coincidences involving at least one background click when
/// the channels have the given signal-to-background ratios.
pub fn background_offset(sbr1: f64, sbr2: f64) -> f64 {
    assert!(sbr1 > 0.0 && sbr2 > 0.0, "SBRs must be positive");
    1.0 - (sbr1 / (sbr1 + 1.0)) * (sbr2 / (sbr2 + 1.0))
}

/// Offset-corrected g²(0) and its Poisson standard error.
pub fn estimate_g2_zero(curve: &G2Curve, offset: f64) -> Result<(f64, f64)> {
    let (Some(counts), Some(norm)) = (&curve.counts, curve.norm) else {
        return Err(Error::Config("g2 curve carries no raw counts".into()));
    };
    let i = curve.zero_index().ok_or_else(|| Error::Config("g2 curve is empty".into()))?;
    if curve.tau[i].abs() > 1e-15 {
        return Err(Error::Config("g2 curve has no tau = 0 bin".into()));
    }
    let n0 = counts[i] as f64;
    let sigma = match &curve.errors {
        Some(e) => e[i],
        None => n0.max(1.0).sqrt() / norm,
    };
    Ok((n0 / norm - offset, sigma))
}

/// Key figures of a correlation measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    /// g²(0) before offset subtraction.
    pub g2_zero_raw: f64,
    /// g²(0) after offset subtraction.
    pub g2_zero: f64,
    pub uncertainty: f64,
    pub offset: f64,
    pub sbr1: f64,
    pub sbr2: f64,
}

impl CorrelationSummary {
    pub fn new(curve: &G2Curve, sbr: [f64; 2]) -> Result<Self> {
        let offset = background_offset(sbr[0], sbr[1]);
        let (g2_zero, uncertainty) = estimate_g2_zero(curve, offset)?;
        Ok(CorrelationSummary { g2_zero_raw: g2_zero + offset, g2_zero, uncertainty, offset, sbr1: sbr[0], sbr2: sbr[1] })
    }
}

/// Writes `tau_ns,counts,g2,g2_err` preceded by `# ` comment lines.
pub fn write_histogram_csv<W: Write>(mut w: W, curve: &G2Curve, header: &[String]) -> Result<()> {
    let (Some(counts), Some(errors)) = (&curve.counts, &curve.errors) else {
        return Err(Error::Config("g2 curve carries no raw counts".into()));
    };
    for line in header {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "tau_ns,counts,g2,g2_err")?;
    for i in 0..curve.tau.len() {
        writeln!(w, "{},{},{},{}", crate::dynamics::tau_ns(curve.tau[i]), counts[i], curve.values[i], errors[i])?;
    }
    Ok(())
}
