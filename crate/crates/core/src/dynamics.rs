//! Lindblad master equation for the five-level ion: time evolution, steady
//! state, scattering rates and the quantum-regression intensity correlation.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::atom::{DecayChannel, LaserDrive, Level, Operator, N_LEVELS};
use crate::{Error, Result};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Hermitian, unit-trace, positive semidefinite state of the ion.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(Operator);

impl DensityMatrix {
    const TOL: f64 = 1e-10;

    /// Validates `m` against the density-matrix invariants.
    pub fn new(m: Operator) -> Result<Self> {
        let herm = (m - m.adjoint()).camax();
        if herm > Self::TOL {
            return Err(Error::Config(format!("density matrix not Hermitian (deviation {herm:e})")));
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() > Self::TOL || tr.im.abs() > Self::TOL {
            return Err(Error::Config(format!("density matrix trace is {tr}")));
        }
        let rho = DensityMatrix(m);
        let min = rho.min_eigenvalue();
        if min < -Self::TOL {
            return Err(Error::Config(format!("density matrix has eigenvalue {min:e}")));
        }
        Ok(rho)
    }

    /// Pure state `|level⟩⟨level|`.
    pub fn pure(level: Level) -> Self {
        let mut m = Operator::zeros();
        m[(level.index(), level.index())] = Complex64::new(1.0, 0.0);
        DensityMatrix(m)
    }

    /// Hermitizes and renormalizes the trace without further checks.
    pub(crate) fn from_raw(m: Operator) -> Self {
        let mut h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
        let tr = h.trace().re;
        h /= Complex64::new(tr, 0.0);
        DensityMatrix(h)
    }

    pub fn matrix(&self) -> &Operator {
        &self.0
    }

    pub fn population(&self, level: Level) -> f64 {
        self.0[(level.index(), level.index())].re
    }

    pub fn populations(&self) -> [f64; N_LEVELS] {
        std::array::from_fn(|i| self.0[(i, i)].re)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0.symmetric_eigen().eigenvalues.min()
    }
}

/// Damping rate of every level: sum of the rates of channels leaving it.
pub(crate) fn level_decay_rates(channels: &[DecayChannel]) -> [f64; N_LEVELS] {
    let mut gamma = [0.0; N_LEVELS];
    for c in channels {
        gamma[c.upper.index()] += c.rate;
    }
    gamma
}

/// Right-hand side of the master equation,
/// `-i[H, ρ] + Σ_k Γ_k (L_k ρ L_k† - ½{L_k†L_k, ρ})` with `L_k = |lower⟩⟨upper|`.
pub fn lindblad_rhs(rho: &Operator, h: &Operator, channels: &[DecayChannel]) -> Operator {
    let gamma = level_decay_rates(channels);
    lindblad_rhs_with(rho, h, channels, &gamma)
}

fn lindblad_rhs_with(
    rho: &Operator,
    h: &Operator,
    channels: &[DecayChannel],
    gamma: &[f64; N_LEVELS],
) -> Operator {
    let mut out = (h * rho - rho * h) * (-I);
    for i in 0..N_LEVELS {
        for j in 0..N_LEVELS {
            out[(i, j)] -= rho[(i, j)] * (0.5 * (gamma[i] + gamma[j]));
        }
    }
    for c in channels {
        let (u, l) = (c.upper.index(), c.lower.index());
        out[(l, l)] += rho[(u, u)] * c.rate;
    }
    out
}

// Dormand–Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Adaptive Dormand–Prince integrator with per-step re-Hermitization.
struct Integrator<'a> {
    h: &'a Operator,
    channels: &'a [DecayChannel],
    gamma: [f64; N_LEVELS],
    tol: f64,
    t: f64,
    rho: Operator,
    step: f64,
    rate_scale: f64,
}

impl<'a> Integrator<'a> {
    fn new(rho0: &Operator, h: &'a Operator, channels: &'a [DecayChannel], tol: f64) -> Self {
        let gamma = level_decay_rates(channels);
        let h_norm = (0..N_LEVELS)
            .map(|i| (0..N_LEVELS).map(|j| h[(i, j)].norm()).sum::<f64>())
            .fold(0.0, f64::max);
        let rate_scale = (h_norm + gamma.iter().copied().fold(0.0, f64::max)).max(1.0);
        Self { h, channels, gamma, tol, t: 0.0, rho: *rho0, step: 0.05 / rate_scale, rate_scale }
    }

    fn rhs(&self, rho: &Operator) -> Operator {
        lindblad_rhs_with(rho, self.h, self.channels, &self.gamma)
    }

    /// Advances to exactly `t_end`.
    fn advance_to(&mut self, t_end: f64) -> Result<()> {
        let mut k1 = self.rhs(&self.rho);
        while self.t < t_end {
            let remaining = t_end - self.t;
            let last = self.step >= remaining;
            let dt = if last { remaining } else { self.step };
            let c = |x: f64| Complex64::new(x * dt, 0.0);

            let y = &self.rho;
            let k2 = self.rhs(&(y + k1 * c(A21)));
            let k3 = self.rhs(&(y + k1 * c(A31) + k2 * c(A32)));
            let k4 = self.rhs(&(y + k1 * c(A41) + k2 * c(A42) + k3 * c(A43)));
            let k5 = self.rhs(&(y + k1 * c(A51) + k2 * c(A52) + k3 * c(A53) + k4 * c(A54)));
            let k6 = self.rhs(&(y + k1 * c(A61) + k2 * c(A62) + k3 * c(A63) + k4 * c(A64) + k5 * c(A65)));
            let next = y + k1 * c(B1) + k3 * c(B3) + k4 * c(B4) + k5 * c(B5) + k6 * c(B6);
            let k7 = self.rhs(&next);
            let err = (k1 * c(E1) + k3 * c(E3) + k4 * c(E4) + k5 * c(E5) + k6 * c(E6) + k7 * c(E7)).camax();

            if err <= self.tol {
                self.t = if last { t_end } else { self.t + dt };
                self.rho = DensityMatrix::from_raw(next).0;
                k1 = self.rhs(&self.rho);
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * (self.tol / err).powf(0.2)).clamp(0.2, 5.0) };
            // Only shrink the working step on a rejected or truncated final step.
            if !(last && err <= self.tol) || factor < 1.0 {
                self.step = dt * factor;
            }
            if self.step < 1e-12 / self.rate_scale || !self.step.is_finite() {
                return Err(Error::Integration {
                    last_good_time: self.t,
                    reason: format!("step size underflow ({:e} s)", self.step),
                });
            }
        }
        Ok(())
    }
}

fn check_tol(tol: f64) -> Result<()> {
    if tol > 0.0 && tol <= 1e-3 {
        Ok(())
    } else {
        Err(Error::Config(format!("integration tolerance must lie in (0, 1e-3], got {tol}")))
    }
}

/// Evolves `rho0` for time `t` (s) with local error per step at most `tol`.
pub fn evolve(
    rho0: &DensityMatrix,
    h: &Operator,
    channels: &[DecayChannel],
    t: f64,
    tol: f64,
) -> Result<DensityMatrix> {
    Ok(evolve_to_times(rho0, h, channels, &[t], tol)?.pop().expect("one time requested"))
}

/// Evolves `rho0` and returns the state at each of the ascending `times`.
pub fn evolve_to_times(
    rho0: &DensityMatrix,
    h: &Operator,
    channels: &[DecayChannel],
    times: &[f64],
    tol: f64,
) -> Result<Vec<DensityMatrix>> {
    check_tol(tol)?;
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("evolution times must be finite, non-negative and ascending".into()));
    }
    let mut integ = Integrator::new(rho0.matrix(), h, channels, tol);
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        if t == 0.0 {
            out.push(rho0.clone());
            continue;
        }
        integ.advance_to(t)?;
        out.push(DensityMatrix(integ.rho));
    }
    Ok(out)
}

/// Vectorized Liouvillian acting on row-major `vec(ρ)`.
pub fn liouvillian(h: &Operator, channels: &[DecayChannel]) -> DMatrix<Complex64> {
    let n2 = N_LEVELS * N_LEVELS;
    let mut l = DMatrix::zeros(n2, n2);
    for k in 0..n2 {
        let mut basis = Operator::zeros();
        basis[(k / N_LEVELS, k % N_LEVELS)] = Complex64::new(1.0, 0.0);
        let col = lindblad_rhs(&basis, h, channels);
        for m in 0..n2 {
            l[(m, k)] = col[(m / N_LEVELS, m % N_LEVELS)];
        }
    }
    l
}

/// Levels in closed population classes other than the one holding S1/2.
fn disconnected_levels(h: &Operator, channels: &[DecayChannel]) -> Vec<Level> {
    // reach[i][j]: population can flow from i to j.
    let mut reach = [[false; N_LEVELS]; N_LEVELS];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
    }
    for i in 0..N_LEVELS {
        for j in 0..N_LEVELS {
            if i != j && h[(i, j)].norm() > 0.0 {
                reach[i][j] = true;
            }
        }
    }
    for c in channels {
        reach[c.upper.index()][c.lower.index()] = true;
    }
    for k in 0..N_LEVELS {
        for i in 0..N_LEVELS {
            for j in 0..N_LEVELS {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    // A level is recurrent when everything it reaches can reach it back.
    let recurrent = |i: usize| (0..N_LEVELS).all(|j| !reach[i][j] || reach[j][i]);
    let anchor = (0..N_LEVELS)
        .filter(|&i| recurrent(i))
        .find(|&i| reach[Level::S12.index()][i])
        .unwrap_or(Level::S12.index());
    Level::ALL
        .into_iter()
        .filter(|l| recurrent(l.index()) && !reach[anchor][l.index()])
        .collect()
}

/// Unique stationary state from a null-space solve of the vectorized
/// Liouvillian, with the trace condition replacing the first equation.
pub fn steady_state(h: &Operator, channels: &[DecayChannel]) -> Result<DensityMatrix> {
    let l = liouvillian(h, channels);
    let scale = l.camax().max(1.0);

    let singular = l.clone().singular_values();
    let sigma_max = singular.max();
    let null_dim = singular.iter().filter(|&&s| s <= 1e-9 * sigma_max).count();
    if null_dim > 1 {
        return Err(Error::DegenerateSteadyState {
            dimension: null_dim,
            levels: disconnected_levels(h, channels),
        });
    }

    let n2 = N_LEVELS * N_LEVELS;
    let mut a = l.clone();
    for k in 0..n2 {
        a[(0, k)] = Complex64::new(0.0, 0.0);
    }
    for i in 0..N_LEVELS {
        a[(0, i * N_LEVELS + i)] = Complex64::new(1.0, 0.0);
    }
    let mut b = DVector::zeros(n2);
    b[0] = Complex64::new(1.0, 0.0);
    let lu = a.clone().lu();
    let mut x = lu.solve(&b).ok_or(Error::DegenerateSteadyState { dimension: 2, levels: vec![] })?;
    // One round of iterative refinement.
    let r = &b - &a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }

    let rho = DensityMatrix::from_raw(Operator::from_fn(|i, j| x[i * N_LEVELS + j]));
    let residual = lindblad_rhs(rho.matrix(), h, channels).camax();
    debug_assert!(residual <= 1e-10 * scale, "steady-state residual {residual:e} (scale {scale:e})");
    Ok(rho)
}

/// Photon emission rate (1/s) into `channel` for state `rho`.
pub fn scattering_rate(rho: &DensityMatrix, channel: &DecayChannel) -> f64 {
    channel.rate * rho.population(channel.upper)
}

/// Normalized intensity correlation on a τ grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct G2Curve {
    /// Correlation times, s.
    pub tau: Vec<f64>,
    pub values: Vec<f64>,
    /// One-sigma errors, present for measured curves.
    pub errors: Option<Vec<f64>>,
    /// Raw coincidence counts, present for measured curves.
    pub counts: Option<Vec<u64>>,
    /// Expected counts per bin for uncorrelated light (the normalization).
    pub norm: Option<f64>,
    pub metadata: BTreeMap<String, String>,
}

impl G2Curve {
    /// Index of the bin/sample closest to τ = 0.
    pub fn zero_index(&self) -> Option<usize> {
        (0..self.tau.len()).min_by(|&a, &b| self.tau[a].abs().total_cmp(&self.tau[b].abs()))
    }

    /// Writes `tau_ns,value[,error]` rows preceded by `# ` comment lines.
    pub fn write_csv<W: Write>(&self, mut w: W, header: &[String]) -> std::io::Result<()> {
        for line in header {
            writeln!(w, "# {line}")?;
        }
        match &self.errors {
            Some(err) => {
                writeln!(w, "tau_ns,g2,g2_err")?;
                for ((t, v), e) in self.tau.iter().zip(&self.values).zip(err) {
                    writeln!(w, "{},{},{}", tau_ns(*t), v, e)?;
                }
            }
            None => {
                writeln!(w, "tau_ns,g2")?;
                for (t, v) in self.tau.iter().zip(&self.values) {
                    writeln!(w, "{},{}", tau_ns(*t), v)?;
                }
            }
        }
        Ok(())
    }
}

/// Seconds to nanoseconds, rounded to the femtosecond to drop binary noise.
pub fn tau_ns(t: f64) -> f64 {
    (t * 1e15).round() / 1e6
}

/// Tolerance used by the quantum-regression propagation.
pub const REGRESSION_TOL: f64 = 1e-11;

/// g²(τ) by the quantum regression theorem: the steady state is collapsed by
/// the detection channel's lowering operator and propagated; the upper-level
/// population relative to its steady-state value is g²(|τ|).
pub fn g2_regression(
    h: &Operator,
    channels: &[DecayChannel],
    detect: &DecayChannel,
    tau_grid: &[f64],
) -> Result<G2Curve> {
    let rho_ss = steady_state(h, channels)?;
    let p_ss = rho_ss.population(detect.upper);
    if !(p_ss > 1e-300) {
        return Err(Error::ZeroPopulation(detect.upper));
    }
    let (u, l) = (detect.upper.index(), detect.lower.index());
    let mut lower = Operator::zeros();
    lower[(l, u)] = Complex64::new(1.0, 0.0);
    let jumped = lower * rho_ss.matrix() * lower.adjoint();
    let collapsed = DensityMatrix::from_raw(jumped);

    let mut order: Vec<usize> = (0..tau_grid.len()).collect();
    order.sort_by(|&a, &b| tau_grid[a].abs().total_cmp(&tau_grid[b].abs()));
    let times: Vec<f64> = order.iter().map(|&i| tau_grid[i].abs()).collect();
    let states = evolve_to_times(&collapsed, h, channels, &times, REGRESSION_TOL)?;

    let mut values = vec![0.0; tau_grid.len()];
    for (&i, rho) in order.iter().zip(&states) {
        values[i] = rho.population(detect.upper) / p_ss;
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("method".into(), "quantum regression".into());
    metadata.insert("detect_channel".into(), format!("{} -> {}", detect.upper, detect.lower));
    metadata.insert("steady_state_upper_population".into(), format!("{p_ss:e}"));
    Ok(G2Curve { tau: tau_grid.to_vec(), values, errors: None, counts: None, norm: None, metadata })
}

/// g²(τ) averaged over histogram bins of width `bin_width` centered on
/// `centers`, by Simpson's rule on `2·half_steps` sub-intervals per bin. This
/// is what a binned measurement estimates; near τ = 0 it differs from the
/// point value because g² is curved on the bin scale.
pub fn g2_bin_averaged(
    h: &Operator,
    channels: &[DecayChannel],
    detect: &DecayChannel,
    centers: &[f64],
    bin_width: f64,
    half_steps: usize,
) -> Result<G2Curve> {
    if !(bin_width > 0.0) || half_steps == 0 {
        return Err(Error::Config("bin width and sub-steps must be positive".into()));
    }
    let m = 2 * half_steps;
    let mut grid = Vec::with_capacity(centers.len() * (m + 1));
    for &c in centers {
        for k in 0..=m {
            grid.push(c - 0.5 * bin_width + bin_width * k as f64 / m as f64);
        }
    }
    let point = g2_regression(h, channels, detect, &grid)?;
    let values = point
        .values
        .chunks(m + 1)
        .map(|v| {
            let inner: f64 = (1..m).map(|k| if k % 2 == 1 { 4.0 * v[k] } else { 2.0 * v[k] }).sum();
            (v[0] + inner + v[m]) / (3.0 * m as f64)
        })
        .collect();
    let mut metadata = point.metadata;
    metadata.insert("bin_width_s".into(), format!("{bin_width:e}"));
    Ok(G2Curve { tau: centers.to_vec(), values, errors: None, counts: None, norm: None, metadata })
}

/// Adds drive parameters to curve metadata.
pub fn annotate_drives(curve: &mut G2Curve, drives: &[LaserDrive]) {
    for d in drives {
        let key = format!("drive {} -> {}", d.lower(), d.upper());
        curve.metadata.insert(
            key,
            format!(
                "rabi_mhz={:.6} detuning_mhz={:.6}",
                crate::constants::angular_to_mhz(d.rabi),
                crate::constants::angular_to_mhz(d.detuning)
            ),
        );
    }
}
