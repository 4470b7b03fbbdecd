//! Quantum-jump trajectories of the ion and the detector model that turns
//! emitted photons into two time-tagged streams, one per fiber.
//!
//! Every jump leaves the ion in a basis state (the lower level of the decay
//! channel), so the no-jump evolution only ever starts from a handful of
//! states. [`JumpSampler`] tabulates that evolution once per start level; a
//! jump then costs a table lookup and a cubic root solve instead of an ODE
//! integration. Draws that fall beyond a table are resolved exactly by binary
//! lifting with precomputed powers of the propagator.
//!
//! Random streams: a run with seed `s` uses `ChaCha8Rng::seed_from_u64(s)`
//! with stream `4·segment + purpose`, where purpose 0 drives the trajectory,
//! 1 routes photons to the fibers and 2, 3 generate the background of
//! channel 1 and 2. Segments are independent, so they may run in parallel and
//! are concatenated in order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector5};
use num_complex::Complex64;
use rand::distr::Open01;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atom::{hamiltonian, DecayChannel, LaserDrive, Level, LevelScheme, Operator, N_LEVELS};
use crate::collection::{self, FiberGeometry};
use crate::dynamics::level_decay_rates;
use crate::{Error, Result};

type StateVector = Vector5<Complex64>;

/// Net quantum efficiency of the detection chain, calibrated so that the
/// spectrum preset peaks at 36 kcps combined (including background).
pub const CALIBRATED_QUANTUM_EFFICIENCY: f64 = 0.022_892;
/// Fiber-chain transmission.
pub const FIBER_TRANSMISSION: f64 = 0.8;
/// Combined background of both channels, counts/s.
pub const TOTAL_BACKGROUND: f64 = 740.0;
/// Per-channel signal-to-background ratios at the correlation settings.
pub const TARGET_SBR: [f64; 2] = [75.0, 26.0];

/// Splits a total background rate between two channels with equal signal so
/// that their SBRs stand in the ratio `sbr[0] : sbr[1]`.
pub fn split_background(total: f64, sbr: [f64; 2]) -> [f64; 2] {
    let inv = [1.0 / sbr[0], 1.0 / sbr[1]];
    let norm = total / (inv[0] + inv[1]);
    [inv[0] * norm, inv[1] * norm]
}

/// Efficiency chain from emitted 397 nm photons to detector clicks, plus
/// background counts, for the two fiber channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    /// Fraction of 4π captured by each fiber.
    pub collection: [f64; 2],
    pub transmission: f64,
    pub quantum_efficiency: f64,
    /// Background counts/s per channel.
    pub background: [f64; 2],
}

impl DetectorModel {
    /// The two fibers at 275 µm with the calibrated efficiency chain. The
    /// 740 cps background is split so that, for equal signal in both
    /// channels, the channel SBRs stand in the ratio 75:26.
    pub fn fiber_pair() -> Self {
        let f = collection::solid_angle_fraction(collection::effective_na(&FiberGeometry::fiber_trap()));
        DetectorModel {
            collection: [f, f],
            transmission: FIBER_TRANSMISSION,
            quantum_efficiency: CALIBRATED_QUANTUM_EFFICIENCY,
            background: split_background(TOTAL_BACKGROUND, TARGET_SBR),
        }
    }

    /// Sets the background of each channel so that the given 397 nm emission
    /// rate yields the target SBRs.
    pub fn with_target_sbr(mut self, emission_rate: f64, sbr: [f64; 2]) -> Result<Self> {
        let signal = self.signal_rates(emission_rate)?;
        for i in 0..2 {
            if !(sbr[i] > 0.0) {
                return Err(Error::Config(format!("target SBR must be positive, got {}", sbr[i])));
            }
            self.background[i] = signal[i] / sbr[i];
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = [self.collection[0], self.collection[1], self.transmission, self.quantum_efficiency];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!("detector efficiencies must lie in [0, 1]: {fractions:?}")));
        }
        if self.background.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(Error::Config(format!("background rates must be finite and >= 0: {:?}", self.background)));
        }
        Ok(())
    }

    /// Probability that an emitted photon is detected in channel 1 and 2.
    pub fn routing_probabilities(&self) -> Result<[f64; 2]> {
        self.validate()?;
        let chain = self.transmission * self.quantum_efficiency;
        let p = [self.collection[0] * chain, self.collection[1] * chain];
        if p[0] + p[1] > 1.0 {
            return Err(Error::Config(format!("routing probabilities sum to {} > 1", p[0] + p[1])));
        }
        Ok(p)
    }

    /// Detected signal rate per channel for a given emission rate.
    pub fn signal_rates(&self, emission_rate: f64) -> Result<[f64; 2]> {
        let p = self.routing_probabilities()?;
        Ok([p[0] * emission_rate, p[1] * emission_rate])
    }
}

/// Origin of a detector click.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Signal,
    Background,
}

/// Time-ordered clicks of one detector channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonStream {
    pub channel: u8,
    /// Acquisition length, s. All timestamps lie in `[0, duration]`.
    pub duration: f64,
    /// Click times, s.
    pub times: Vec<f64>,
    /// Per-click origin; unknown for streams read back from files.
    pub origins: Option<Vec<Origin>>,
}

impl PhotonStream {
    /// Checks ordering and range. Timestamps must be non-decreasing: streams
    /// read back from nanosecond time-tag files can contain exact ties.
    pub fn new(channel: u8, duration: f64, times: Vec<f64>, origins: Option<Vec<Origin>>) -> Result<Self> {
        if !(duration > 0.0) {
            return Err(Error::Config(format!("stream duration must be positive, got {duration}")));
        }
        if let Some(o) = &origins {
            if o.len() != times.len() {
                return Err(Error::Config("origin flags do not match timestamps".into()));
            }
        }
        if times.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::Config("timestamps are not sorted".into()));
        }
        if times.first().is_some_and(|&t| t < 0.0) || times.last().is_some_and(|&t| t > duration) {
            return Err(Error::Config("timestamps outside [0, duration]".into()));
        }
        Ok(PhotonStream { channel, duration, times, origins })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn mean_rate(&self) -> f64 {
        self.times.len() as f64 / self.duration
    }

    pub fn count(&self, origin: Origin) -> Option<usize> {
        self.origins.as_ref().map(|o| o.iter().filter(|&&x| x == origin).count())
    }
}

/// Emission timestamps of one trajectory, per decay channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Emissions {
    pub duration: f64,
    pub channels: Vec<DecayChannel>,
    /// `times[k]` holds the emissions on `channels[k]`, increasing.
    pub times: Vec<Vec<f64>>,
}

impl Emissions {
    pub fn on(&self, upper: Level, lower: Level) -> &[f64] {
        self.channels
            .iter()
            .position(|c| c.upper == upper && c.lower == lower)
            .map(|k| self.times[k].as_slice())
            .unwrap_or(&[])
    }

    pub fn total(&self) -> usize {
        self.times.iter().map(Vec::len).sum()
    }
}

pub(crate) fn stream_rng(seed: u64, segment: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(segment * 4 + purpose);
    rng
}

/// Tabulated no-jump evolution from one basis state.
#[derive(Debug, Clone)]
struct NoJumpTable {
    /// Squared norm at `i·step`, decreasing.
    survival: Vec<f64>,
    /// Per entry, `stride` values: the decay hazard `Σ γ_j |ψ_j|²` followed
    /// by `|ψ_j|²` of each decaying level.
    data: Vec<f64>,
    /// `guide[j]` counts entries with survival ≥ j/GUIDE_BUCKETS; it brackets
    /// the search for a uniform draw.
    guide: Vec<u32>,
    /// State at the last table entry, for continuation.
    last: StateVector,
}

const GUIDE_BUCKETS: usize = 4096;

const TABLE_MAX_LEN: usize = 1 << 17;
const TABLE_MIN_SURVIVAL: f64 = 1e-13;
const LIFTING_LEVELS: usize = 64;

/// Samples the waiting time and channel of the next quantum jump.
#[derive(Debug, Clone)]
pub struct JumpSampler {
    channels: Vec<DecayChannel>,
    gamma: [f64; N_LEVELS],
    /// Levels with nonzero decay rate, in table order.
    decaying: Vec<usize>,
    /// Position of each channel's upper level in `decaying`.
    slot: Vec<usize>,
    /// `-i·H_eff`.
    generator: Operator,
    step: f64,
    /// `powers[k]` propagates the unnormalized state by `2^k · step`.
    powers: Vec<Operator>,
    tables: Vec<Option<NoJumpTable>>,
}

fn norm2(psi: &StateVector) -> f64 {
    psi.iter().map(|c| c.norm_sqr()).sum()
}

fn pops(psi: &StateVector) -> [f64; N_LEVELS] {
    std::array::from_fn(|i| psi[i].norm_sqr())
}

/// Hazard followed by the populations of the decaying levels.
type Row = [f64; N_LEVELS + 1];

impl JumpSampler {
    pub fn new(h: &Operator, channels: &[DecayChannel]) -> Self {
        let channels: Vec<DecayChannel> = channels.iter().copied().filter(|c| c.rate > 0.0).collect();
        let gamma = level_decay_rates(&channels);
        let mut h_eff = *h;
        for (i, g) in gamma.iter().enumerate() {
            h_eff[(i, i)] -= Complex64::new(0.0, 0.5 * g);
        }
        // Row-sum bound on the spectral radius sets the resolution.
        let bound = (0..N_LEVELS)
            .map(|i| (0..N_LEVELS).map(|j| h_eff[(i, j)].norm()).sum::<f64>())
            .fold(0.0, f64::max);
        let step = if bound > 0.0 { 1.0 / (64.0 * bound) } else { 1.0 };
        let mut powers = Vec::with_capacity(LIFTING_LEVELS);
        powers.push((h_eff * Complex64::new(0.0, -step)).exp());
        for k in 1..LIFTING_LEVELS {
            let p = powers[k - 1];
            powers.push(p * p);
        }

        let mut starts = vec![false; N_LEVELS];
        starts[Level::S12.index()] = true;
        for c in &channels {
            starts[c.lower.index()] = true;
        }
        let decaying: Vec<usize> = (0..N_LEVELS).filter(|&i| gamma[i] > 0.0).collect();
        let slot = channels.iter().map(|c| decaying.iter().position(|&i| i == c.upper.index()).unwrap()).collect();
        let mut sampler = JumpSampler {
            channels,
            gamma,
            decaying,
            slot,
            generator: h_eff * Complex64::new(0.0, -1.0),
            step,
            powers,
            tables: Vec::new(),
        };
        sampler.tables = Level::ALL
            .iter()
            .map(|&l| starts[l.index()].then(|| sampler.tabulate(l)))
            .collect();
        sampler
    }

    fn stride(&self) -> usize {
        1 + self.decaying.len()
    }

    fn row(&self, psi: &StateVector) -> Row {
        let p = pops(psi);
        let mut row = [0.0; N_LEVELS + 1];
        row[0] = self.hazard(&p);
        for (k, &i) in self.decaying.iter().enumerate() {
            row[k + 1] = p[i];
        }
        row
    }

    fn tabulate(&self, start: Level) -> NoJumpTable {
        let u = &self.powers[0];
        let stride = self.stride();
        let mut psi = StateVector::zeros();
        psi[start.index()] = Complex64::new(1.0, 0.0);
        let mut survival = vec![1.0];
        let mut data = self.row(&psi)[..stride].to_vec();
        while survival.len() < TABLE_MAX_LEN && *survival.last().unwrap() > TABLE_MIN_SURVIVAL {
            psi = u * psi;
            survival.push(norm2(&psi));
            data.extend_from_slice(&self.row(&psi)[..stride]);
        }
        let guide = (0..=GUIDE_BUCKETS)
            .map(|j| survival.partition_point(|&s| s >= j as f64 / GUIDE_BUCKETS as f64) as u32)
            .collect();
        NoJumpTable { survival, data, guide, last: psi }
    }

    pub fn channels(&self) -> &[DecayChannel] {
        &self.channels
    }

    fn hazard(&self, p: &[f64; N_LEVELS]) -> f64 {
        p.iter().zip(&self.gamma).map(|(a, g)| a * g).sum()
    }

    /// Solves `S(θ) = r` on one grid interval using the cubic Hermite
    /// interpolant built from the exact values and slopes at both ends.
    fn solve_interval(&self, s0: f64, hazard0: f64, s1: f64, hazard1: f64, r: f64) -> f64 {
        let d0 = -hazard0 * self.step;
        let d1 = -hazard1 * self.step;
        let f = |x: f64| {
            let x2 = x * x;
            let x3 = x2 * x;
            let v = (2.0 * x3 - 3.0 * x2 + 1.0) * s0
                + (x3 - 2.0 * x2 + x) * d0
                + (-2.0 * x3 + 3.0 * x2) * s1
                + (x3 - x2) * d1;
            let dv = (6.0 * x2 - 6.0 * x) * s0
                + (3.0 * x2 - 4.0 * x + 1.0) * d0
                + (-6.0 * x2 + 6.0 * x) * s1
                + (3.0 * x2 - 2.0 * x) * d1;
            (v - r, dv)
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut x = if s0 > s1 { ((s0 - r) / (s0 - s1)).clamp(0.0, 1.0) } else { 0.5 };
        for _ in 0..30 {
            let (v, dv) = f(x);
            if v > 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let next = x - v / dv;
            let next = if dv < 0.0 && next > lo && next < hi { next } else { 0.5 * (lo + hi) };
            if (next - x).abs() < 1e-9 {
                return next;
            }
            x = next;
        }
        x
    }

    /// Time until the next jump starting from `from`, and the index of the
    /// decay channel. `None` if no jump happens within `horizon`.
    pub fn next_jump(&self, from: Level, horizon: f64, rng: &mut ChaCha8Rng) -> Option<(f64, usize)> {
        let r: f64 = rng.sample(Open01);
        let table = match &self.tables[from.index()] {
            Some(t) => t,
            None => return None,
        };
        let last = table.survival.len() - 1;
        let (t, p) = if r > table.survival[last] {
            let j = ((r * GUIDE_BUCKETS as f64) as usize).min(GUIDE_BUCKETS - 1);
            let (lo, hi) = (table.guide[j + 1] as usize, table.guide[j] as usize);
            let i = lo + table.survival[lo..hi].partition_point(|&s| s >= r) - 1;
            let stride = self.stride();
            let (s0, s1) = (table.survival[i], table.survival[i + 1]);
            let rows = &table.data[i * stride..(i + 2) * stride];
            let (r0, r1) = rows.split_at(stride);
            let x = self.solve_interval(s0, r0[0], s1, r1[0], r);
            let mut p = [0.0; N_LEVELS + 1];
            for j in 1..stride {
                p[j] = r0[j] + x * (r1[j] - r0[j]);
            }
            ((i as f64 + x) * self.step, p)
        } else {
            self.continue_beyond(table, last, horizon, r)?
        };
        if t > horizon {
            return None;
        }
        Some((t, self.choose_channel(&p, rng)))
    }

    /// Binary lifting past the end of a table: finds the last grid time with
    /// squared norm ≥ r, then solves inside the following step.
    fn continue_beyond(&self, table: &NoJumpTable, last: usize, horizon: f64, r: f64) -> Option<(f64, Row)> {
        let mut psi = table.last;
        let mut n: u128 = last as u128;
        let max_steps = (horizon / self.step).ceil() as u128 + 1;
        for k in (0..LIFTING_LEVELS).rev() {
            if n + (1u128 << k) > max_steps {
                continue;
            }
            let next = self.powers[k] * psi;
            if norm2(&next) >= r {
                psi = next;
                n += 1u128 << k;
            }
        }
        let next = self.powers[0] * psi;
        let (s0, s1) = (norm2(&psi), norm2(&next));
        if s1 >= r {
            return None;
        }
        let (r0, r1) = (self.row(&psi), self.row(&next));
        let x = self.solve_interval(s0, r0[0], s1, r1[0], r);
        let p = std::array::from_fn(|j| r0[j] + x * (r1[j] - r0[j]));
        Some(((n as f64 + x) * self.step, p))
    }

    /// Picks a channel with weight `Γ_k · |ψ_upper|²`; `row` is a table row.
    fn choose_channel(&self, row: &Row, rng: &mut ChaCha8Rng) -> usize {
        let weight = |k: usize| self.channels[k].rate * row[1 + self.slot[k]];
        let total: f64 = (0..self.channels.len()).map(weight).sum();
        let mut u = rng.random::<f64>() * total;
        for k in 0..self.channels.len() {
            u -= weight(k);
            if u < 0.0 {
                return k;
            }
        }
        // Rounding at the top of the range: last channel with weight.
        (0..self.channels.len()).rposition(|k| weight(k) > 0.0).unwrap_or(0)
    }

    /// Time from the lower level of `channel` until the next jump on that
    /// channel, with every other jump on the way followed.
    pub fn next_on_channel(&self, channel: usize, horizon: f64, rng: &mut ChaCha8Rng) -> Option<f64> {
        let mut level = self.channels[channel].lower;
        let mut t = 0.0;
        loop {
            let (dt, k) = self.next_jump(level, horizon - t, rng)?;
            t += dt;
            if k == channel {
                return Some(t);
            }
            level = self.channels[k].lower;
        }
    }

    /// Mean and variance of the interval between successive jumps on
    /// `channel`, integrated from the no-jump tables. `None` when a table is
    /// cut off before its survival has decayed.
    pub fn interval_moments(&self, channel: usize) -> Option<(f64, f64)> {
        let levels: Vec<usize> = (0..N_LEVELS).filter(|&l| self.tables[l].is_some()).collect();
        let n = levels.len();
        let pos = |l: Level| levels.iter().position(|&x| x == l.index());
        let stride = self.stride();
        // Per start level: I - A, the first and second moment sources.
        let mut m = DMatrix::<f64>::identity(n, n);
        let mut a_tot = DVector::<f64>::zeros(n);
        let mut b_tot = DVector::<f64>::zeros(n);
        let mut a_k = vec![vec![0.0; self.channels.len()]; n];
        for (row, &l) in levels.iter().enumerate() {
            let table = self.tables[l].as_ref().unwrap();
            if *table.survival.last().unwrap() > 1e-9 {
                return None;
            }
            let len = table.survival.len();
            for (k, c) in self.channels.iter().enumerate() {
                let col = 1 + self.slot[k];
                let (mut q, mut a, mut b) = (0.0, 0.0, 0.0);
                for i in 0..len {
                    let w = if i == 0 || i == len - 1 { 0.5 } else { 1.0 };
                    let t = i as f64 * self.step;
                    let f = w * c.rate * table.data[i * stride + col] * self.step;
                    q += f;
                    a += f * t;
                    b += f * t * t;
                }
                a_tot[row] += a;
                b_tot[row] += b;
                a_k[row][k] = a;
                if k != channel {
                    m[(row, pos(c.lower)?)] -= q;
                }
            }
        }
        let lu = m.lu();
        let m1 = lu.solve(&a_tot)?;
        let mut rhs = b_tot;
        for row in 0..n {
            for (k, c) in self.channels.iter().enumerate() {
                if k != channel {
                    rhs[row] += 2.0 * a_k[row][k] * m1[pos(c.lower)?];
                }
            }
        }
        let m2 = lu.solve(&rhs)?;
        let start = pos(self.channels[channel].lower)?;
        let mean = m1[start];
        Some((mean, (m2[start] - mean * mean).max(0.0)))
    }

    /// Runs one trajectory from `start`, calling `emit(channel, t)` per jump.
    pub fn run<F: FnMut(usize, f64)>(&self, start: Level, duration: f64, rng: &mut ChaCha8Rng, mut emit: F) {
        let mut level = start;
        let mut t = 0.0;
        while let Some((dt, k)) = self.next_jump(level, duration - t, rng) {
            t += dt;
            emit(k, t);
            level = self.channels[k].lower;
        }
    }

    /// Normalized level populations of a single trajectory at the requested
    /// ascending times. Used to compare the unraveling with the master
    /// equation.
    pub fn sample_populations(&self, start: Level, times: &[f64], rng: &mut ChaCha8Rng) -> Vec<[f64; N_LEVELS]> {
        let end = times.last().copied().unwrap_or(0.0);
        let mut jumps = vec![(0.0, start)];
        self.run(start, end, rng, |k, t| jumps.push((t, self.channels[k].lower)));
        times
            .iter()
            .map(|&t| {
                let j = jumps.partition_point(|&(tj, _)| tj <= t) - 1;
                let (tj, level) = jumps[j];
                let mut psi = StateVector::zeros();
                psi[level.index()] = Complex64::new(1.0, 0.0);
                let psi = (self.generator * Complex64::new(t - tj, 0.0)).exp() * psi;
                let n = norm2(&psi);
                std::array::from_fn(|i| psi[i].norm_sqr() / n)
            })
            .collect()
    }
}

/// Simulates emissions of one trajectory starting in S1/2.
pub fn simulate_trajectory(scheme: &LevelScheme, drives: &[LaserDrive], duration: f64, seed: u64) -> Result<Emissions> {
    if !(duration > 0.0) {
        return Err(Error::Config(format!("duration must be positive, got {duration}")));
    }
    let h = hamiltonian(scheme, drives)?;
    let sampler = JumpSampler::new(&h, &scheme.decays);
    let mut times = vec![Vec::new(); sampler.channels().len()];
    let mut rng = stream_rng(seed, 0, 0);
    sampler.run(Level::S12, duration, &mut rng, |k, t| times[k].push(t));
    Ok(Emissions { duration, channels: sampler.channels().to_vec(), times })
}

/// Geometric thinning of the fluorescence photons: skips a geometric number
/// of emissions between detections, so undetected photons cost no draws.
struct Router {
    p_total: f64,
    share_first: f64,
    countdown: u64,
    rng: ChaCha8Rng,
}

impl Router {
    fn new(p: [f64; 2], rng: ChaCha8Rng) -> Self {
        let p_total = p[0] + p[1];
        let share_first = if p_total > 0.0 { p[0] / p_total } else { 0.0 };
        let mut r = Router { p_total, share_first, countdown: 0, rng };
        r.countdown = r.skip();
        r
    }

    fn skip(&mut self) -> u64 {
        if self.p_total <= 0.0 {
            return u64::MAX;
        }
        if self.p_total >= 1.0 {
            return 0;
        }
        let u: f64 = self.rng.sample(Open01);
        let n = (u.ln() / (-self.p_total).ln_1p()).floor();
        if n >= u64::MAX as f64 { u64::MAX } else { n as u64 }
    }

    /// Channel index (0 or 1) that detects this emission, if any.
    fn route(&mut self) -> Option<usize> {
        if self.countdown > 0 {
            self.countdown -= 1;
            return None;
        }
        let ch = if self.rng.random::<f64>() < self.share_first { 0 } else { 1 };
        self.countdown = self.skip();
        Some(ch)
    }
}

fn background_times(rate: f64, duration: f64, mut rng: ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::new();
    if rate <= 0.0 {
        return out;
    }
    let mut t = 0.0;
    loop {
        let u: f64 = rng.sample(Open01);
        t -= u.ln() / rate;
        if t > duration {
            return out;
        }
        out.push(t);
    }
}

fn merge(channel: u8, duration: f64, signal: Vec<f64>, background: Vec<f64>) -> PhotonStream {
    let mut times = Vec::with_capacity(signal.len() + background.len());
    let mut origins = Vec::with_capacity(times.capacity());
    let (mut i, mut j) = (0, 0);
    while i < signal.len() || j < background.len() {
        if j == background.len() || (i < signal.len() && signal[i] <= background[j]) {
            times.push(signal[i]);
            origins.push(Origin::Signal);
            i += 1;
        } else {
            times.push(background[j]);
            origins.push(Origin::Background);
            j += 1;
        }
    }
    PhotonStream { channel, duration, times, origins: Some(origins) }
}

fn detect_segment(
    fluorescence: impl IntoIterator<Item = f64>,
    model: &DetectorModel,
    duration: f64,
    seed: u64,
    segment: u64,
) -> Result<[PhotonStream; 2]> {
    let p = model.routing_probabilities()?;
    let mut router = Router::new(p, stream_rng(seed, segment, 1));
    let mut signal = [Vec::new(), Vec::new()];
    for t in fluorescence {
        if let Some(ch) = router.route() {
            signal[ch].push(t);
        }
    }
    Ok(assemble(signal, model, duration, seed, segment))
}

fn assemble(signal: [Vec<f64>; 2], model: &DetectorModel, duration: f64, seed: u64, segment: u64) -> [PhotonStream; 2] {
    let [s1, s2] = signal;
    let b1 = background_times(model.background[0], duration, stream_rng(seed, segment, 2));
    let b2 = background_times(model.background[1], duration, stream_rng(seed, segment, 3));
    [merge(1, duration, s1, b1), merge(2, duration, s2, b2)]
}

/// Routes the 397 nm emissions of a trajectory to the two fiber channels and
/// adds Poissonian background.
pub fn detect(emissions: &Emissions, model: &DetectorModel, duration: f64, seed: u64) -> Result<(PhotonStream, PhotonStream)> {
    if !(duration > 0.0) {
        return Err(Error::Config(format!("duration must be positive, got {duration}")));
    }
    let fl = emissions.on(Level::P12, Level::S12).iter().copied().filter(|&t| t <= duration);
    let [a, b] = detect_segment(fl, model, duration, seed, 0)?;
    Ok((a, b))
}

/// Options for long acquisitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionOptions {
    /// Length of each independent trajectory segment, s.
    pub segment: f64,
    pub parallel: bool,
}

impl Default for AcquisitionOptions {
    fn default() -> Self {
        AcquisitionOptions { segment: 1.0, parallel: true }
    }
}

/// Result of [`simulate_acquisition`].
#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition {
    pub streams: (PhotonStream, PhotonStream),
    /// Number of 397 nm emissions over the whole run. Only the skipped
    /// stretch cut by a segment end is estimated from the mean interval.
    pub fluorescence_emissions: u64,
}

/// Emission intervals simulated exactly before each detection. Longer runs
/// of undetected emissions are collapsed into one gap; 32 intervals last
/// microseconds, far beyond any coincidence window.
pub const EXACT_INTERVALS: u64 = 32;

/// Number of trials up to and including the first success.
fn geometric(p: f64, rng: &mut ChaCha8Rng) -> u64 {
    if p >= 1.0 {
        return 1;
    }
    let u: f64 = rng.sample(Open01);
    let n = (u.ln() / (-p).ln_1p()).floor() + 1.0;
    if n >= u64::MAX as f64 { u64::MAX } else { n as u64 }
}

/// Sum of `n` emission intervals with the exact mean and variance.
fn collapsed_gap(n: u64, moments: (f64, f64), rng: &mut ChaCha8Rng) -> f64 {
    let (mean, var) = moments;
    let n = n as f64;
    if var <= 0.0 {
        return n * mean;
    }
    Gamma::new(n * mean * mean / var, var / mean).map_or(n * mean, |g| g.sample(rng))
}

/// Simulates a detector run of arbitrary length without storing emissions.
///
/// Each 397 nm emission returns the ion to S1/2, so the emissions form a
/// renewal process, and routing them independently makes the detections
/// one as well. The number of emissions up to the next detection is drawn
/// from the geometric law; the last [`EXACT_INTERVALS`] of them are
/// simulated as quantum-jump trajectories, and any earlier ones are
/// replaced by a gamma-distributed gap with the exact interval mean and
/// variance. Photon pairs within a coincidence window are therefore
/// sampled exactly.
pub fn simulate_acquisition(
    scheme: &LevelScheme,
    drives: &[LaserDrive],
    model: &DetectorModel,
    duration: f64,
    seed: u64,
    options: AcquisitionOptions,
) -> Result<Acquisition> {
    if !(duration > 0.0) || !(options.segment > 0.0) {
        return Err(Error::Config("duration and segment length must be positive".into()));
    }
    let p = model.routing_probabilities()?;
    let p_total = p[0] + p[1];
    let share_first = if p_total > 0.0 { p[0] / p_total } else { 0.0 };
    let h = hamiltonian(scheme, drives)?;
    let sampler = JumpSampler::new(&h, &scheme.decays);
    let fluor = sampler.channels().iter().position(|c| c.upper == Level::P12 && c.lower == Level::S12);
    let moments = fluor.and_then(|k| sampler.interval_moments(k));
    let n_seg = (duration / options.segment).ceil().max(1.0) as u64;

    let run_segment = |j: u64| {
        let start = j as f64 * options.segment;
        let len = (duration - start).min(options.segment);
        let mut signal = [Vec::new(), Vec::new()];
        let mut emitted = 0u64;
        let mut rng = stream_rng(seed, j, 0);
        let mut route = stream_rng(seed, j, 1);
        if let Some(k) = fluor {
            let mut t = 0.0;
            'run: loop {
                let n = if p_total > 0.0 { geometric(p_total, &mut route) } else { u64::MAX };
                let exact = if moments.is_some() { n.min(EXACT_INTERVALS) } else { n };
                if let (Some(mo), true) = (moments, n > exact) {
                    let gap = collapsed_gap(n - exact, mo, &mut rng);
                    if t + gap > len {
                        emitted += ((len - t) / mo.0) as u64;
                        break;
                    }
                    t += gap;
                    emitted += n - exact;
                }
                for _ in 0..exact {
                    match sampler.next_on_channel(k, len - t, &mut rng) {
                        Some(dt) => t += dt,
                        None => break 'run,
                    }
                    emitted += 1;
                }
                let ch = usize::from(route.random::<f64>() >= share_first);
                signal[ch].push(t);
            }
        }
        (start, assemble(signal, model, len, seed, j), emitted)
    };
    let parts: Vec<_> = if options.parallel {
        (0..n_seg).into_par_iter().map(run_segment).collect()
    } else {
        (0..n_seg).map(run_segment).collect()
    };

    let mut out: [PhotonStream; 2] = [1u8, 2u8].map(|c| PhotonStream {
        channel: c,
        duration,
        times: Vec::new(),
        origins: Some(Vec::new()),
    });
    let mut emitted = 0;
    for (start, streams, e) in parts {
        emitted += e;
        for (o, s) in out.iter_mut().zip(streams) {
            o.times.extend(s.times.iter().map(|t| (t + start).min(duration)));
            o.origins.as_mut().unwrap().extend(s.origins.unwrap());
        }
    }
    let [a, b] = out;
    Ok(Acquisition { streams: (a, b), fluorescence_emissions: emitted })
}

/// Metadata stored at the head of a time-tag file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeTagHeader {
    pub channel: u8,
    pub duration_s: f64,
    pub seed: u64,
    pub model: DetectorModel,
    /// Version of the producing software.
    #[serde(default)]
    pub software_version: String,
    /// SHA-256 of the configuration the stream was generated from.
    #[serde(default)]
    pub config_sha256: String,
}

const MAGIC: &[u8; 8] = b"IONTAG01";

fn to_ns(times: &[f64]) -> Vec<u64> {
    times.iter().map(|t| (t * 1e9).round() as u64).collect()
}

fn stream_from_ns(header: &TimeTagHeader, ns: Vec<u64>) -> Result<PhotonStream> {
    let times = ns.into_iter().map(|n| n as f64 * 1e-9).collect::<Vec<_>>();
    let duration = header.duration_s.max(times.last().copied().unwrap_or(0.0));
    PhotonStream::new(header.channel, duration, times, None)
}

/// Binary layout: magic `IONTAG01`, little-endian u32 header length, JSON
/// header, u64 event count, then u64 timestamps in ns.
pub fn write_binary<W: Write>(mut w: W, stream: &PhotonStream, header: &TimeTagHeader) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Parse(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(stream.times.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(stream.times.len() * 8);
    for n in to_ns(&stream.times) {
        buf.extend_from_slice(&n.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<(TimeTagHeader, PhotonStream)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse("not a time-tag file (bad magic)".into()));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let mut json = vec![0u8; u32::from_le_bytes(len4) as usize];
    r.read_exact(&mut json)?;
    let header: TimeTagHeader = serde_json::from_slice(&json).map_err(|e| Error::Parse(format!("time-tag header: {e}")))?;
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let n = u64::from_le_bytes(len8) as usize;
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)?;
    let ns = raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    let stream = stream_from_ns(&header, ns)?;
    Ok((header, stream))
}

/// CSV layout: `# header: <json>` line, then a `timestamp_ns` column.
pub fn write_csv<W: Write>(mut w: W, stream: &PhotonStream, header: &TimeTagHeader) -> Result<()> {
    let json = serde_json::to_string(header).map_err(|e| Error::Parse(e.to_string()))?;
    writeln!(w, "# header: {json}")?;
    writeln!(w, "timestamp_ns")?;
    for n in to_ns(&stream.times) {
        writeln!(w, "{n}")?;
    }
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<(TimeTagHeader, PhotonStream)> {
    let mut header = None;
    let mut ns = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if let Some(json) = line.strip_prefix("# header:") {
            header = Some(serde_json::from_str(json.trim()).map_err(|e| Error::Parse(format!("time-tag header: {e}")))?);
        } else if line.is_empty() || line.starts_with('#') || line == "timestamp_ns" {
            continue;
        } else {
            ns.push(line.parse::<u64>().map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?);
        }
    }
    let header = header.ok_or_else(|| Error::Parse("time-tag CSV has no header line".into()))?;
    let stream = stream_from_ns(&header, ns)?;
    Ok((header, stream))
}

/// Reads either format, chosen by extension (`.csv`) or content.
pub fn read_time_tags(path: &Path) -> Result<(TimeTagHeader, PhotonStream)> {
    let file = std::fs::File::open(path)?;
    if path.extension().is_some_and(|e| e == "csv") {
        read_csv(file)
    } else {
        read_binary(std::io::BufReader::new(file))
    }
}

/// Ensemble-averaged level populations of `trajectories` runs from S1/2 at
/// the given times, with standard errors of the mean.
pub fn ensemble_populations(
    sampler: &JumpSampler,
    times: &[f64],
    trajectories: usize,
    seed: u64,
) -> (Vec<[f64; N_LEVELS]>, Vec<[f64; N_LEVELS]>) {
    let mut sum = vec![[0.0; N_LEVELS]; times.len()];
    let mut sum2 = vec![[0.0; N_LEVELS]; times.len()];
    for n in 0..trajectories {
        let mut rng = stream_rng(seed, n as u64, 0);
        for (i, p) in sampler.sample_populations(Level::S12, times, &mut rng).into_iter().enumerate() {
            for j in 0..N_LEVELS {
                sum[i][j] += p[j];
                sum2[i][j] += p[j] * p[j];
            }
        }
    }
    let nf = trajectories as f64;
    let mean: Vec<[f64; N_LEVELS]> = sum.iter().map(|s| s.map(|x| x / nf)).collect();
    let err = sum2
        .iter()
        .zip(&mean)
        .map(|(s2, m)| std::array::from_fn(|j| ((s2[j] / nf - m[j] * m[j]).max(0.0) / (nf - 1.0)).sqrt()))
        .collect();
    (mean, err)
}
