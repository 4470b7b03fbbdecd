//! ⁴⁰Ca⁺ level scheme, laser drives and the rotating-frame Hamiltonian.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::Matrix5;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::constants::{mhz_to_angular, ATOMIC_MASS_UNIT, ELEMENTARY_CHARGE};
use crate::{Error, Result};

/// Number of electronic levels in the model.
pub const N_LEVELS: usize = 5;

/// 5×5 complex operator on the level space (units of rad/s for Hamiltonians).
pub type Operator = Matrix5<Complex64>;

const BRANCHING_TOL: f64 = 1e-12;

/// Electronic level of the ion. Zeeman sublevels are collapsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    S12,
    P12,
    P32,
    D32,
    D52,
}

impl Level {
    pub const ALL: [Level; N_LEVELS] = [Level::S12, Level::P12, Level::P32, Level::D32, Level::D52];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Level::S12 => "S1/2",
            Level::P12 => "P1/2",
            Level::P32 => "P3/2",
            Level::D32 => "D3/2",
            Level::D52 => "D5/2",
        }
    }

    pub fn from_label(s: &str) -> Option<Level> {
        Level::ALL.into_iter().find(|l| l.label() == s)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Vacuum wavelength of a dipole transition, in meters.
pub fn transition_wavelength(a: Level, b: Level) -> Option<f64> {
    use Level::*;
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let nm = match (lo, hi) {
        (S12, P12) => 396.959,
        (S12, P32) => 393.366,
        (P12, D32) => 866.214,
        (P32, D32) => 849.802,
        (P32, D52) => 854.209,
        _ => return None,
    };
    Some(nm * 1e-9)
}

/// Spontaneous decay `upper → lower` with rate in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayChannel {
    pub upper: Level,
    pub lower: Level,
    pub rate: f64,
    pub wavelength: f64,
}

/// Coherent drive of `transition = (lower, upper)`; detuning < 0 is red.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserDrive {
    pub transition: (Level, Level),
    pub rabi: f64,
    pub detuning: f64,
}

impl LaserDrive {
    pub fn new(lower: Level, upper: Level, rabi: f64, detuning: f64) -> Self {
        Self { transition: (lower, upper), rabi, detuning }
    }

    pub fn lower(&self) -> Level {
        self.transition.0
    }

    pub fn upper(&self) -> Level {
        self.transition.1
    }
}

/// Branching fraction of the decay `upper → lower`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branching {
    pub upper: Level,
    pub lower: Level,
    pub fraction: f64,
}

/// Atomic parameters: total linewidths of decaying levels (rad/s), branching
/// fractions, mass (kg) and charge (C).
#[derive(Debug, Clone, PartialEq)]
pub struct AtomConfig {
    pub linewidths: Vec<(Level, f64)>,
    pub branchings: Vec<Branching>,
    pub mass: f64,
    pub charge: f64,
}

const DEFAULT_CA40: &str = include_str!("../../../config/ca40.toml");

#[derive(Debug, Serialize, Deserialize)]
struct AtomConfigFile {
    #[serde(default)]
    version: Option<u32>,
    mass_u: f64,
    charge_e: f64,
    linewidth_mhz: BTreeMap<String, f64>,
    branching: BTreeMap<String, BTreeMap<String, f64>>,
}

fn parse_level(s: &str) -> Result<Level> {
    Level::from_label(s).ok_or_else(|| Error::Parse(format!("unknown level label `{s}`")))
}

impl AtomConfig {
    /// Literature defaults for ⁴⁰Ca⁺ shipped with the crate.
    pub fn ca40_default() -> Self {
        Self::from_toml_str(DEFAULT_CA40).expect("bundled ca40.toml is valid")
    }

    /// Text of the bundled defaults.
    pub fn default_text() -> &'static str {
        DEFAULT_CA40
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: AtomConfigFile =
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut linewidths = Vec::new();
        for (label, mhz) in &file.linewidth_mhz {
            linewidths.push((parse_level(label)?, mhz_to_angular(*mhz)));
        }
        let mut branchings = Vec::new();
        for (upper, lowers) in &file.branching {
            let upper = parse_level(upper)?;
            for (lower, fraction) in lowers {
                branchings.push(Branching { upper, lower: parse_level(lower)?, fraction: *fraction });
            }
        }
        let cfg = AtomConfig {
            linewidths,
            branchings,
            mass: file.mass_u * ATOMIC_MASS_UNIT,
            charge: file.charge_e * ELEMENTARY_CHARGE,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Serializes back into the config-file format (MHz, u, e).
    pub fn to_toml_string(&self) -> String {
        let mut branching: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for b in &self.branchings {
            branching
                .entry(b.upper.label().to_string())
                .or_default()
                .insert(b.lower.label().to_string(), b.fraction);
        }
        let file = AtomConfigFile {
            version: Some(1),
            mass_u: self.mass / ATOMIC_MASS_UNIT,
            charge_e: self.charge / ELEMENTARY_CHARGE,
            linewidth_mhz: self
                .linewidths
                .iter()
                .map(|(l, g)| (l.label().to_string(), crate::constants::angular_to_mhz(*g)))
                .collect(),
            branching,
        };
        toml::to_string(&file).expect("atom config serializes")
    }

    /// Total linewidth of `level`, or `None` if it does not decay.
    pub fn linewidth(&self, level: Level) -> Option<f64> {
        self.linewidths.iter().find(|(l, _)| *l == level).map(|(_, g)| *g)
    }

    pub fn set_linewidth(&mut self, level: Level, gamma: f64) {
        match self.linewidths.iter_mut().find(|(l, _)| *l == level) {
            Some(entry) => entry.1 = gamma,
            None => self.linewidths.push((level, gamma)),
        }
    }

    pub fn set_branching(&mut self, upper: Level, lower: Level, fraction: f64) {
        match self.branchings.iter_mut().find(|b| b.upper == upper && b.lower == lower) {
            Some(b) => b.fraction = fraction,
            None => self.branchings.push(Branching { upper, lower, fraction }),
        }
    }

    /// Reduces the 397 nm cycle to a closed two-level system by sending all
    /// P1/2 decay to S1/2.
    pub fn closed_397_cycle(mut self) -> Self {
        self.set_branching(Level::P12, Level::S12, 1.0);
        self.set_branching(Level::P12, Level::D32, 0.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::Config(format!("mass must be positive, got {}", self.mass)));
        }
        if !(self.charge > 0.0 && self.charge.is_finite()) {
            return Err(Error::Config(format!("charge must be positive, got {}", self.charge)));
        }
        for (i, (level, gamma)) in self.linewidths.iter().enumerate() {
            if !(*gamma >= 0.0 && gamma.is_finite()) {
                return Err(Error::Config(format!("linewidth of {level} must be >= 0")));
            }
            if self.linewidths[..i].iter().any(|(l, _)| l == level) {
                return Err(Error::Config(format!("linewidth of {level} given twice")));
            }
        }
        for (i, b) in self.branchings.iter().enumerate() {
            if !(b.fraction >= 0.0 && b.fraction <= 1.0) {
                return Err(Error::Config(format!(
                    "branching {} -> {} must lie in [0, 1], got {}",
                    b.upper, b.lower, b.fraction
                )));
            }
            if !is_decay_channel(b.upper, b.lower) {
                return Err(Error::Config(format!("{} -> {} is not a decay channel", b.upper, b.lower)));
            }
            if self.branchings[..i].iter().any(|o| o.upper == b.upper && o.lower == b.lower) {
                return Err(Error::Config(format!("branching {} -> {} given twice", b.upper, b.lower)));
            }
        }
        for (level, _) in &self.linewidths {
            let sum: f64 = self.branchings.iter().filter(|b| b.upper == *level).map(|b| b.fraction).sum();
            if (sum - 1.0).abs() > BRANCHING_TOL {
                return Err(Error::Branching { level: *level, sum });
            }
        }
        for b in &self.branchings {
            if self.linewidth(b.upper).is_none() {
                return Err(Error::Config(format!("branching given for {} but no linewidth", b.upper)));
            }
        }
        Ok(())
    }
}

fn is_decay_channel(upper: Level, lower: Level) -> bool {
    use Level::*;
    matches!((upper, lower), (P12, S12) | (P12, D32) | (P32, S12) | (P32, D32) | (P32, D52))
}

/// The five-level scheme with its decay channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelScheme {
    pub levels: Vec<Level>,
    pub decays: Vec<DecayChannel>,
}

impl LevelScheme {
    pub fn channel(&self, upper: Level, lower: Level) -> Option<&DecayChannel> {
        self.decays.iter().find(|c| c.upper == upper && c.lower == lower)
    }

    /// The 397 nm P1/2 → S1/2 channel observed by both fibers.
    pub fn fluorescence_channel(&self) -> Option<&DecayChannel> {
        self.channel(Level::P12, Level::S12)
    }

    /// Sum of the rates of all channels leaving `level`.
    pub fn total_decay_rate(&self, level: Level) -> f64 {
        self.decays.iter().filter(|c| c.upper == level).map(|c| c.rate).sum()
    }
}

/// Builds the ⁴⁰Ca⁺ scheme: P1/2 → {S1/2, D3/2}, P3/2 → {S1/2, D3/2, D5/2}.
///
/// Channel rate = level linewidth × branching fraction; channels with zero
/// branching are omitted.
pub fn build_ca40_scheme(cfg: &AtomConfig) -> Result<LevelScheme> {
    cfg.validate()?;
    let mut decays = Vec::new();
    for (upper, lowers) in [
        (Level::P12, &[Level::S12, Level::D32][..]),
        (Level::P32, &[Level::S12, Level::D32, Level::D52][..]),
    ] {
        let Some(gamma) = cfg.linewidth(upper) else { continue };
        for &lower in lowers {
            let fraction = cfg
                .branchings
                .iter()
                .find(|b| b.upper == upper && b.lower == lower)
                .map_or(0.0, |b| b.fraction);
            let rate = gamma * fraction;
            if rate > 0.0 {
                decays.push(DecayChannel {
                    upper,
                    lower,
                    rate,
                    wavelength: transition_wavelength(upper, lower).expect("dipole transition"),
                });
            }
        }
    }
    Ok(LevelScheme { levels: Level::ALL.to_vec(), decays })
}

/// On-resonance Rabi frequency for saturation parameter `s = 2Ω²/Γ²`.
pub fn rabi_from_saturation(s: f64, gamma: f64) -> f64 {
    assert!(s >= 0.0, "saturation parameter must be non-negative");
    assert!(gamma > 0.0, "linewidth must be positive");
    gamma * (s / 2.0).sqrt()
}

/// Inverse of [`rabi_from_saturation`].
pub fn saturation_from_rabi(rabi: f64, gamma: f64) -> f64 {
    2.0 * rabi * rabi / (gamma * gamma)
}

/// Rotating-frame Hamiltonian in the rotating-wave approximation (ħ = 1).
///
/// Each connected set of driven levels gets its own frame anchored at a level
/// that is not the upper state of any drive; energies accumulate `-δ` along
/// every drive from lower to upper.
pub fn hamiltonian(_scheme: &LevelScheme, drives: &[LaserDrive]) -> Result<Operator> {
    let mut parent: [usize; N_LEVELS] = std::array::from_fn(|i| i);
    fn find(parent: &mut [usize; N_LEVELS], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }

    for (i, d) in drives.iter().enumerate() {
        let (lo, hi) = d.transition;
        if lo == hi {
            return Err(Error::Config(format!("drive couples {lo} to itself")));
        }
        if !(d.rabi >= 0.0 && d.rabi.is_finite() && d.detuning.is_finite()) {
            return Err(Error::Config(format!("drive {lo} -> {hi} has invalid rabi/detuning")));
        }
        let same = |o: &LaserDrive| {
            (o.transition.0 == lo && o.transition.1 == hi) || (o.transition.0 == hi && o.transition.1 == lo)
        };
        if drives[..i].iter().any(same) {
            return Err(Error::DuplicateDrive(lo, hi));
        }
        let (a, b) = (find(&mut parent, lo.index()), find(&mut parent, hi.index()));
        if a == b {
            return Err(Error::DriveLoop(lo, hi));
        }
        parent[a] = b;
    }

    // Frame energies by traversal from an anchor in each component.
    let mut energy: [Option<f64>; N_LEVELS] = [None; N_LEVELS];
    let is_upper = |l: Level| drives.iter().any(|d| d.upper() == l);
    for anchor in Level::ALL {
        if energy[anchor.index()].is_some() || is_upper(anchor) {
            continue;
        }
        energy[anchor.index()] = Some(0.0);
        let mut stack = vec![anchor];
        while let Some(level) = stack.pop() {
            let e = energy[level.index()].expect("visited");
            for d in drives {
                let next = if d.lower() == level {
                    (d.upper(), e - d.detuning)
                } else if d.upper() == level {
                    (d.lower(), e + d.detuning)
                } else {
                    continue;
                };
                if energy[next.0.index()].is_none() {
                    energy[next.0.index()] = Some(next.1);
                    stack.push(next.0);
                }
            }
        }
    }

    let mut h = Operator::zeros();
    for level in Level::ALL {
        let e = energy[level.index()].expect("every component has an anchor");
        h[(level.index(), level.index())] = Complex64::new(e, 0.0);
    }
    for d in drives {
        let (lo, hi) = (d.lower().index(), d.upper().index());
        let half = Complex64::new(d.rabi / 2.0, 0.0);
        h[(hi, lo)] += half;
        h[(lo, hi)] += half;
    }
    Ok(h)
}
