//! Run configuration: which atom and trap files to use, the detector model,
//! and per-command settings.

use std::path::{Path, PathBuf};

use ionfiber::atom::{AtomConfig, Level};
use ionfiber::collection::{effective_na, solid_angle_fraction, FiberGeometry};
use ionfiber::constants::{mhz_to_angular, ATOMIC_MASS_UNIT, ELEMENTARY_CHARGE};
use ionfiber::correlator::TdcConfig;
use ionfiber::photostream::{split_background, DetectorModel};
use ionfiber::trap::{ElectrodeStyle, TrapConfig};
use nalgebra::Matrix3;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

const DEFAULT_RUN: &str = include_str!("../../../config/run.toml");

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    version: u32,
    seed: u64,
    output_dir: PathBuf,
    atom_config: PathBuf,
    trap_geometry: PathBuf,
    detector: DetectorSection,
    scan: ScanSettings,
    g2: G2Section,
    straytrack: StraySection,
    stream: StreamSettings,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectorSection {
    fiber_core_radius_um: f64,
    fiber_na: f64,
    fiber_separation_um: f64,
    fiber_recess_um: f64,
    transmission: f64,
    quantum_efficiency: f64,
    background_total_cps: f64,
    channel_sbr: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSettings {
    pub saturation: f64,
    pub detuning_start_mhz: f64,
    pub detuning_stop_mhz: f64,
    pub points: usize,
}

impl ScanSettings {
    pub fn validate(&self) -> CliResult<()> {
        let ok = self.points >= 5
            && self.saturation >= 0.0
            && self.saturation.is_finite()
            && self.detuning_start_mhz.is_finite()
            && self.detuning_stop_mhz > self.detuning_start_mhz
            && self.detuning_stop_mhz.is_finite();
        if !ok {
            return Err(CliError::Config(format!("scan needs >= 5 points for the line fit, saturation >= 0 and start < stop: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct G2Section {
    saturation: f64,
    detuning_mhz: f64,
    acquisition_s: f64,
    segment_s: f64,
    delay_ns: f64,
    bin_width_ns: f64,
    half_window_ns: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StraySection {
    calibration_v_per_cm_per_v: [[f64; 3]; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSettings {
    pub duration_s: f64,
}

/// Detector model inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorSettings {
    pub fiber: FiberGeometry,
    pub transmission: f64,
    pub quantum_efficiency: f64,
    pub background_total_cps: f64,
    pub channel_sbr: [f64; 2],
}

impl DetectorSettings {
    /// Both fibers identical, the background split by the SBR ratio.
    pub fn model(&self) -> DetectorModel {
        let f = solid_angle_fraction(effective_na(&self.fiber));
        DetectorModel {
            collection: [f, f],
            transmission: self.transmission,
            quantum_efficiency: self.quantum_efficiency,
            background: split_background(self.background_total_cps, self.channel_sbr),
        }
    }

    /// Model whose backgrounds give the configured SBRs at `emission_rate`.
    pub fn model_at(&self, emission_rate: f64) -> ionfiber::Result<DetectorModel> {
        self.model().with_target_sbr(emission_rate, self.channel_sbr)
    }
}

/// Correlation-measurement settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct G2Settings {
    pub saturation: f64,
    pub detuning_mhz: f64,
    /// Acquisition time, s.
    pub acquisition_s: f64,
    pub segment_s: f64,
    pub tdc: TdcConfig,
}

impl G2Settings {
    pub fn validate(&self) -> CliResult<()> {
        self.tdc.validate().map_err(|e| CliError::Config(format!("g2: {e}")))?;
        let positive = [self.acquisition_s, self.segment_s];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(self.saturation >= 0.0) || !self.detuning_mhz.is_finite() {
            return Err(CliError::Config(format!("g2 acquisition and segment must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Command-line replacements for atom-config keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AtomOverrides {
    pub mass_u: Option<f64>,
    pub charge_e: Option<f64>,
    /// `(level, MHz)`.
    pub linewidth_mhz: Vec<(Level, f64)>,
    /// `(upper, lower, fraction)`.
    pub branching: Vec<(Level, Level, f64)>,
}

impl AtomOverrides {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    fn apply(&self, atom: &mut AtomConfig) -> CliResult<()> {
        if let Some(m) = self.mass_u {
            atom.mass = m * ATOMIC_MASS_UNIT;
        }
        if let Some(q) = self.charge_e {
            atom.charge = q * ELEMENTARY_CHARGE;
        }
        for &(level, mhz) in &self.linewidth_mhz {
            atom.set_linewidth(level, mhz_to_angular(mhz));
        }
        for &(upper, lower, f) in &self.branching {
            atom.set_branching(upper, lower, f);
        }
        atom.validate().map_err(|e| CliError::Config(format!("atom overrides: {e}")))
    }
}

/// Fully resolved configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub atom: AtomConfig,
    pub trap: TrapConfig,
    pub detector: DetectorSettings,
    pub scan: ScanSettings,
    pub g2: G2Settings,
    /// V/cm per V.
    pub calibration: Matrix3<f64>,
    pub stream: StreamSettings,
    run_text: String,
    trap_text: String,
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

fn bore_of(trap: &TrapConfig) -> Option<f64> {
    match trap.geometry.style {
        ElectrodeStyle::Tubular => Some(trap.geometry.center_bore_radius),
        ElectrodeStyle::Solid => None,
    }
}

impl RunConfig {
    /// The configuration shipped with the tool, including its atom and trap
    /// files.
    pub fn bundled() -> Self {
        Self::from_parts(DEFAULT_RUN, AtomConfig::default_text(), TrapConfig::default_text())
            .expect("bundled configuration is valid")
    }

    /// Loads a run file. Its atom, trap and output paths are relative to it.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = read(path)?;
        let file: RunFile = parse_run(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let atom_path = base.join(&file.atom_config);
        let trap_path = base.join(&file.trap_geometry);
        let (atom_text, trap_text) = (read(&atom_path)?, read(&trap_path)?);
        AtomConfig::from_toml_str(&atom_text).map_err(|e| CliError::Config(format!("{}: {e}", atom_path.display())))?;
        TrapConfig::from_toml_str(&trap_text).map_err(|e| CliError::Config(format!("{}: {e}", trap_path.display())))?;
        let mut cfg = Self::from_parts(&text, &atom_text, &trap_text)?;
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    /// Replaces the trap geometry by the file at `path`.
    pub fn with_trap_file(mut self, path: &Path) -> CliResult<Self> {
        let text = read(path)?;
        self.trap = TrapConfig::from_toml_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        self.detector.fiber.bore_radius = bore_of(&self.trap);
        self.trap_text = text;
        Ok(self)
    }

    /// Replaces the atom configuration by the file at `path`.
    pub fn with_atom_file(mut self, path: &Path) -> CliResult<Self> {
        let text = read(path)?;
        self.atom = AtomConfig::from_toml_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(self)
    }

    pub fn with_atom_overrides(mut self, o: &AtomOverrides) -> CliResult<Self> {
        o.apply(&mut self.atom)?;
        Ok(self)
    }

    /// SHA-256 over the run file, the effective atom parameters and the trap
    /// file, in hex.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::new()
            .chain_update(self.run_text.as_bytes())
            .chain_update([0u8])
            .chain_update(self.atom.to_toml_string().as_bytes())
            .chain_update([0u8])
            .chain_update(self.trap_text.as_bytes())
            .finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn from_parts(run: &str, atom: &str, trap_text: &str) -> CliResult<Self> {
        let file = parse_run(run).map_err(|e| CliError::Config(format!("run config: {e}")))?;
        let atom = AtomConfig::from_toml_str(atom).map_err(|e| CliError::Config(format!("atom config: {e}")))?;
        let trap = TrapConfig::from_toml_str(trap_text).map_err(|e| CliError::Config(format!("trap geometry: {e}")))?;
        let d = &file.detector;
        let um = 1e-6;
        let fiber = FiberGeometry {
            core_radius: d.fiber_core_radius_um * um,
            numerical_aperture: d.fiber_na,
            separation: d.fiber_separation_um * um,
            recess: d.fiber_recess_um * um,
            bore_radius: bore_of(&trap),
        };
        fiber.validate().map_err(|e| CliError::Config(format!("detector: {e}")))?;
        if d.channel_sbr.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(CliError::Config(format!("detector channel_sbr must be positive, got {:?}", d.channel_sbr)));
        }
        let detector = DetectorSettings {
            fiber,
            transmission: d.transmission,
            quantum_efficiency: d.quantum_efficiency,
            background_total_cps: d.background_total_cps,
            channel_sbr: d.channel_sbr,
        };
        detector.model().routing_probabilities().map_err(|e| CliError::Config(format!("detector: {e}")))?;
        let g = &file.g2;
        let g2 = G2Settings {
            saturation: g.saturation,
            detuning_mhz: g.detuning_mhz,
            acquisition_s: g.acquisition_s,
            segment_s: g.segment_s,
            tdc: TdcConfig { delay: g.delay_ns * 1e-9, bin_width: g.bin_width_ns * 1e-9, half_window: g.half_window_ns * 1e-9 },
        };
        g2.validate()?;
        file.scan.validate()?;
        if !(file.stream.duration_s > 0.0) {
            return Err(CliError::Config("stream duration must be positive".into()));
        }
        let c = file.straytrack.calibration_v_per_cm_per_v;
        Ok(RunConfig {
            seed: file.seed,
            output_dir: file.output_dir,
            atom,
            trap,
            detector,
            scan: file.scan,
            g2,
            calibration: Matrix3::from_fn(|i, j| c[i][j]),
            stream: file.stream,
            run_text: run.to_string(),
            trap_text: trap_text.to_string(),
        })
    }
}

fn parse_run(text: &str) -> Result<RunFile, String> {
    let file: RunFile = toml::from_str(text).map_err(|e| e.to_string())?;
    if file.version != 1 {
        return Err(format!("unsupported run config version {}", file.version));
    }
    Ok(file)
}
