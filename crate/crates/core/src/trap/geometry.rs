//! Electrode layout of the endcap trap and the RF drive.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constants::mhz_to_angular;
use crate::{Error, Result};

/// Center electrodes are either hollow tubes (the fibers sit in the bore) or
/// solid rods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElectrodeStyle {
    Solid,
    Tubular,
}

/// Cylindrically symmetric endcap trap. Lengths in m. The two RF center
/// electrodes face each other across the trap center and extend to the far
/// boundary; each is surrounded by a grounded coaxial tube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapGeometry {
    pub center_outer_radius: f64,
    pub center_bore_radius: f64,
    /// Distance between the two center-electrode tips.
    pub tip_separation: f64,
    pub ground_inner_radius: f64,
    pub ground_outer_radius: f64,
    /// Axial position of the ground-electrode tips (same on both sides).
    pub ground_tip_z: f64,
    pub style: ElectrodeStyle,
}

/// An axisymmetric electrode: the rectangle `[r_min, r_max] × [z_min, z_max]`
/// in the (r, z) half plane held at a fixed potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Electrode {
    pub r_min: f64,
    pub r_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// V.
    pub potential: f64,
}

impl Electrode {
    pub fn contains(&self, r: f64, z: f64) -> bool {
        r >= self.r_min && r <= self.r_max && z >= self.z_min && z <= self.z_max
    }
}

impl TrapGeometry {
    /// The fiber trap: 458 µm outer and 254 µm inner diameter, tips 446 µm
    /// apart. The ground tubes are not specified by the build drawings that
    /// are available; their defaults are set in the geometry file.
    pub fn fiber_trap() -> Self {
        TrapConfig::default_file().geometry
    }

    pub fn with_style(mut self, style: ElectrodeStyle) -> Self {
        self.style = style;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.center_outer_radius,
            self.tip_separation,
            self.ground_inner_radius,
            self.ground_outer_radius,
            self.ground_tip_z,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(self.center_bore_radius >= 0.0) {
            return Err(Error::Config(format!("trap dimensions must be positive: {self:?}")));
        }
        if self.center_bore_radius >= self.center_outer_radius {
            return Err(Error::Config("center-electrode bore must be smaller than its outer radius".into()));
        }
        if self.ground_inner_radius <= self.center_outer_radius || self.ground_outer_radius <= self.ground_inner_radius {
            return Err(Error::Config("ground tube must enclose the center electrode".into()));
        }
        Ok(())
    }

    /// Electrodes with the center pair at `rf` volts and the ground tubes at
    /// zero. Everything extends axially out to `far`.
    pub fn electrodes(&self, rf: f64, far: f64) -> Vec<Electrode> {
        let tip = 0.5 * self.tip_separation;
        let r_min = match self.style {
            ElectrodeStyle::Solid => 0.0,
            ElectrodeStyle::Tubular => self.center_bore_radius,
        };
        let mut out = Vec::new();
        for (lo, hi) in [(tip, far), (-far, -tip)] {
            out.push(Electrode { r_min, r_max: self.center_outer_radius, z_min: lo, z_max: hi, potential: rf });
        }
        for (lo, hi) in [(self.ground_tip_z, far), (-far, -self.ground_tip_z)] {
            out.push(Electrode {
                r_min: self.ground_inner_radius,
                r_max: self.ground_outer_radius,
                z_min: lo,
                z_max: hi,
                potential: 0.0,
            });
        }
        out
    }
}

/// RF drive of the center electrodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RfDrive {
    /// Peak amplitude, V.
    pub amplitude: f64,
    /// rad/s.
    pub angular_frequency: f64,
}

impl RfDrive {
    pub fn new(amplitude: f64, angular_frequency: f64) -> Result<Self> {
        if !(amplitude > 0.0 && angular_frequency > 0.0) {
            return Err(Error::Config(format!("RF amplitude and frequency must be positive, got {amplitude} V, {angular_frequency} rad/s")));
        }
        Ok(RfDrive { amplitude, angular_frequency })
    }
}

/// Finite-difference grid settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Node spacing, m.
    pub spacing: f64,
    /// Distance from the trap center to the grounded outer boundary, m.
    pub far_boundary: f64,
    /// Convergence threshold on the stencil residual, relative to the largest
    /// electrode potential.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl GridSpec {
    pub fn halved(mut self) -> Self {
        self.spacing *= 0.5;
        self
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CenterSection {
    outer_radius_um: f64,
    bore_radius_um: f64,
    tip_separation_um: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundSection {
    inner_radius_um: f64,
    outer_radius_um: f64,
    tip_z_um: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RfSection {
    amplitude_v: f64,
    frequency_mhz: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSection {
    spacing_um: f64,
    far_boundary_um: f64,
    #[serde(default = "default_tolerance")]
    tolerance: f64,
    #[serde(default = "default_max_iterations")]
    max_iterations: usize,
}

fn default_tolerance() -> f64 {
    1e-8
}

fn default_max_iterations() -> usize {
    200_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrapFile {
    version: u32,
    style: ElectrodeStyle,
    center_electrode: CenterSection,
    ground_electrode: GroundSection,
    rf: RfSection,
    grid: GridSection,
}

/// Everything needed to compute the trap fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrapConfig {
    pub geometry: TrapGeometry,
    pub rf: RfDrive,
    pub grid: GridSpec,
}

const DEFAULT_TRAP: &str = include_str!("../../../../config/endcap_trap.toml");

impl TrapConfig {
    pub fn default_file() -> Self {
        Self::from_toml_str(DEFAULT_TRAP).expect("bundled trap geometry is valid")
    }

    pub fn default_text() -> &'static str {
        DEFAULT_TRAP
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let f: TrapFile = toml::from_str(text).map_err(|e| Error::Parse(format!("trap geometry: {e}")))?;
        if f.version != 1 {
            return Err(Error::Parse(format!("unsupported trap geometry version {}", f.version)));
        }
        let um = 1e-6;
        let geometry = TrapGeometry {
            center_outer_radius: f.center_electrode.outer_radius_um * um,
            center_bore_radius: f.center_electrode.bore_radius_um * um,
            tip_separation: f.center_electrode.tip_separation_um * um,
            ground_inner_radius: f.ground_electrode.inner_radius_um * um,
            ground_outer_radius: f.ground_electrode.outer_radius_um * um,
            ground_tip_z: f.ground_electrode.tip_z_um * um,
            style: f.style,
        };
        geometry.validate()?;
        let rf = RfDrive::new(f.rf.amplitude_v, mhz_to_angular(f.rf.frequency_mhz))?;
        let grid = GridSpec {
            spacing: f.grid.spacing_um * um,
            far_boundary: f.grid.far_boundary_um * um,
            tolerance: f.grid.tolerance,
            max_iterations: f.grid.max_iterations,
        };
        if !(grid.spacing > 0.0 && grid.far_boundary > grid.spacing && grid.tolerance > 0.0) {
            return Err(Error::Config(format!("invalid grid settings: {grid:?}")));
        }
        Ok(TrapConfig { geometry, rf, grid })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}
