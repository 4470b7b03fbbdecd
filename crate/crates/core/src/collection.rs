//! Light collection by a bare fiber facing the ion.
//!
//! The fiber face is treated as a circular aperture of the core radius at the
//! ion-fiber distance; the captured cone is limited either by that aperture
//! or by the fiber's own acceptance.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A fiber looking at the ion along the trap axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiberGeometry {
    /// Core radius, m.
    pub core_radius: f64,
    pub numerical_aperture: f64,
    /// Ion to fiber-face distance, m.
    pub separation: f64,
    /// Distance the fiber face sits behind the electrode tip, m.
    pub recess: f64,
    /// Inner radius of the electrode bore the fiber sits in, m. Used only for
    /// the vignetting check.
    pub bore_radius: Option<f64>,
}

impl FiberGeometry {
    /// 200 µm core, NA 0.48, 275 µm from the ion, 50 µm behind the tip of an
    /// electrode with a 254 µm bore.
    pub fn fiber_trap() -> Self {
        FiberGeometry {
            core_radius: 100e-6,
            numerical_aperture: 0.48,
            separation: 275e-6,
            recess: 50e-6,
            bore_radius: Some(127e-6),
        }
    }

    pub fn at_separation(mut self, separation: f64) -> Self {
        self.separation = separation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.core_radius > 0.0) {
            return Err(Error::Config(format!("core radius must be positive, got {}", self.core_radius)));
        }
        if !(self.numerical_aperture > 0.0 && self.numerical_aperture < 1.0) {
            return Err(Error::Config(format!("fiber NA must lie in (0, 1), got {}", self.numerical_aperture)));
        }
        if !(self.separation > 0.0) {
            return Err(Error::Config(format!("separation must be positive, got {}", self.separation)));
        }
        Ok(())
    }

    /// Sine of the half-angle subtended by the core at the ion.
    pub fn core_sine(&self) -> f64 {
        let (r, d) = (self.core_radius, self.separation);
        r / r.hypot(d)
    }

    /// Whether the electrode bore clips the collection cone. The bore opening
    /// lies `recess` in front of the fiber face.
    pub fn vignetted(&self) -> bool {
        let Some(bore) = self.bore_radius else {
            return false;
        };
        let d_tip = self.separation - self.recess;
        if d_tip <= 0.0 {
            return false;
        }
        let bore_sine = bore / bore.hypot(d_tip);
        bore_sine < effective_na(self)
    }
}

/// Effective numerical aperture: the smaller of the fiber NA and the
/// geometric acceptance of the core.
pub fn effective_na(g: &FiberGeometry) -> f64 {
    g.numerical_aperture.min(g.core_sine())
}

/// Fraction of 4π inside a cone of the given numerical aperture.
pub fn solid_angle_fraction(na: f64) -> f64 {
    assert!((0.0..1.0).contains(&na), "numerical aperture {na} outside [0, 1)");
    // 1 - sqrt(1 - x²) loses precision for small x; use x²/(1 + sqrt(1 - x²)).
    0.5 * na * na / (1.0 + (1.0 - na * na).sqrt())
}

/// One row of the collection summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollectionRow {
    /// m.
    pub separation: f64,
    pub effective_na: f64,
    pub per_fiber: f64,
    /// Both fibers together.
    pub total: f64,
    pub vignetted: bool,
}

/// Collection summary for two identical opposing fibers at each separation.
pub fn collection_table(base: &FiberGeometry, separations: &[f64]) -> Result<Vec<CollectionRow>> {
    separations
        .iter()
        .map(|&d| {
            let g = base.at_separation(d);
            g.validate()?;
            let na = effective_na(&g);
            let f = solid_angle_fraction(na);
            Ok(CollectionRow { separation: d, effective_na: na, per_fiber: f, total: 2.0 * f, vignetted: g.vignetted() })
        })
        .collect()
}
