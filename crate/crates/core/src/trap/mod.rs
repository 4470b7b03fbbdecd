//! Endcap trap fields: electrostatic solution, pseudopotential, secular
//! motion, micromotion sensitivity and stray-field tracking.

mod analysis;
mod geometry;
mod micromotion;
mod solver;
mod stray;

pub use analysis::{
    pseudopotential, pseudopotential_energy, secular_frequencies, trap_depth, PseudopotentialMap, SecularFrequencies,
    TrapDepth, FIT_HALF_WIDTH, MAX_FIT_RESIDUAL,
};
pub use geometry::{Electrode, ElectrodeStyle, GridSpec, RfDrive, TrapConfig, TrapGeometry};
pub use micromotion::{detection_limit, micromotion_analysis, Micromotion, DETECTION_CALIBRATION};
pub use solver::{residual, solve_laplace, solve_potential, FieldMap, Grid};
pub use stray::{
    fit_field_decay, source_azimuth, stray_field_from_voltages, voltages_from_field, CompensationSample, FieldDecay,
};

/// Everything the trap pipeline reports for one geometry.
#[derive(Debug, Clone)]
pub struct TrapAnalysis {
    pub field: FieldMap,
    pub pseudopotential: PseudopotentialMap,
    pub depth: TrapDepth,
    pub secular: SecularFrequencies,
}

/// Solves the field, then derives depth and secular frequencies.
pub fn analyze(geometry: &TrapGeometry, rf: &RfDrive, grid: &GridSpec, mass: f64, charge: f64) -> crate::Result<TrapAnalysis> {
    let field = solve_potential(geometry, grid, rf.amplitude)?;
    let pseudopotential = pseudopotential(&field, rf, mass, charge);
    let depth = trap_depth(&pseudopotential)?;
    let secular = secular_frequencies(&pseudopotential, mass)?;
    Ok(TrapAnalysis { field, pseudopotential, depth, secular })
}

/// Tubular and solid versions of the same trap, solved concurrently.
#[derive(Debug, Clone)]
pub struct StyleComparison {
    pub tubular: TrapAnalysis,
    pub solid: TrapAnalysis,
}

impl StyleComparison {
    /// Overall depth of the tubular trap relative to the solid one.
    pub fn depth_ratio(&self) -> f64 {
        self.tubular.depth.overall() / self.solid.depth.overall()
    }
}

pub fn compare_styles(
    geometry: &TrapGeometry,
    rf: &RfDrive,
    grid: &GridSpec,
    mass: f64,
    charge: f64,
) -> crate::Result<StyleComparison> {
    let (tubular, solid) = rayon::join(
        || analyze(&geometry.with_style(ElectrodeStyle::Tubular), rf, grid, mass, charge),
        || analyze(&geometry.with_style(ElectrodeStyle::Solid), rf, grid, mass, charge),
    );
    Ok(StyleComparison { tubular: tubular?, solid: solid? })
}
