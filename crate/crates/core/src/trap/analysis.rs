//! RF pseudopotential, trap depth and secular frequencies.

use serde::{Deserialize, Serialize};

use super::geometry::RfDrive;
use super::solver::{FieldMap, Grid};
use crate::constants::ELEMENTARY_CHARGE;
use crate::{Error, Result};

/// Time-averaged potential energy of the ion on the field-map grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudopotentialMap {
    pub grid: Grid,
    /// eV, indexed by [`Grid::index`]. Zero on fixed nodes.
    pub energy: Vec<f64>,
    pub fixed: Vec<bool>,
}

impl PseudopotentialMap {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.energy[self.grid.index(i, j)]
    }

    fn is_fixed(&self, i: usize, j: usize) -> bool {
        self.fixed[self.grid.index(i, j)]
    }
}

/// `q²E² / (4 m Ω²)` in eV for a field amplitude `e_field` (V/m).
pub fn pseudopotential_energy(e_field: f64, drive: &RfDrive, mass: f64, charge: f64) -> f64 {
    let w = drive.angular_frequency;
    charge * charge * e_field * e_field / (4.0 * mass * w * w) / ELEMENTARY_CHARGE
}

/// Pseudopotential of a field map solved with the electrodes at the RF
/// amplitude.
pub fn pseudopotential(f: &FieldMap, drive: &RfDrive, mass: f64, charge: f64) -> PseudopotentialMap {
    let energy = f.field.iter().map(|&e| pseudopotential_energy(e, drive, mass, charge)).collect();
    PseudopotentialMap { grid: f.grid, energy, fixed: f.fixed.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapDepth {
    /// eV.
    pub radial: f64,
    /// eV.
    pub axial: f64,
    /// Position of the minimum, m.
    pub minimum_r: f64,
    pub minimum_z: f64,
    /// eV.
    pub minimum_energy: f64,
}

impl TrapDepth {
    /// The lower of the two barriers.
    pub fn overall(&self) -> f64 {
        self.radial.min(self.axial)
    }
}

/// Node of the minimum reached by steepest descent from the trap center.
fn find_minimum(u: &PseudopotentialMap) -> Result<(usize, usize)> {
    let g = u.grid;
    let (mut i, mut j) = (0, g.center_row());
    if u.is_fixed(i, j) {
        return Err(Error::NoMinimum);
    }
    loop {
        let mut best = (i, j, u.at(i, j));
        let mut candidates = vec![(i + 1, j), (i, j - 1), (i, j + 1)];
        if i > 0 {
            candidates.push((i - 1, j));
        }
        for (a, b) in candidates {
            if !u.is_fixed(a, b) && u.at(a, b) < best.2 {
                best = (a, b, u.at(a, b));
            }
        }
        if (best.0, best.1) == (i, j) {
            break;
        }
        (i, j) = (best.0, best.1);
    }
    // A minimum touching fixed nodes is not interior.
    let touches = [(i + 1, j), (i, j - 1), (i, j + 1)].iter().any(|&(a, b)| u.is_fixed(a, b))
        || (i > 0 && u.is_fixed(i - 1, j));
    if touches {
        return Err(Error::NoMinimum);
    }
    Ok((i, j))
}

/// Escape barrier met walking from the minimum in a straight line: the
/// first local maximum of the energy, or the last free node if the energy
/// keeps rising until an electrode or the outer boundary. Beyond the first
/// maximum the ion has escaped; inside a hollow electrode the energy falls
/// again and later structure there is irrelevant.
fn path_barrier(u: &PseudopotentialMap, start: (usize, usize), step: (isize, isize)) -> f64 {
    let g = u.grid;
    let (mut i, mut j) = (start.0 as isize, start.1 as isize);
    let mut top = f64::NEG_INFINITY;
    while i >= 0 && j >= 0 && (i as usize) < g.nr && (j as usize) < g.nz() && !u.is_fixed(i as usize, j as usize) {
        let v = u.at(i as usize, j as usize);
        if v < top {
            break;
        }
        top = v;
        i += step.0;
        j += step.1;
    }
    top
}

/// Escape barriers from the minimum: outward along r, and the lower of the
/// two directions along z.
pub fn trap_depth(u: &PseudopotentialMap) -> Result<TrapDepth> {
    let (i, j) = find_minimum(u)?;
    let min = u.at(i, j);
    let radial = path_barrier(u, (i, j), (1, 0)) - min;
    let axial = path_barrier(u, (i, j), (0, 1)).min(path_barrier(u, (i, j), (0, -1))) - min;
    Ok(TrapDepth { radial, axial, minimum_r: u.grid.r(i), minimum_z: u.grid.z(j), minimum_energy: min })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecularFrequencies {
    /// rad/s.
    pub radial: f64,
    /// rad/s.
    pub axial: f64,
    /// Root-mean-square misfit relative to the energy variation in the window.
    pub fit_residual: f64,
}

/// Nodes on each side of the minimum used for the quadratic fit.
pub const FIT_HALF_WIDTH: usize = 2;

/// Largest relative misfit for which the quadratic fit is trusted.
pub const MAX_FIT_RESIDUAL: f64 = 0.05;

/// Harmonic frequencies from a fit of `c + a·r² + b·δz² + e·δz` around the
/// minimum, with `U = ½ m ω² x²`.
pub fn secular_frequencies(u: &PseudopotentialMap, mass: f64) -> Result<SecularFrequencies> {
    let (i0, j0) = find_minimum(u)?;
    let g = u.grid;
    if i0 != 0 {
        return Err(Error::NoMinimum);
    }
    let w = FIT_HALF_WIDTH;
    if j0 < w || j0 + w >= g.nz() {
        return Err(Error::NoMinimum);
    }
    let mut rows = Vec::new();
    for j in j0 - w..=j0 + w {
        for i in 0..=w {
            if u.is_fixed(i, j) {
                continue;
            }
            let r = g.r(i);
            let dz = g.z(j) - g.z(j0);
            rows.push(([1.0, r * r, dz * dz, dz], u.at(i, j) * ELEMENTARY_CHARGE));
        }
    }
    let mut ata = nalgebra::Matrix4::<f64>::zeros();
    let mut atb = nalgebra::Vector4::<f64>::zeros();
    for (x, y) in &rows {
        let x = nalgebra::Vector4::from_column_slice(x);
        ata += x * x.transpose();
        atb += x * *y;
    }
    let p = ata.lu().solve(&atb).ok_or(Error::Singular)?;
    let u0 = rows.iter().map(|(_, y)| *y).fold(f64::INFINITY, f64::min);
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (x, y) in &rows {
        let model = p[0] + p[1] * x[1] + p[2] * x[2] + p[3] * x[3];
        ss_res += (y - model).powi(2);
        ss_tot += (y - u0).powi(2);
    }
    let fit_residual = if ss_tot > 0.0 { (ss_res / ss_tot).sqrt() } else { f64::INFINITY };
    if !(fit_residual < MAX_FIT_RESIDUAL) || p[1] <= 0.0 || p[2] <= 0.0 {
        return Err(Error::PoorQuadraticFit(fit_residual));
    }
    Ok(SecularFrequencies { radial: (2.0 * p[1] / mass).sqrt(), axial: (2.0 * p[2] / mass).sqrt(), fit_residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atom::AtomConfig;
    use crate::constants::mhz_to_angular;
    use crate::oracles::pseudopotential_ev;

    fn ca() -> (f64, f64) {
        let c = AtomConfig::ca40_default();
        (c.mass, c.charge)
    }

    fn drive() -> RfDrive {
        RfDrive::new(200.0, mhz_to_angular(14.9)).unwrap()
    }

    fn synthetic(grid: Grid, energy: impl Fn(f64, f64) -> f64) -> PseudopotentialMap {
        let mut e = vec![0.0; grid.len()];
        let mut fixed = vec![false; grid.len()];
        for j in 0..grid.nz() {
            for i in 0..grid.nr {
                let k = grid.index(i, j);
                e[k] = energy(grid.r(i), grid.z(j));
                fixed[k] = i + 1 == grid.nr || j == 0 || j + 1 == grid.nz();
            }
        }
        PseudopotentialMap { grid, energy: e, fixed }
    }

    #[test]
    fn one_megavolt_per_meter() {
        let (m, q) = ca();
        let u = pseudopotential_energy(1e6, &drive(), m, q);
        // 68.87 eV; quoted elsewhere truncated to 68.8.
        assert!((u - 68.8).abs() < 0.1, "{u}");
        assert!((u - pseudopotential_ev(1e6, m, q, drive().angular_frequency)).abs() < 1e-12 * u);
        assert_eq!(pseudopotential_energy(0.0, &drive(), m, q), 0.0);
    }

    #[test]
    fn quadratic_bowl_depth() {
        let grid = Grid { nr: 21, half_nz: 20, spacing: 1e-5 };
        let u = synthetic(grid, |r, z| 1e9 * (r * r + 2.0 * z * z));
        let d = trap_depth(&u).unwrap();
        // Rim values just inside the grounded boundary.
        assert!((d.radial - 1e9 * (19e-5f64).powi(2)).abs() < 1e-12);
        assert!((d.axial - 2e9 * (19e-5f64).powi(2)).abs() < 1e-12);
        assert_eq!(d.minimum_energy, 0.0);
    }

    #[test]
    fn saddle_has_no_minimum() {
        let grid = Grid { nr: 21, half_nz: 20, spacing: 1e-5 };
        let u = synthetic(grid, |r, z| r * r - z * z);
        assert!(matches!(trap_depth(&u), Err(Error::NoMinimum)));
    }

    #[test]
    fn harmonic_map_frequencies_recovered() {
        let (m, _) = ca();
        let (wr, wz) = (mhz_to_angular(1.9), mhz_to_angular(3.8));
        let grid = Grid { nr: 11, half_nz: 10, spacing: 5e-6 };
        let u = synthetic(grid, |r, z| 0.5 * m * (wr * wr * r * r + wz * wz * z * z) / ELEMENTARY_CHARGE);
        let f = secular_frequencies(&u, m).unwrap();
        assert!((f.radial / wr - 1.0).abs() < 1e-9);
        assert!((f.axial / wz - 1.0).abs() < 1e-9);
    }

    #[test]
    fn anharmonic_map_rejected() {
        let (m, _) = ca();
        let grid = Grid { nr: 11, half_nz: 10, spacing: 5e-6 };
        let u = synthetic(grid, |r, z| 1e20 * (r.powi(4) + z.powi(4)));
        assert!(matches!(secular_frequencies(&u, m), Err(Error::PoorQuadraticFit(_))));
    }
}
