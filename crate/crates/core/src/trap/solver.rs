//! Axisymmetric Laplace solver.
//!
//! The half plane `r ≥ 0` is covered by a uniform grid with nodes at
//! `r_i = i·h` and `z_j = (j − n)·h`, so there is always a node at the trap
//! center. Electrode edges that fall between nodes are handled with
//! Shortley–Weller stencils: the neighbor across the edge is replaced by the
//! electrode surface at its true fractional distance. The resulting linear
//! system is relaxed with red-black SOR.

use std::io::Write;

use super::geometry::{Electrode, GridSpec, TrapGeometry};
use crate::{Error, Result};

/// Uniform (r, z) grid. `nr` nodes in r starting on the axis, `2·half_nz + 1`
/// nodes in z centered on `z = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub nr: usize,
    pub half_nz: usize,
    /// m.
    pub spacing: f64,
}

impl Grid {
    pub fn covering(spacing: f64, far: f64) -> Self {
        let n = (far / spacing - 1e-9).ceil() as usize;
        Grid { nr: n + 1, half_nz: n, spacing }
    }

    pub fn nz(&self) -> usize {
        2 * self.half_nz + 1
    }

    pub fn len(&self) -> usize {
        self.nr * self.nz()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nr + i
    }

    pub fn r(&self, i: usize) -> f64 {
        i as f64 * self.spacing
    }

    pub fn z(&self, j: usize) -> f64 {
        (j as f64 - self.half_nz as f64) * self.spacing
    }

    /// Index of the `z = 0` row.
    pub fn center_row(&self) -> usize {
        self.half_nz
    }

    fn on_outer_boundary(&self, i: usize, j: usize) -> bool {
        i + 1 == self.nr || j == 0 || j + 1 == self.nz()
    }
}

/// Solved electrostatic potential and field magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    pub grid: Grid,
    /// V, indexed by [`Grid::index`].
    pub potential: Vec<f64>,
    /// |E| in V/m. Zero on fixed nodes.
    pub field: Vec<f64>,
    /// Nodes inside an electrode or on the grounded outer boundary.
    pub fixed: Vec<bool>,
    /// Largest stencil residual at convergence, V.
    pub residual: f64,
    pub iterations: usize,
}

/// Neighbor order: −r, +r, −z, +z.
#[derive(Clone, Copy)]
struct Stencil {
    node: u32,
    neighbors: [u32; 4],
    /// Weights normalized to sum to one. A missing neighbor has weight zero.
    weights: [f64; 4],
    /// Contribution of neighbors that are electrode surfaces.
    constant: f64,
}

/// Distance (in units of h) from a node to the first electrode surface met
/// along one axis direction, together with that electrode's potential.
fn surface_hit(electrodes: &[Electrode], r: f64, z: f64, dir: usize, h: f64) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for e in electrodes {
        let d = match dir {
            0 if z >= e.z_min && z <= e.z_max && r > e.r_max => r - e.r_max,
            1 if z >= e.z_min && z <= e.z_max && r < e.r_min => e.r_min - r,
            2 if r >= e.r_min && r <= e.r_max && z > e.z_max => z - e.z_max,
            3 if r >= e.r_min && r <= e.r_max && z < e.z_min => e.z_min - z,
            _ => continue,
        };
        let theta = d / h;
        if theta < 1.0 - 1e-12 && best.is_none_or(|(t, _)| theta < t) {
            best = Some((theta, e.potential));
        }
    }
    best
}

/// Three-point weights for a second derivative with neighbors at distances
/// `a` (below) and `b` (above), plus the cylindrical `(1/r)∂/∂r` term when
/// `r` is given.
fn line_weights(a: f64, b: f64, r: Option<f64>) -> (f64, f64) {
    let s = a + b;
    let (mut lo, mut hi) = (2.0 / (a * s), 2.0 / (b * s));
    if let Some(r) = r {
        lo -= b / (r * a * s);
        hi += a / (r * b * s);
    }
    (lo, hi)
}

struct System {
    grid: Grid,
    fixed: Vec<bool>,
    initial: Vec<f64>,
    red: Vec<Stencil>,
    black: Vec<Stencil>,
    /// Largest electrode potential magnitude.
    scale: f64,
}

fn assemble(electrodes: &[Electrode], grid: Grid) -> System {
    let h = grid.spacing;
    let n = grid.len();
    let mut fixed = vec![false; n];
    let mut initial = vec![0.0; n];
    let mut scale: f64 = 0.0;
    for e in electrodes {
        scale = scale.max(e.potential.abs());
    }
    for j in 0..grid.nz() {
        for i in 0..grid.nr {
            let k = grid.index(i, j);
            let (r, z) = (grid.r(i), grid.z(j));
            if let Some(e) = electrodes.iter().find(|e| e.contains(r, z)) {
                fixed[k] = true;
                initial[k] = e.potential;
            } else if grid.on_outer_boundary(i, j) {
                fixed[k] = true;
            }
        }
    }

    let (mut red, mut black) = (Vec::new(), Vec::new());
    for j in 0..grid.nz() {
        for i in 0..grid.nr {
            let k = grid.index(i, j);
            if fixed[k] {
                continue;
            }
            let (r, z) = (grid.r(i), grid.z(j));
            let nb = [
                if i > 0 { grid.index(i - 1, j) } else { k },
                grid.index(i + 1, j),
                grid.index(i, j - 1),
                grid.index(i, j + 1),
            ];
            let mut dist = [1.0; 4];
            let mut wall = [None; 4];
            for (dir, (d, w)) in dist.iter_mut().zip(wall.iter_mut()).enumerate() {
                if dir == 0 && i == 0 {
                    continue;
                }
                if let Some((theta, v)) = surface_hit(electrodes, r, z, dir, h) {
                    *d = theta;
                    *w = Some(v);
                }
            }
            let mut weights = [0.0; 4];
            if i == 0 {
                // Symmetry on the axis: ∇²Φ → 2∂²Φ/∂r² + ∂²Φ/∂z² and
                // Φ(b) ≈ Φ(0) + c·b².
                let b = dist[1] * h;
                weights[1] = 4.0 / (b * b);
            } else {
                let (lo, hi) = line_weights(dist[0] * h, dist[1] * h, Some(r));
                weights[0] = lo;
                weights[1] = hi;
            }
            let (lo, hi) = line_weights(dist[2] * h, dist[3] * h, None);
            weights[2] = lo;
            weights[3] = hi;
            let total: f64 = weights.iter().sum();
            let mut constant = 0.0;
            let mut neighbors = [k as u32; 4];
            for d in 0..4 {
                weights[d] /= total;
                match wall[d] {
                    Some(v) => {
                        constant += weights[d] * v;
                        weights[d] = 0.0;
                    }
                    None => neighbors[d] = nb[d] as u32,
                }
            }
            let s = Stencil { node: k as u32, neighbors, weights, constant };
            if (i + j) % 2 == 0 {
                red.push(s);
            } else {
                black.push(s);
            }
        }
    }
    System { grid, fixed, initial, red, black, scale }
}

#[inline]
fn stencil_value(phi: &[f64], s: &Stencil) -> f64 {
    let mut v = s.constant;
    for d in 0..4 {
        v += s.weights[d] * phi[s.neighbors[d] as usize];
    }
    v
}

fn sweep(phi: &mut [f64], nodes: &[Stencil], omega: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for s in nodes {
        let k = s.node as usize;
        let target = stencil_value(phi, s);
        let delta = target - phi[k];
        worst = worst.max(delta.abs());
        phi[k] += omega * delta;
    }
    worst
}

fn max_residual(phi: &[f64], sys: &System) -> f64 {
    sys.red.iter().chain(&sys.black).map(|s| (stencil_value(phi, s) - phi[s.node as usize]).abs()).fold(0.0, f64::max)
}

/// Largest change a Jacobi update would make at any free node, V.
pub fn residual(map: &FieldMap, electrodes: &[Electrode]) -> f64 {
    let sys = assemble(electrodes, map.grid);
    max_residual(&map.potential, &sys)
}

/// Solves Laplace's equation with the given electrodes and a grounded outer
/// boundary. Convergence is declared when no node would move by more than
/// `tolerance` times the largest electrode potential.
pub fn solve_laplace(electrodes: &[Electrode], settings: &GridSpec) -> Result<FieldMap> {
    if !(settings.spacing > 0.0 && settings.far_boundary > 2.0 * settings.spacing && settings.tolerance > 0.0) {
        return Err(Error::Config(format!("invalid grid settings: {settings:?}")));
    }
    let grid = Grid::covering(settings.spacing, settings.far_boundary);
    let sys = assemble(electrodes, grid);
    let mut phi = sys.initial.clone();
    let threshold = settings.tolerance * sys.scale.max(f64::MIN_POSITIVE);

    // Optimal SOR factor for the Dirichlet rectangle of the same size.
    let pi = std::f64::consts::PI;
    let rho = 0.5 * ((pi / grid.nr as f64).cos() + (pi / grid.nz() as f64).cos());
    let omega = 2.0 / (1.0 + (1.0 - rho * rho).sqrt());

    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let a = sweep(&mut phi, &sys.red, omega);
        let b = sweep(&mut phi, &sys.black, omega);
        let update = a.max(b);
        if iterations % 100 == 0 {
            history.push(update);
        }
        if update <= threshold {
            let res = max_residual(&phi, &sys);
            if res <= threshold {
                let field = field_magnitude(&phi, &sys, electrodes);
                return Ok(FieldMap { grid, potential: phi, field, fixed: sys.fixed, residual: res, iterations });
            }
        }
        if !update.is_finite() || iterations >= settings.max_iterations {
            history.push(update);
            return Err(Error::SolverDiverged { iterations, residuals: history });
        }
    }
}

/// Field of the trap with the center electrodes at `rf_voltage`.
pub fn solve_potential(g: &TrapGeometry, settings: &GridSpec, rf_voltage: f64) -> Result<FieldMap> {
    g.validate()?;
    let resolved = match g.style {
        super::geometry::ElectrodeStyle::Tubular => g.center_bore_radius,
        super::geometry::ElectrodeStyle::Solid => g.center_outer_radius,
    };
    if resolved / settings.spacing < 8.0 - 1e-9 {
        return Err(Error::Config(format!(
            "grid spacing {:.3} µm resolves the electrode bore with fewer than 8 cells",
            settings.spacing * 1e6
        )));
    }
    if settings.far_boundary < 5.0 * g.tip_separation {
        return Err(Error::Config("far boundary must lie at least five tip separations from the center".into()));
    }
    solve_laplace(&g.electrodes(rf_voltage, settings.far_boundary), settings)
}

/// |E| at every free node from three-point differences that respect the
/// fractional distances to electrode surfaces.
fn field_magnitude(phi: &[f64], sys: &System, electrodes: &[Electrode]) -> Vec<f64> {
    let grid = sys.grid;
    let h = grid.spacing;
    let mut field = vec![0.0; grid.len()];
    let derivative = |lo: (f64, f64), hi: (f64, f64), centre: f64| {
        // Values and distances below and above the node.
        let ((vl, a), (vh, b)) = (lo, hi);
        (a * a * vh - b * b * vl - (a * a - b * b) * centre) / (a * b * (a + b))
    };
    for j in 0..grid.nz() {
        for i in 0..grid.nr {
            let k = grid.index(i, j);
            if sys.fixed[k] {
                continue;
            }
            let (r, z) = (grid.r(i), grid.z(j));
            let side = |dir: usize, neighbor: usize| match surface_hit(electrodes, r, z, dir, h) {
                Some((theta, v)) => (v, theta * h),
                None => (phi[neighbor], h),
            };
            let ez = derivative(side(2, grid.index(i, j - 1)), side(3, grid.index(i, j + 1)), phi[k]);
            let er = if i == 0 { 0.0 } else { derivative(side(0, grid.index(i - 1, j)), side(1, grid.index(i + 1, j)), phi[k]) };
            field[k] = er.hypot(ez);
        }
    }
    field
}

impl FieldMap {
    pub fn potential_at(&self, i: usize, j: usize) -> f64 {
        self.potential[self.grid.index(i, j)]
    }

    /// Writes `r_um, z_um, phi_V, E_V_per_m, U_ps_eV` rows. Nodes inside
    /// electrodes carry NaN for the field and pseudopotential.
    pub fn write_csv<W: Write>(&self, w: &mut W, pseudo: Option<&super::analysis::PseudopotentialMap>) -> Result<()> {
        writeln!(w, "r_um,z_um,phi_V,E_V_per_m,U_ps_eV")?;
        let g = self.grid;
        for j in 0..g.nz() {
            for i in 0..g.nr {
                let k = g.index(i, j);
                let (e, u) = if self.fixed[k] {
                    (f64::NAN, f64::NAN)
                } else {
                    (self.field[k], pseudo.map_or(f64::NAN, |p| p.energy[k]))
                };
                writeln!(w, "{:.4},{:.4},{:.9e},{:.9e},{:.9e}", g.r(i) * 1e6, g.z(j) * 1e6, self.potential[k], e, u)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::coaxial_potential;
    use crate::trap::geometry::TrapConfig;

    fn grid(spacing: f64, far: f64) -> GridSpec {
        GridSpec { spacing, far_boundary: far, tolerance: 1e-8, max_iterations: 200_000 }
    }

    #[test]
    fn parallel_plates_give_linear_potential() {
        let (h, d, far) = (1e-5, 2.05e-4, 2.5e-3);
        let plates = [
            Electrode { r_min: 0.0, r_max: far, z_min: d, z_max: far, potential: 1.0 },
            Electrode { r_min: 0.0, r_max: far, z_min: -far, z_max: -d, potential: -1.0 },
        ];
        let map = solve_laplace(&plates, &grid(h, far)).unwrap();
        let g = map.grid;
        for j in 0..g.nz() {
            let z = g.z(j);
            if z.abs() < d {
                let phi = map.potential_at(0, j);
                assert!((phi - z / d).abs() < 5e-3, "z={z} phi={phi}");
            }
        }
    }

    #[test]
    fn coaxial_cylinders_give_log_profile() {
        let h = 1e-5;
        let (a, b, far) = (3.3 * h, 20.7 * h, 3e-3);
        let electrodes = [
            Electrode { r_min: 0.0, r_max: a, z_min: -far, z_max: far, potential: 1.0 },
            Electrode { r_min: b, r_max: b + 3.0 * h, z_min: -far, z_max: far, potential: 0.0 },
        ];
        let map = solve_laplace(&electrodes, &grid(h, far)).unwrap();
        let g = map.grid;
        let j = g.center_row();
        for i in 0..g.nr {
            let r = g.r(i);
            if r > a && r < b {
                let want = coaxial_potential(a, b, 1.0, 0.0, r);
                assert!((map.potential_at(i, j) - want).abs() < 1e-2, "r={r}");
            }
        }
    }

    #[test]
    fn trap_solution_properties() {
        let cfg = TrapConfig::default_file();
        let amp = cfg.rf.amplitude;
        let electrodes = cfg.geometry.electrodes(amp, cfg.grid.far_boundary);
        let map = solve_potential(&cfg.geometry, &cfg.grid, amp).unwrap();
        assert!(map.residual <= 1e-8 * amp);
        assert!(residual(&map, &electrodes) <= 1e-8 * amp);
        let g = map.grid;
        for j in 0..g.nz() {
            for i in 0..g.nr {
                let k = g.index(i, j);
                if let Some(e) = electrodes.iter().find(|e| e.contains(g.r(i), g.z(j))) {
                    assert_eq!(map.potential[k], e.potential);
                }
                // Mirror symmetry in z.
                let m = g.index(i, g.nz() - 1 - j);
                assert!((map.potential[k] - map.potential[m]).abs() < 1e-6 * amp);
            }
        }
        // Saddle: the center is below the electrode potential.
        let center = map.potential_at(0, g.center_row());
        assert!(center > 0.0 && center < amp);
    }

    #[test]
    fn coarse_grid_rejected() {
        let cfg = TrapConfig::default_file();
        let coarse = GridSpec { spacing: 20e-6, ..cfg.grid };
        assert!(matches!(solve_potential(&cfg.geometry, &coarse, 200.0), Err(Error::Config(_))));
    }

    #[test]
    fn iteration_cap_reports_history() {
        let cfg = TrapConfig::default_file();
        let capped = GridSpec { max_iterations: 250, ..cfg.grid };
        match solve_potential(&cfg.geometry, &capped, 200.0) {
            Err(Error::SolverDiverged { iterations, residuals }) => {
                assert_eq!(iterations, 250);
                assert!(residuals.len() >= 2);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
