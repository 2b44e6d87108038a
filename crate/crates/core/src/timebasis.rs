//! Uniform time grid, the temporal bases (piecewise constant `γ^n`, piecewise
//! linear `β^n`) and the spatial mass matrices coupling the bases.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::SurfaceMesh;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        Ok(TimeGrid { dt, n_steps })
    }

    /// Step `dt ≈ cfl·h`, adjusted so that the horizon is an integer number of steps.
    pub fn from_cfl(horizon: f64, cfl: f64, h: f64) -> Result<Self> {
        if !(horizon > 0.0 && cfl > 0.0 && h > 0.0) {
            return Err(Error::InvalidArgument("horizon, CFL ratio and h must be positive".into()));
        }
        let n = (horizon / (cfl * h)).round().max(1.0) as usize;
        TimeGrid::new(horizon / n as f64, n)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    /// Same step, different number of steps.
    pub fn with_steps(&self, n_steps: usize) -> Result<Self> {
        TimeGrid::new(self.dt, n_steps)
    }
}

pub fn build_time_grid(horizon: f64, dt: f64) -> Result<TimeGrid> {
    if !(horizon > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidArgument("horizon and time step must be positive".into()));
    }
    let n = (horizon / dt).round();
    if n < 1.0 {
        return Err(Error::InvalidArgument(format!("horizon {horizon} holds no step of size {dt}")));
    }
    TimeGrid::new(dt, n as usize)
}

/// Reference hat `(1 − |x|)₊`.
#[inline]
pub fn hat(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

/// Derivative of the hat: `+1` on `(−1, 0)`, `−1` on `(0, 1)`, zero elsewhere.
#[inline]
pub fn hat_slope(x: f64) -> f64 {
    if x > -1.0 && x < 0.0 {
        1.0
    } else if x > 0.0 && x < 1.0 {
        -1.0
    } else {
        0.0
    }
}

/// Antiderivative of the hat vanishing at `−∞`.
#[inline]
pub fn hat_integral(x: f64) -> f64 {
    if x <= -1.0 {
        0.0
    } else if x <= 0.0 {
        0.5 * (x + 1.0) * (x + 1.0)
    } else if x < 1.0 {
        1.0 - 0.5 * (1.0 - x) * (1.0 - x)
    } else {
        1.0
    }
}

/// Piecewise linear nodal function `β^n` (the `n = 0` hat is truncated at 0).
pub fn beta(grid: &TimeGrid, n: usize, t: f64) -> f64 {
    if t < 0.0 || t > grid.horizon() {
        return 0.0;
    }
    let mut x = t / grid.dt() - n as f64;
    // Snap round-off at the time nodes so the nodal property holds exactly.
    if (x - x.round()).abs() < 1e-12 {
        x = x.round();
    }
    hat(x)
}

/// Indicator `γ^n` of `[t_{n−1}, t_n)`, `n ≥ 1`.
pub fn gamma(grid: &TimeGrid, n: usize, t: f64) -> f64 {
    if n >= 1 && t >= grid.time(n - 1) && t < grid.time(n) {
        1.0
    } else {
        0.0
    }
}

/// `∫ β^m γ^n dt = (Δt/2)[δ_{n,m} + δ_{n−1,m}]`.
pub fn temporal_pairing(grid: &TimeGrid, m: usize, n: usize) -> f64 {
    if n >= 1 && (m == n || m + 1 == n) {
        0.5 * grid.dt()
    } else {
        0.0
    }
}

/// Lag coefficients of the temporal mass couplings in the coupled block.
pub struct TemporalCoupling;

impl TemporalCoupling {
    /// `I^j`: 1 for `j ∈ {0, 1}`.
    pub fn identity(j: usize) -> f64 {
        if j <= 1 {
            1.0
        } else {
            0.0
        }
    }

    /// `Î^j`: −1 for `j = 0`, +1 for `j = 1`.
    pub fn difference(j: usize) -> f64 {
        match j {
            0 => -1.0,
            1 => 1.0,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialBasis {
    /// Continuous piecewise linear hats `ξ`, one per vertex.
    Linear,
    /// Piecewise constants `ψ`, one per triangle.
    Constant,
}

impl SpatialBasis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SpatialBasis::Linear),
            "constant" => Ok(SpatialBasis::Constant),
            _ => Err(Error::InvalidArgument(format!("unknown spatial basis '{s}'"))),
        }
    }
}

/// A selection of basis functions: vertices for `Linear`, triangles for `Constant`.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet {
    pub basis: SpatialBasis,
    pub entities: Vec<usize>,
}

impl BasisSet {
    pub fn linear(vertices: Vec<usize>) -> Self {
        BasisSet { basis: SpatialBasis::Linear, entities: vertices }
    }

    pub fn constant(triangles: Vec<usize>) -> Self {
        BasisSet { basis: SpatialBasis::Constant, entities: triangles }
    }

    pub fn all(mesh: &SurfaceMesh, basis: SpatialBasis) -> Self {
        let n = match basis {
            SpatialBasis::Linear => mesh.n_vertices(),
            SpatialBasis::Constant => mesh.n_triangles(),
        };
        BasisSet { basis, entities: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Multiplier functions for the contact problem: hats at the free trace
    /// vertices, or constants on the contact triangles.
    pub fn contact_multipliers(mesh: &SurfaceMesh, basis: SpatialBasis) -> Self {
        match basis {
            SpatialBasis::Linear => BasisSet::linear(mesh.trace_vertices()),
            SpatialBasis::Constant => BasisSet::constant(mesh.contact_triangles()),
        }
    }

    fn local_index(&self, mesh: &SurfaceMesh) -> Vec<Option<usize>> {
        let n = match self.basis {
            SpatialBasis::Linear => mesh.n_vertices(),
            SpatialBasis::Constant => mesh.n_triangles(),
        };
        let mut map = vec![None; n];
        for (k, &e) in self.entities.iter().enumerate() {
            map[e] = Some(k);
        }
        map
    }
}

/// `∫_Γ test_i · trial_j` with exact per-triangle formulas. Rows follow
/// `test.entities`, columns `trial.entities`.
pub fn mass_matrix(mesh: &SurfaceMesh, test: &BasisSet, trial: &BasisSet) -> DMatrix<f64> {
    use SpatialBasis::*;
    let rows = test.local_index(mesh);
    let cols = trial.local_index(mesh);
    let mut m = DMatrix::zeros(test.len(), trial.len());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let area = mesh.areas()[t];
        let row_ids: Vec<Option<usize>> = match test.basis {
            Linear => tri.iter().map(|&v| rows[v]).collect(),
            Constant => vec![rows[t]],
        };
        let col_ids: Vec<Option<usize>> = match trial.basis {
            Linear => tri.iter().map(|&v| cols[v]).collect(),
            Constant => vec![cols[t]],
        };
        for (a, ra) in row_ids.iter().enumerate() {
            let Some(r) = ra else { continue };
            for (b, cb) in col_ids.iter().enumerate() {
                let Some(c) = cb else { continue };
                let value = match (test.basis, trial.basis) {
                    (Linear, Linear) if a == b => area / 6.0,
                    (Linear, Linear) => area / 12.0,
                    (Linear, Constant) | (Constant, Linear) => area / 3.0,
                    (Constant, Constant) => area,
                };
                m[(*r, *c)] += value;
            }
        }
    }
    m
}

/// Full mass matrix between two bases over the whole mesh.
pub fn spatial_mass(mesh: &SurfaceMesh, test: SpatialBasis, trial: SpatialBasis) -> DMatrix<f64> {
    mass_matrix(mesh, &BasisSet::all(mesh, test), &BasisSet::all(mesh, trial))
}

/// Spatial couplings between a constrained linear field and its multiplier.
#[derive(Clone, Debug)]
pub struct MassMatrices {
    /// `∫ ξ^i φ^j`: constrained field rows, multiplier columns.
    pub i_mixed: DMatrix<f64>,
    /// `∫ φ^i φ^j`.
    pub i_tilde: DMatrix<f64>,
    /// `(Δt/2)·i_mixed`.
    pub i_hat: DMatrix<f64>,
    /// `∫ ξ^i ξ^j` between the field rows and all mesh vertices.
    pub i_lin: DMatrix<f64>,
}

impl MassMatrices {
    pub fn new(mesh: &SurfaceMesh, grid: &TimeGrid, field: &BasisSet, multiplier: &BasisSet) -> Self {
        let i_mixed = mass_matrix(mesh, field, multiplier);
        let i_tilde = mass_matrix(mesh, multiplier, multiplier);
        let i_hat = &i_mixed * (0.5 * grid.dt());
        let i_lin = mass_matrix(mesh, field, &BasisSet::all(mesh, SpatialBasis::Linear));
        MassMatrices { i_mixed, i_tilde, i_hat, i_lin }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{gen_cube, gen_icosphere, gen_screen, CubeFace, Point};
    use crate::quadrature::TriangleRule;
    use proptest::prelude::*;

    fn unit_triangle() -> SurfaceMesh {
        SurfaceMesh::new(vec![Point::zeros(), Point::x(), Point::y()], vec![[0, 1, 2]], vec![true]).unwrap()
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(build_time_grid(5.0, 0.1).unwrap().n_steps(), 50);
        assert_eq!(build_time_grid(6.0, 0.075).unwrap().n_steps(), 80);
        assert_eq!(build_time_grid(6.0, 0.1).unwrap().n_steps(), 60);
        assert!(build_time_grid(0.01, 0.1).is_err());
        let g = TimeGrid::from_cfl(5.0, 0.6, 0.3).unwrap();
        assert_eq!(g.horizon(), 5.0);
        assert!((g.dt() / 0.3 - 0.6).abs() < 0.05);
    }

    #[test]
    fn unit_triangle_masses() {
        let mesh = unit_triangle();
        let c = spatial_mass(&mesh, SpatialBasis::Constant, SpatialBasis::Constant);
        assert_eq!(c.shape(), (1, 1));
        assert_eq!(c[(0, 0)], 0.5);
        let l = spatial_mass(&mesh, SpatialBasis::Linear, SpatialBasis::Linear);
        for i in 0..3 {
            assert!((l[(i, i)] - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_multiplier_row_sums_are_areas() {
        let mesh = gen_cube(2.0, 2, &[CubeFace::Top]).unwrap();
        let set = BasisSet::all(&mesh, SpatialBasis::Constant);
        let m = mass_matrix(&mesh, &set, &set);
        for t in 0..mesh.n_triangles() {
            assert!((m.row(t).sum() - mesh.areas()[t]).abs() < 1e-14);
        }
    }

    #[test]
    fn mass_matches_quadrature_oracle() {
        let mesh = gen_icosphere(1).unwrap();
        let rule = TriangleRule::dunavant(6);
        for (test, trial) in [
            (SpatialBasis::Linear, SpatialBasis::Linear),
            (SpatialBasis::Linear, SpatialBasis::Constant),
            (SpatialBasis::Constant, SpatialBasis::Constant),
        ] {
            let m = spatial_mass(&mesh, test, trial);
            let mut oracle = DMatrix::zeros(m.nrows(), m.ncols());
            for (t, tri) in mesh.triangles().iter().enumerate() {
                for (q, w) in rule.points.iter().zip(&rule.weights) {
                    let vals = |b: SpatialBasis| -> Vec<(usize, f64)> {
                        match b {
                            SpatialBasis::Linear => (0..3).map(|k| (tri[k], q[k])).collect(),
                            SpatialBasis::Constant => vec![(t, 1.0)],
                        }
                    };
                    for (i, a) in vals(test) {
                        for (j, b) in vals(trial) {
                            oracle[(i, j)] += w * mesh.areas()[t] * a * b;
                        }
                    }
                }
            }
            assert!((m - oracle).amax() < 1e-12);
        }
    }

    #[test]
    fn mass_matrices_relations() {
        let mesh = gen_screen(2.0, 8, 1.0).unwrap();
        let grid = TimeGrid::new(0.25, 4).unwrap();
        for basis in [SpatialBasis::Linear, SpatialBasis::Constant] {
            let field = BasisSet::linear(mesh.trace_vertices());
            let mult = BasisSet::contact_multipliers(&mesh, basis);
            let m = MassMatrices::new(&mesh, &grid, &field, &mult);
            assert_eq!(m.i_hat, &m.i_mixed * 0.125);
            for mat in [&m.i_tilde] {
                assert!((mat - mat.transpose()).amax() == 0.0);
                assert!(mat.clone().cholesky().is_some());
            }
            assert_eq!(m.i_lin.shape(), (field.len(), mesh.n_vertices()));
        }
    }

    #[test]
    fn pairing_values() {
        let g = TimeGrid::new(0.2, 10).unwrap();
        assert_eq!(temporal_pairing(&g, 3, 3), 0.1);
        assert_eq!(temporal_pairing(&g, 2, 3), 0.1);
        assert_eq!(temporal_pairing(&g, 5, 3), 0.0);
        assert_eq!((0..10).filter(|&j| TemporalCoupling::identity(j) != 0.0).count(), 2);
        assert_eq!((0..10).filter(|&j| TemporalCoupling::difference(j) != 0.0).count(), 2);
    }

    #[test]
    fn pairing_matches_integral() {
        let g = TimeGrid::new(0.3, 6).unwrap();
        let rule = crate::quadrature::gauss_legendre(4);
        for m in 0..=6 {
            for n in 1..=6 {
                let mut s = 0.0;
                for k in 1..=6 {
                    let (a, b) = (g.time(k - 1), g.time(k));
                    for (x, w) in rule.iter() {
                        let t = a + (b - a) * x;
                        s += w * (b - a) * beta(&g, m, t) * gamma(&g, n, t);
                    }
                }
                assert!((s - temporal_pairing(&g, m, n)).abs() < 1e-14, "m={m} n={n}");
            }
        }
    }

    #[test]
    fn hat_functions() {
        assert_eq!(hat_integral(-1.0), 0.0);
        assert_eq!(hat_integral(0.0), 0.5);
        assert_eq!(hat_integral(1.0), 1.0);
        let h = 1e-6;
        for x in [-0.7, -0.2, 0.3, 0.9] {
            assert!(((hat_integral(x + h) - hat_integral(x - h)) / (2.0 * h) - hat(x)).abs() < 1e-8);
            assert!(((hat(x + h) - hat(x - h)) / (2.0 * h) - hat_slope(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn nodal_and_partition(n_steps in 1usize..20, dt in 0.01f64..1.0, s in 0.0f64..1.0) {
            let g = TimeGrid::new(dt, n_steps).unwrap();
            for n in 0..=n_steps {
                for k in 0..=n_steps {
                    let expected = if n == k { 1.0 } else { 0.0 };
                    prop_assert_eq!(beta(&g, n, g.time(k)), expected);
                }
            }
            let t = s * g.horizon() * (1.0 - 1e-12);
            let sum_beta: f64 = (0..=n_steps).map(|n| beta(&g, n, t)).sum();
            let sum_gamma: f64 = (1..=n_steps).map(|n| gamma(&g, n, t)).sum();
            prop_assert!((sum_beta - 1.0).abs() < 1e-12);
            prop_assert_eq!(sum_gamma, 1.0);
        }

        #[test]
        fn mass_spd(n in 1usize..4) {
            let mesh = gen_cube(1.0, n, &CubeFace::ALL).unwrap();
            let l = spatial_mass(&mesh, SpatialBasis::Linear, SpatialBasis::Linear);
            prop_assert_eq!(&l, &l.transpose());
            prop_assert!(l.clone().cholesky().is_some());
            let c = spatial_mass(&mesh, SpatialBasis::Constant, SpatialBasis::Constant);
            prop_assert!(c.cholesky().is_some());
            prop_assert!((l.sum() - mesh.total_area()).abs() < 1e-12 * mesh.total_area());
        }
    }
}
