//! Marching on in time for the causal block lower-triangular systems.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use rayon::prelude::*;

use crate::assembly::{BlockSeries, CoupledSeries};
use crate::error::{Error, Result};
use crate::mesh::{Point, SurfaceMesh};
use crate::quadrature::TriangleRule;
use crate::timebasis::{beta, mass_matrix, BasisSet, TimeGrid};

/// Nodal values `g^n` of the data at the listed vertices for `n = 0..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct RhsTrace {
    pub vertices: Vec<usize>,
    pub values: Vec<DVector<f64>>,
}

impl RhsTrace {
    pub fn zeros(vertices: Vec<usize>, n_steps: usize) -> Self {
        let n = vertices.len();
        RhsTrace { vertices, values: vec![DVector::zeros(n); n_steps + 1] }
    }

    pub fn n_steps(&self) -> usize {
        self.values.len().saturating_sub(1)
    }

    pub fn scaled(&self, s: f64) -> Self {
        RhsTrace { vertices: self.vertices.clone(), values: self.values.iter().map(|v| v * s).collect() }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|&x| x == 0.0))
    }
}

/// Evaluates `forcing(t_n, x_i)` at the listed vertices.
pub fn project_rhs<F>(forcing: F, mesh: &SurfaceMesh, grid: &TimeGrid, vertices: &[usize]) -> Result<RhsTrace>
where
    F: Fn(f64, &Point) -> f64,
{
    let mut values = Vec::with_capacity(grid.n_steps() + 1);
    for n in 0..=grid.n_steps() {
        let t = grid.time(n);
        let mut v = DVector::zeros(vertices.len());
        for (k, &i) in vertices.iter().enumerate() {
            let x = &mesh.vertices()[i];
            let value = forcing(t, x);
            if !value.is_finite() {
                return Err(Error::NonFiniteForcing { t, x: x[0], y: x[1], z: x[2] });
            }
            v[k] = value;
        }
        values.push(v);
    }
    Ok(RhsTrace { vertices: vertices.to_vec(), values })
}

/// Coefficients of the `L²` projection of `forcing(t_n, ·)` onto the hats of
/// the listed vertices, so that applying the mass matrix reproduces the
/// load `∫ forcing ξ^i`. Suited to data that nodal sampling misses.
pub fn project_rhs_l2<F>(forcing: F, mesh: &SurfaceMesh, grid: &TimeGrid, vertices: &[usize]) -> Result<RhsTrace>
where
    F: Fn(f64, &Point) -> f64 + Sync,
{
    let mut local = vec![None; mesh.n_vertices()];
    for (k, &i) in vertices.iter().enumerate() {
        local[i] = Some(k);
    }
    let tris: Vec<usize> =
        (0..mesh.n_triangles()).filter(|&t| mesh.triangles()[t].iter().any(|&i| local[i].is_some())).collect();
    let rule = TriangleRule::dunavant(7).subdivided(3);
    let basis = BasisSet::linear(vertices.to_vec());
    let chol = mass_matrix(mesh, &basis, &basis)
        .cholesky()
        .ok_or_else(|| Error::InvalidMesh("vertex mass matrix is not positive definite".into()))?;
    let mut values = Vec::with_capacity(grid.n_steps() + 1);
    for n in 0..=grid.n_steps() {
        let t = grid.time(n);
        let parts: Vec<Result<[(Option<usize>, f64); 3]>> = tris
            .par_iter()
            .map(|&tri| {
                let idx = mesh.triangles()[tri];
                let c = mesh.corners(tri);
                let area = mesh.areas()[tri];
                let mut acc = [0.0; 3];
                for (p, w) in rule.points.iter().zip(&rule.weights) {
                    let x = c[0] * p[0] + c[1] * p[1] + c[2] * p[2];
                    let value = forcing(t, &x);
                    if !value.is_finite() {
                        return Err(Error::NonFiniteForcing { t, x: x[0], y: x[1], z: x[2] });
                    }
                    for k in 0..3 {
                        acc[k] += w * area * value * p[k];
                    }
                }
                Ok([0, 1, 2].map(|k| (local[idx[k]], acc[k])))
            })
            .collect();
        let mut load = DVector::zeros(vertices.len());
        for part in parts {
            for (slot, v) in part? {
                if let Some(k) = slot {
                    load[k] += v;
                }
            }
        }
        values.push(chol.solve(&load));
    }
    Ok(RhsTrace { vertices: vertices.to_vec(), values })
}

/// LU factorization of the lag-0 block plus the history convolution.
pub struct Marcher<'a> {
    series: &'a BlockSeries,
    lu: LU<f64, Dyn, Dyn>,
}

impl<'a> Marcher<'a> {
    pub fn new(series: &'a BlockSeries) -> Result<Self> {
        let m0 = series.block(0).ok_or_else(|| Error::InvalidArgument("empty block series".into()))?;
        if m0.nrows() != m0.ncols() {
            return Err(Error::Dimension(format!("lag-0 block is {}×{}", m0.nrows(), m0.ncols())));
        }
        if m0.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem);
        }
        let lu = m0.clone().lu();
        let u = lu.u();
        let diag: Vec<f64> = (0..u.nrows()).map(|i| u[(i, i)].abs()).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min > 1e-14 * max) {
            return Err(Error::SingularSystem);
        }
        Ok(Marcher { series, lu })
    }

    pub fn dim(&self) -> usize {
        self.series.nrows()
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.lu.solve(rhs).expect("factorization checked nonsingular")
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.lu.solve(rhs).expect("factorization checked nonsingular")
    }

    /// `Σ_{m=1}^{n−1} M^{n−m} x^m`, with `xs[m]` the solution at step `m`.
    pub fn history(&self, xs: &[DVector<f64>], n: usize) -> DVector<f64> {
        let lmax = self.series.lag_bound().min(n.saturating_sub(1));
        let parts: Vec<DVector<f64>> = (1..=lmax).into_par_iter().map(|l| &self.series.blocks[l] * &xs[n - l]).collect();
        let mut acc = DVector::zeros(self.dim());
        for p in parts {
            acc += p;
        }
        acc
    }

    /// Matrix-valued history for marching several right-hand sides at once.
    pub fn history_matrix(&self, xs: &[DMatrix<f64>], n: usize) -> DMatrix<f64> {
        let cols = xs.first().map_or(0, |x| x.ncols());
        let lmax = self.series.lag_bound().min(n.saturating_sub(1));
        let parts: Vec<DMatrix<f64>> = (1..=lmax).into_par_iter().map(|l| &self.series.blocks[l] * &xs[n - l]).collect();
        let mut acc = DMatrix::zeros(self.dim(), cols);
        for p in parts {
            acc += p;
        }
        acc
    }

    /// Solves step by step with `rhs(n)` for `n = 1..=n_steps`; `xs[0] = 0`.
    pub fn march(&self, n_steps: usize, mut rhs: impl FnMut(usize) -> DVector<f64>) -> Result<Vec<DVector<f64>>> {
        let mut xs = vec![DVector::zeros(self.dim())];
        for n in 1..=n_steps {
            let b = rhs(n) - self.history(&xs, n);
            let x = self.solve(&b);
            check_finite(&x, n)?;
            xs.push(x);
        }
        Ok(xs)
    }
}

pub(crate) fn check_finite(x: &DVector<f64>, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite() && v.abs() < 1e150) {
        Ok(())
    } else {
        Err(Error::Instability { step })
    }
}

/// Solution history of the Dirichlet-to-Neumann equality.
#[derive(Clone, Debug)]
pub struct MotState {
    pub grid: TimeGrid,
    pub trace_vertices: Vec<usize>,
    pub n_vertices: usize,
    /// `c^n` at the trace vertices, `n = 0..=N` (`c^0 = 0`).
    pub trace: Vec<DVector<f64>>,
    /// `d^n` at all vertices.
    pub density: Vec<DVector<f64>>,
}

impl MotState {
    pub(crate) fn from_stacked(coupled: &CoupledSeries, xs: &[DVector<f64>]) -> Self {
        let nc = coupled.n_trace;
        let nd = coupled.n_density();
        MotState {
            grid: coupled.grid,
            trace_vertices: coupled.trace_vertices.clone(),
            n_vertices: coupled.n_vertices,
            trace: xs.iter().map(|x| x.rows(0, nc).into_owned()).collect(),
            density: xs.iter().map(|x| x.rows(nc, nd).into_owned()).collect(),
        }
    }

    /// Trace coefficients expanded to all mesh vertices (zero where pinned).
    pub fn nodal_trace(&self, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_vertices);
        for (k, &i) in self.trace_vertices.iter().enumerate() {
            out[i] = self.trace[n][k];
        }
        out
    }

    pub fn n_steps(&self) -> usize {
        self.trace.len() - 1
    }
}

/// The coupled rows discretize `W − (1−K')V⁻¹(1−K) = 2𝒮`; trace-row loads are
/// doubled so that the march solves `𝒮u = g`.
pub const TRACE_LOAD_SCALE: f64 = 2.0;

/// Right-hand side `2 · (Δt/2) I (g^{n−1} + g^n)` of the trace rows.
pub(crate) fn trace_load(mass: &DMatrix<f64>, rhs: &RhsTrace, n: usize, dt: f64) -> DVector<f64> {
    mass * (&rhs.values[n - 1] + &rhs.values[n]) * (0.5 * dt * TRACE_LOAD_SCALE)
}

/// Marches the coupled Dirichlet-to-Neumann system `𝒮u = g`.
pub fn mot_solve_equality(coupled: &CoupledSeries, rhs: &RhsTrace) -> Result<MotState> {
    check_rhs(coupled, rhs)?;
    let marcher = Marcher::new(&coupled.series)?;
    let mass = &coupled.trace_mass;
    let nc = coupled.n_trace;
    let dt = coupled.grid.dt();
    let xs = marcher.march(rhs.n_steps(), |n| {
        let mut b = DVector::zeros(coupled.dim());
        b.rows_mut(0, nc).copy_from(&trace_load(mass, rhs, n, dt));
        b
    })?;
    Ok(MotState::from_stacked(coupled, &xs))
}

pub(crate) fn check_rhs(coupled: &CoupledSeries, rhs: &RhsTrace) -> Result<()> {
    if rhs.vertices != coupled.trace_vertices {
        return Err(Error::Dimension("right-hand side vertices differ from the trace vertices".into()));
    }
    if rhs.n_steps() == 0 {
        return Err(Error::InvalidArgument("right-hand side has no time steps".into()));
    }
    Ok(())
}

/// Where to evaluate a trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TracePoint {
    Vertex(usize),
    Barycentric { triangle: usize, bary: [f64; 3] },
}

/// Space-time interpolant `Σ c^m_i β^m(t) ξ^i(x)` of the trace history.
pub fn evaluate_trace(state: &MotState, mesh: &SurfaceMesh, t: f64, at: TracePoint) -> Result<f64> {
    let grid = &state.grid;
    let horizon = grid.time(state.n_steps());
    if !(0.0..=horizon * (1.0 + 1e-12)).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, {horizon}]")));
    }
    let nodal_value = |n: usize| -> Result<f64> {
        let nodal = state.nodal_trace(n);
        match at {
            TracePoint::Vertex(i) => nodal
                .get(i)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("vertex {i} out of range"))),
            TracePoint::Barycentric { triangle, bary } => {
                let tri = mesh
                    .triangles()
                    .get(triangle)
                    .ok_or_else(|| Error::InvalidArgument(format!("triangle {triangle} out of range")))?;
                Ok((0..3).map(|k| bary[k] * nodal[tri[k]]).sum())
            }
        }
    };
    let lo = ((t / grid.dt()).floor() as usize).min(state.n_steps());
    let mut value = 0.0;
    for n in lo..=(lo + 1).min(state.n_steps()) {
        let b = beta(grid, n, t);
        if b != 0.0 {
            value += b * nodal_value(n)?;
        }
    }
    Ok(value)
}

/// CSV with columns `step,time,dof_index,c,d` (one row per vertex and step).
pub fn write_history_csv(state: &MotState, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "time", "dof_index", "c", "d"]).map_err(csv_err)?;
    for n in 0..=state.n_steps() {
        let c = state.nodal_trace(n);
        for i in 0..state.n_vertices {
            w.write_record(&[
                n.to_string(),
                format!("{}", state.grid.time(n)),
                i.to_string(),
                format!("{:e}", c[i]),
                format!("{:e}", state.density[n][i]),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Lag-0 dense matrix of a coupled series, convenient for direct checks.
pub fn lag0(coupled: &CoupledSeries) -> DMatrix<f64> {
    coupled.series.blocks[0].clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble_coupled, QuadratureConfig};
    use crate::mesh::{gen_icosphere, gen_screen, Point};
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn screen(steps: usize) -> (SurfaceMesh, CoupledSeries) {
        let mesh = gen_screen(1.0, 4, 1.0).unwrap();
        let grid = TimeGrid::new(0.4, steps).unwrap();
        let c = assemble_coupled(&mesh, &grid, &QuadratureConfig::default()).unwrap();
        (mesh, c)
    }

    fn shared() -> &'static (SurfaceMesh, CoupledSeries) {
        static S: OnceLock<(SurfaceMesh, CoupledSeries)> = OnceLock::new();
        S.get_or_init(|| screen(6))
    }

    fn forcing_a(t: f64, x: &Point) -> f64 {
        t * t * (1.0 - x.x * x.x) * (1.0 - x.y * x.y)
    }

    fn forcing_b(t: f64, x: &Point) -> f64 {
        (2.0 * t).sin() * (x.x + 0.5 * x.y)
    }

    #[test]
    fn zero_rhs_gives_zero_history() {
        let (_, c) = shared();
        let rhs = RhsTrace::zeros(c.trace_vertices.clone(), 6);
        let st = mot_solve_equality(c, &rhs).unwrap();
        assert!(st.trace.iter().chain(&st.density).all(|v| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn single_step_is_one_lag0_solve() {
        let (mesh, c) = shared();
        let rhs = project_rhs(forcing_a, mesh, &c.grid, &c.trace_vertices).unwrap();
        let one = RhsTrace { vertices: rhs.vertices.clone(), values: rhs.values[..2].to_vec() };
        let st = mot_solve_equality(c, &one).unwrap();
        let mut b = DVector::zeros(c.dim());
        b.rows_mut(0, c.n_trace).copy_from(&trace_load(&c.trace_mass, &one, 1, c.grid.dt()));
        let x = lag0(c).lu().solve(&b).unwrap();
        let nc = c.n_trace;
        assert!((&st.trace[1] - x.rows(0, nc)).amax() <= 1e-12 * x.amax());
        assert!((&st.density[1] - x.rows(nc, c.n_density())).amax() <= 1e-12 * x.amax());
    }

    #[test]
    fn extending_the_horizon_keeps_earlier_steps() {
        let (mesh, c) = shared();
        let rhs = project_rhs(forcing_a, mesh, &c.grid, &c.trace_vertices).unwrap();
        let long = mot_solve_equality(c, &rhs).unwrap();
        let short = RhsTrace { vertices: rhs.vertices.clone(), values: rhs.values[..4].to_vec() };
        let short = mot_solve_equality(c, &short).unwrap();
        for n in 0..=3 {
            assert_eq!(short.trace[n], long.trace[n]);
            assert_eq!(short.density[n], long.density[n]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn march_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let (mesh, c) = shared();
            let ra = project_rhs(forcing_a, mesh, &c.grid, &c.trace_vertices).unwrap();
            let rb = project_rhs(forcing_b, mesh, &c.grid, &c.trace_vertices).unwrap();
            let combo = RhsTrace {
                vertices: ra.vertices.clone(),
                values: ra.values.iter().zip(&rb.values).map(|(x, y)| x * a + y * b).collect(),
            };
            let (sa, sb, sc) = (
                mot_solve_equality(c, &ra).unwrap(),
                mot_solve_equality(c, &rb).unwrap(),
                mot_solve_equality(c, &combo).unwrap(),
            );
            for n in 0..=6 {
                let expect = &sa.trace[n] * a + &sb.trace[n] * b;
                let scale = sa.trace[n].amax() * a.abs() + sb.trace[n].amax() * b.abs();
                prop_assert!((&sc.trace[n] - expect).amax() <= 1e-12 * scale.max(1e-300));
            }
        }
    }

    #[test]
    fn rhs_must_match_trace_vertices() {
        let (_, c) = shared();
        let rhs = RhsTrace::zeros(vec![0, 1], 6);
        assert!(mot_solve_equality(c, &rhs).is_err());
    }

    #[test]
    fn l2_projection_reproduces_linear_data() {
        let mesh = gen_icosphere(1).unwrap();
        let grid = TimeGrid::new(0.5, 2).unwrap();
        let all: Vec<usize> = (0..mesh.n_vertices()).collect();
        let f = |t: f64, x: &Point| t * (1.0 + x.x - 2.0 * x.y + 0.5 * x.z);
        let l2 = project_rhs_l2(f, &mesh, &grid, &all).unwrap();
        let nodal = project_rhs(f, &mesh, &grid, &all).unwrap();
        for n in 0..=2 {
            assert!((&l2.values[n] - &nodal.values[n]).amax() < 1e-12);
        }
    }

    #[test]
    fn trace_evaluation_interpolates_in_time() {
        let (mesh, c) = shared();
        let rhs = project_rhs(forcing_a, mesh, &c.grid, &c.trace_vertices).unwrap();
        let st = mot_solve_equality(c, &rhs).unwrap();
        let v = c.trace_vertices[3];
        let (c2, c3) = (st.nodal_trace(2)[v], st.nodal_trace(3)[v]);
        let at = TracePoint::Vertex(v);
        assert!((evaluate_trace(&st, mesh, c.grid.time(2), at).unwrap() - c2).abs() < 1e-14);
        assert!((evaluate_trace(&st, mesh, 2.5 * c.grid.dt(), at).unwrap() - 0.5 * (c2 + c3)).abs() < 1e-14);
        assert!(evaluate_trace(&st, mesh, 100.0, at).is_err());
        let tri = mesh.triangles()[0];
        let bary = TracePoint::Barycentric { triangle: 0, bary: [1.0, 0.0, 0.0] };
        let direct = evaluate_trace(&st, mesh, 1.0, TracePoint::Vertex(tri[0])).unwrap();
        assert!((evaluate_trace(&st, mesh, 1.0, bary).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn history_csv_layout() {
        let (mesh, c) = shared();
        let rhs = project_rhs(forcing_b, mesh, &c.grid, &c.trace_vertices).unwrap();
        let st = mot_solve_equality(c, &rhs).unwrap();
        let mut buf = Vec::new();
        write_history_csv(&st, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,time,dof_index,c,d\n"));
        assert_eq!(text.lines().count(), 1 + 7 * mesh.n_vertices());
    }

    #[test]
    fn non_finite_forcing_is_reported() {
        let (mesh, c) = shared();
        let err = project_rhs(|t, _| if t > 1.0 { f64::NAN } else { 0.0 }, mesh, &c.grid, &c.trace_vertices);
        assert!(matches!(err, Err(Error::NonFiniteForcing { .. })));
    }
}
