//! Benchmark data, built-in forcings, error norms and convergence rates.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::assembly::BlockSeries;
use crate::error::{Error, Result};
use crate::mesh::{CubeFace, Point, SurfaceMesh};
use crate::quadrature::gauss_legendre;
use crate::timebasis::{beta, mass_matrix, BasisSet, SpatialBasis, TimeGrid};

fn sphere_window(t: f64) -> f64 {
    if t > 0.0 && t < 4.0 {
        1.0
    } else {
        0.0
    }
}

/// Dirichlet trace of the radially symmetric sphere benchmark.
pub fn sphere_exact_u(t: f64) -> f64 {
    let a = 0.5 * PI * (4.0 - t);
    (0.75 - a.cos() + 0.25 * (2.0 * a).cos()) * sphere_window(t)
}

/// Radial derivative of the sphere benchmark on the unit sphere.
pub fn sphere_exact_h(t: f64) -> f64 {
    let a = 0.5 * PI * (4.0 - t);
    let b = 2.0 * a;
    (-0.75 + a.cos() + 0.5 * PI * a.sin() - 0.25 * (b.cos() + PI * b.sin())) * sphere_window(t)
}

/// The right-hand sides of the contact and punch examples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinForcing {
    ContactScreen,
    ContactCube,
    PunchScreen,
    PunchCube,
}

/// Faces of the cube examples that carry a forcing bump.
pub const FORCED_CUBE_FACES: [CubeFace; 3] = [CubeFace::Top, CubeFace::Front, CubeFace::Right];

impl BuiltinForcing {
    pub const ALL: [BuiltinForcing; 4] =
        [BuiltinForcing::ContactScreen, BuiltinForcing::ContactCube, BuiltinForcing::PunchScreen, BuiltinForcing::PunchCube];

    pub fn parse(name: &str) -> Result<Self> {
        BuiltinForcing::ALL
            .into_iter()
            .find(|f| f.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown forcing '{name}'")))
    }

    pub fn name(self) -> &'static str {
        match self {
            BuiltinForcing::ContactScreen => "contact_screen",
            BuiltinForcing::ContactCube => "contact_cube",
            BuiltinForcing::PunchScreen => "punch_screen",
            BuiltinForcing::PunchCube => "punch_cube",
        }
    }

    pub fn eval(self, t: f64, x: &Point) -> f64 {
        match self {
            BuiltinForcing::ContactScreen | BuiltinForcing::PunchScreen => (-2.0 * t).exp() * t * bump(x.x, x.y),
            BuiltinForcing::ContactCube | BuiltinForcing::PunchCube => {
                let amp = (-2.0 * t).exp() * t.powi(4);
                if amp == 0.0 {
                    return 0.0;
                }
                let half = x.amax();
                FORCED_CUBE_FACES
                    .iter()
                    .filter(|f| f.normal().dot(x) >= half - 1e-9 * half.max(1.0))
                    .map(|f| {
                        let (a, b) = f.local_coords(x);
                        amp * bump(a, b)
                    })
                    .sum()
            }
        }
    }
}

/// `cos(2πa) cos(2πb)` on `[−1/4, 1/4]²`, zero outside.
fn bump(a: f64, b: f64) -> f64 {
    if a.abs() <= 0.25 && b.abs() <= 0.25 {
        (2.0 * PI * a).cos() * (2.0 * PI * b).cos()
    } else {
        0.0
    }
}

pub fn builtin_forcing(name: &str, t: f64, x: &Point) -> Result<f64> {
    Ok(BuiltinForcing::parse(name)?.eval(t, x))
}

/// Linear-element mass matrix over all vertices.
pub fn vertex_mass(mesh: &SurfaceMesh) -> DMatrix<f64> {
    let all = BasisSet::all(mesh, SpatialBasis::Linear);
    mass_matrix(mesh, &all, &all)
}

/// `‖Σ c_i ξ^i‖_{L²(Γ)}` for nodal values at all vertices.
pub fn l2_gamma(coeffs: &DVector<f64>, mesh: &SurfaceMesh) -> Result<f64> {
    check_len(coeffs, mesh.n_vertices())?;
    Ok(quad_form(&vertex_mass(mesh), coeffs, coeffs).max(0.0).sqrt())
}

fn quad_form(m: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(&(m * b))
}

fn check_len(v: &DVector<f64>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Dimension(format!("coefficient vector of length {} for {n} vertices", v.len())));
    }
    Ok(())
}

/// Per-step `L²(Γ)` norms of a nodal history.
pub fn l2_gamma_history(history: &[DVector<f64>], mesh: &SurfaceMesh) -> Result<Vec<f64>> {
    let m = vertex_mass(mesh);
    history
        .iter()
        .map(|c| {
            check_len(c, mesh.n_vertices())?;
            Ok(quad_form(&m, c, c).max(0.0).sqrt())
        })
        .collect()
}

/// `‖u‖_{L²([0,T]×Γ)}` of the space-time interpolant of a nodal history
/// (exact for the piecewise linear interpolant in time).
pub fn l2_spacetime(history: &[DVector<f64>], mesh: &SurfaceMesh, grid: &TimeGrid) -> Result<f64> {
    let m = vertex_mass(mesh);
    l2_spacetime_with(&m, history, grid)
}

fn l2_spacetime_with(m: &DMatrix<f64>, history: &[DVector<f64>], grid: &TimeGrid) -> Result<f64> {
    let mut sum = 0.0;
    for n in 1..history.len() {
        let (a, b) = (&history[n - 1], &history[n]);
        check_len(a, m.nrows())?;
        check_len(b, m.nrows())?;
        sum += grid.dt() / 3.0 * (quad_form(m, a, a) + quad_form(m, a, b) + quad_form(m, b, b));
    }
    Ok(sum.max(0.0).sqrt())
}

/// `‖numeric − reference‖_{L²([0,T]×Γ)}` for two nodal histories on the same
/// mesh and grid.
pub fn l2_spacetime_error(
    numeric: &[DVector<f64>],
    reference: &[DVector<f64>],
    mesh: &SurfaceMesh,
    grid: &TimeGrid,
) -> Result<f64> {
    if numeric.len() != reference.len() {
        return Err(Error::Dimension(format!("{} vs {} time levels", numeric.len(), reference.len())));
    }
    let diff: Vec<DVector<f64>> = numeric.iter().zip(reference).map(|(a, b)| a - b).collect();
    l2_spacetime(&diff, mesh, grid)
}

/// `‖numeric − f‖_{L²([0,T]×Γ)}` against an analytic `f(t, x)`, interpolated
/// nodally in space and integrated by Gauss rules in time. `breakpoints`
/// are times where `f` is not smooth.
pub fn l2_spacetime_error_analytic<F>(
    numeric: &[DVector<f64>],
    mesh: &SurfaceMesh,
    grid: &TimeGrid,
    f: F,
    breakpoints: &[f64],
) -> Result<(f64, f64)>
where
    F: Fn(f64, &Point) -> f64,
{
    let m = vertex_mass(mesh);
    let nv = mesh.n_vertices();
    let gauss = gauss_legendre(10);
    let sample = |t: f64| DVector::from_iterator(nv, mesh.vertices().iter().map(|x| f(t, x)));
    let (mut err2, mut ref2) = (0.0, 0.0);
    for n in 1..numeric.len() {
        check_len(&numeric[n], nv)?;
        let (t0, t1) = (grid.time(n - 1), grid.time(n));
        let mut cuts = vec![t0];
        cuts.extend(breakpoints.iter().copied().filter(|&b| b > t0 && b < t1));
        cuts.push(t1);
        for w in cuts.windows(2) {
            let len = w[1] - w[0];
            for &(s, wt) in &gauss {
                let t = w[0] + s * len;
                let theta = (t - t0) / grid.dt();
                let uh = &numeric[n - 1] * (1.0 - theta) + &numeric[n] * theta;
                let r = sample(t);
                let e = &uh - &r;
                err2 += wt * len * quad_form(&m, &e, &e);
                ref2 += wt * len * quad_form(&m, &r, &r);
            }
        }
    }
    Ok((err2.max(0.0).sqrt(), ref2.max(0.0).sqrt()))
}

/// Energy `Σ_n Σ_m −(d^n)ᵀ V^{n−m} d^m` of a density history that is
/// piecewise constant in time (`d^n` on `(t_{n−1}, t_n]`, `d^0` unused),
/// with `V` the [`crate::assembly::OperatorKind::SingleLayerConstant`] blocks.
/// Equals `Σ_n ⟨V u(t_n) − V u(t_{n−1}), d^n⟩`.
pub fn energy_norm(density: &[DVector<f64>], v: &BlockSeries, grid: &TimeGrid) -> Result<f64> {
    if density.len() != grid.n_steps() + 1 {
        return Err(Error::Dimension(format!("{} density levels for {} steps", density.len(), grid.n_steps())));
    }
    let mut e = 0.0;
    for n in 1..density.len() {
        check_len(&density[n], v.ncols())?;
        let mut acc = DVector::zeros(v.nrows());
        for l in 0..=v.lag_bound().min(n - 1) {
            acc += &v.blocks[l] * &density[n - l];
        }
        e -= density[n].dot(&acc);
    }
    Ok(e)
}

/// [`energy_norm`] from the collocated blocks `C^ℓ = −Σ_{k≤ℓ} V^k`.
pub fn energy_norm_collocated(density: &[DVector<f64>], c: &BlockSeries) -> Result<f64> {
    let mut prev = DVector::zeros(c.nrows());
    let mut e = 0.0;
    for n in 1..density.len() {
        check_len(&density[n], c.ncols())?;
        let mut acc = DVector::zeros(c.nrows());
        for l in 0..=c.lag_bound().min(n - 1) {
            acc += &c.blocks[l] * &density[n - l];
        }
        e += density[n].dot(&(&acc - &prev));
        prev = acc;
    }
    Ok(e)
}

/// `α = (ln E1 − ln E2) / (ln DOF2 − ln DOF1)`; positive when the error
/// decreases with more unknowns.
pub fn convergence_rate(e1: f64, dof1: f64, e2: f64, dof2: f64) -> Result<f64> {
    if !(e1 > 0.0 && e2 > 0.0 && dof1 > 0.0 && dof2 > 0.0) {
        return Err(Error::InvalidArgument(format!("rate needs positive inputs, got ({e1}, {dof1}, {e2}, {dof2})")));
    }
    if dof1 == dof2 {
        return Err(Error::InvalidArgument("rate needs two different DOF counts".into()));
    }
    Ok((e1.ln() - e2.ln()) / (dof2.ln() - dof1.ln()))
}

/// Space-time unknown count `N_s · N_t`.
pub fn spacetime_dof(n_space: usize, grid: &TimeGrid) -> usize {
    n_space * grid.n_steps()
}

/// Location of a point in a coarse mesh.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Location {
    pub triangle: usize,
    pub bary: [f64; 3],
}

/// Finds the triangle of `mesh` closest to each point; errors if some point
/// is farther than `tol` (relative to the mesh diameter) from the surface.
pub fn locate_points(mesh: &SurfaceMesh, points: &[Point], tol: f64) -> Result<Vec<Location>> {
    let diam = crate::mesh::mesh_stats(mesh).diameter;
    points
        .iter()
        .map(|p| {
            let mut best = (f64::INFINITY, Location { triangle: 0, bary: [1.0, 0.0, 0.0] });
            for t in 0..mesh.n_triangles() {
                let (dist, bary) = closest_on_triangle(&mesh.corners(t), p);
                if dist < best.0 {
                    best = (dist, Location { triangle: t, bary });
                }
            }
            if best.0 > tol * diam {
                return Err(Error::Geometry(format!(
                    "point ({:.6}, {:.6}, {:.6}) is {:.3e} away from the coarse surface",
                    p.x, p.y, p.z, best.0
                )));
            }
            Ok(best.1)
        })
        .collect()
}

/// Distance from `p` to the triangle and barycentric coordinates of the
/// closest point.
fn closest_on_triangle(c: &[Point; 3], p: &Point) -> (f64, [f64; 3]) {
    let (e1, e2) = (c[1] - c[0], c[2] - c[0]);
    let d = p - c[0];
    let (a11, a12, a22) = (e1.dot(&e1), e1.dot(&e2), e2.dot(&e2));
    let (b1, b2) = (e1.dot(&d), e2.dot(&d));
    let det = a11 * a22 - a12 * a12;
    let s = (a22 * b1 - a12 * b2) / det;
    let t = (a11 * b2 - a12 * b1) / det;
    let bary = [1.0 - s - t, s, t];
    if bary.iter().all(|&l| l >= -1e-12) {
        let q = c[0] + e1 * s + e2 * t;
        return ((p - q).norm(), bary.map(|l| l.max(0.0)));
    }
    let mut best = (f64::INFINITY, bary);
    for (i, j) in [(0, 1), (1, 2), (2, 0)] {
        let e = c[j] - c[i];
        let u = ((p - c[i]).dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
        let q = c[i] + e * u;
        let dist = (p - q).norm();
        if dist < best.0 {
            let mut b = [0.0; 3];
            b[i] = 1.0 - u;
            b[j] = u;
            best = (dist, b);
        }
    }
    best
}

/// Evaluates the space-time interpolant of a coarse nodal history at the
/// vertices of `fine` and the time nodes of `fine_grid`.
pub fn prolong(
    coarse: &[DVector<f64>],
    coarse_mesh: &SurfaceMesh,
    coarse_grid: &TimeGrid,
    fine: &SurfaceMesh,
    fine_grid: &TimeGrid,
) -> Result<Vec<DVector<f64>>> {
    if coarse.len() != coarse_grid.n_steps() + 1 {
        return Err(Error::Dimension(format!(
            "history has {} levels, grid has {} steps",
            coarse.len(),
            coarse_grid.n_steps()
        )));
    }
    if fine_grid.horizon() > coarse_grid.horizon() * (1.0 + 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "fine horizon {} exceeds coarse horizon {}",
            fine_grid.horizon(),
            coarse_grid.horizon()
        )));
    }
    let locs = locate_points(coarse_mesh, fine.vertices(), 1e-8)?;
    let mut space = DMatrix::<f64>::zeros(fine.n_vertices(), coarse_mesh.n_vertices());
    for (i, loc) in locs.iter().enumerate() {
        for (k, &v) in coarse_mesh.triangles()[loc.triangle].iter().enumerate() {
            space[(i, v)] += loc.bary[k];
        }
    }
    let mut out = Vec::with_capacity(fine_grid.n_steps() + 1);
    for n in 0..=fine_grid.n_steps() {
        let t = fine_grid.time(n).min(coarse_grid.horizon());
        let mut c = DVector::zeros(coarse_mesh.n_vertices());
        let lo = ((t / coarse_grid.dt()).floor() as usize).min(coarse_grid.n_steps());
        for m in lo.saturating_sub(1)..=(lo + 1).min(coarse_grid.n_steps()) {
            let b = beta(coarse_grid, m, t);
            if b != 0.0 {
                c += &coarse[m] * b;
            }
        }
        out.push(&space * c);
    }
    Ok(out)
}

/// Error measures of one run.
#[derive(Clone, Debug, Serialize)]
pub struct ErrorReport {
    pub numeric_l2: Vec<f64>,
    pub reference_l2: Vec<f64>,
    pub error_l2: Vec<f64>,
    pub spacetime_error: f64,
    pub relative_error: f64,
    pub energy: Option<f64>,
    pub dof: usize,
}

impl ErrorReport {
    /// Compares two nodal histories on the same mesh and grid.
    pub fn compare(
        numeric: &[DVector<f64>],
        reference: &[DVector<f64>],
        mesh: &SurfaceMesh,
        grid: &TimeGrid,
        dof: usize,
    ) -> Result<Self> {
        let numeric_l2 = l2_gamma_history(numeric, mesh)?;
        let reference_l2 = l2_gamma_history(reference, mesh)?;
        let diff: Vec<DVector<f64>> = numeric.iter().zip(reference).map(|(a, b)| a - b).collect();
        let error_l2 = l2_gamma_history(&diff, mesh)?;
        let spacetime_error = l2_spacetime_error(numeric, reference, mesh, grid)?;
        let norm = l2_spacetime(reference, mesh, grid)?;
        Ok(ErrorReport {
            numeric_l2,
            reference_l2,
            error_l2,
            spacetime_error,
            relative_error: if norm > 0.0 { spacetime_error / norm } else { spacetime_error },
            energy: None,
            dof,
        })
    }
}

/// One row of a convergence study.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    pub level: usize,
    pub n_triangles: usize,
    pub dof: usize,
    pub dt: f64,
    pub cfl: f64,
    pub error: f64,
    pub alpha_vs_prev: Option<f64>,
}

/// Fills `alpha_vs_prev` from consecutive rows.
pub fn fill_rates(rows: &mut [StudyRow]) -> Result<()> {
    for k in 1..rows.len() {
        let (a, b) = (&rows[k - 1], &rows[k]);
        let alpha = convergence_rate(a.error, a.dof as f64, b.error, b.dof as f64)?;
        rows[k].alpha_vs_prev = Some(alpha);
    }
    Ok(())
}

/// Writes study rows with columns `level,n_triangles,dof,dt,cfl,error,alpha_vs_prev`.
pub fn write_study_csv(rows: &[StudyRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["level", "n_triangles", "dof", "dt", "cfl", "error", "alpha_vs_prev"])
        .map_err(crate::mot::csv_err)?;
    for r in rows {
        w.write_record(&[
            r.level.to_string(),
            r.n_triangles.to_string(),
            r.dof.to_string(),
            format!("{}", r.dt),
            format!("{}", r.cfl),
            format!("{:e}", r.error),
            r.alpha_vs_prev.map(|a| format!("{a:.6}")).unwrap_or_default(),
        ])
        .map_err(crate::mot::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Strictly decreasing errors.
pub fn is_monotone(rows: &[StudyRow]) -> bool {
    rows.windows(2).all(|w| w[1].error < w[0].error)
}
