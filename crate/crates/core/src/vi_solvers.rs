//! Uzawa solvers for the contact problem (Dirichlet-to-Neumann operator) and
//! the punch problem (single layer operator).
//!
//! Both problems share one structure: a causal block system `Σ_m M^{n−m} x^m`
//! whose constrained field `f` (the leading entries of `x`) is coupled to a
//! multiplier `y^n`, constant on `(t_{n−1}, t_n]`, through the mass matrix `B`.
//! The multiplier solves `y ≥ 0`, `p ≥ 0`, `y·p = 0` with the pairing
//! `p^n = ∫_{t_{n−1}}^{t_n} Bᵀ f`: `(Δt/2) Bᵀ (f^{n−1} + f^n)` for the
//! piecewise linear contact trace, `Δt Bᵀ f^n` for the piecewise constant
//! punch density.

use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assembly::{cumulative_single_layer, BlockSeries, CoupledSeries, OperatorKind};
use crate::error::{Error, Result};
use crate::mesh::SurfaceMesh;
use crate::mot::{check_finite, check_rhs, csv_err, trace_load, Marcher, MotState, RhsTrace, TRACE_LOAD_SCALE};
use crate::timebasis::{mass_matrix, BasisSet, SpatialBasis, TimeGrid};

/// Consecutive residual increases treated as divergence.
pub const DIVERGENCE_STREAK: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UzawaConfig {
    pub rho: f64,
    /// Stop when `‖y_new − y‖₂ ≤ tol_rel ‖y_new‖₂`.
    pub tol_rel: f64,
    /// Stop when `‖y_new − y‖∞ < tol_inf`.
    pub tol_inf: f64,
    pub max_iter: usize,
    /// Use `y + ρ p` instead of `y − ρ p`.
    pub flip_sign: bool,
}

impl Default for UzawaConfig {
    fn default() -> Self {
        UzawaConfig { rho: 1.0, tol_rel: 1e-12, tol_inf: 1e-10, max_iter: 100_000, flip_sign: false }
    }
}

impl UzawaConfig {
    pub fn space_time(rho: f64) -> Self {
        UzawaConfig { rho, tol_rel: 1e-11, ..Default::default() }
    }

    pub fn time_step(rho: f64) -> Self {
        UzawaConfig { rho, tol_rel: 1e-12, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.tol_rel > 0.0 && self.tol_inf > 0.0) {
            return Err(Error::InvalidArgument("Uzawa tolerances must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        Ok(())
    }

    fn sign(&self) -> f64 {
        if self.flip_sign {
            1.0
        } else {
            -1.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UzawaVariant {
    SpaceTime,
    TimeStep,
}

impl UzawaVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "space_time" | "space-time" => Ok(UzawaVariant::SpaceTime),
            "time_step" | "time-step" => Ok(UzawaVariant::TimeStep),
            _ => Err(Error::InvalidArgument(format!("unknown Uzawa variant '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    /// Time step of the inner loop (time-step variant only).
    pub step: Option<usize>,
    pub iterate: usize,
    pub residual: f64,
    pub active_set: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ComplementarityReport {
    /// `Σ_n y^n · p^n`.
    pub pairing: f64,
    /// `|pairing| / (‖p‖ ‖y‖ + ε)`.
    pub scaled_pairing: f64,
    pub min_multiplier: f64,
    /// Smallest constrained field value at the multiplier nodes.
    pub min_field: f64,
}

#[derive(Clone, Debug)]
pub struct ContactSolution {
    /// Constrained field `f^n` (trace for contact, density for punch), `n = 0..=N`.
    pub field: Vec<DVector<f64>>,
    /// Full unknown vectors `x^n`.
    pub states: Vec<DVector<f64>>,
    /// Multiplier `y^n`; `y^0 = 0` is a placeholder.
    pub multiplier: Vec<DVector<f64>>,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
    pub iterations: usize,
    pub report: ComplementarityReport,
    pub elapsed: Duration,
}

impl ContactSolution {
    /// Splits the contact states into trace and density.
    pub fn to_mot_state(&self, coupled: &CoupledSeries) -> MotState {
        MotState::from_stacked(coupled, &self.states)
    }

    pub fn write_log_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iterate", "residual", "active_set_size", "step"]).map_err(csv_err)?;
        for r in &self.log {
            w.write_record(&[
                r.iterate.to_string(),
                format!("{:e}", r.residual),
                r.active_set.to_string(),
                r.step.map(|s| s.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Componentwise `max{v_i, 0}`.
pub fn project_nonneg(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// A causal block system with a constrained field and a multiplier.
#[derive(Clone, Debug)]
pub struct ConstrainedSystem {
    pub series: BlockSeries,
    pub dt: f64,
    /// Number of leading unknowns forming the constrained field.
    pub field_len: usize,
    /// `∫ field_i · multiplier_j` (field rows).
    pub b: DMatrix<f64>,
    /// Factor in front of `[B y^n; 0]` on the right-hand side.
    pub coupling_scale: f64,
    /// Right-hand side without multiplier, `load[n]` for `n = 1..=N` (`load[0]` unused).
    pub load: Vec<DVector<f64>>,
    /// Maps the field to its values at the multiplier nodes.
    pub nodal: DMatrix<f64>,
    /// Weights of `f^{n−1}` and `f^n` in the pairing.
    pub pairing_weights: (f64, f64),
}

impl ConstrainedSystem {
    pub fn n_steps(&self) -> usize {
        self.load.len() - 1
    }

    pub fn n_mult(&self) -> usize {
        self.b.ncols()
    }

    fn pairing(&self, prev: &DVector<f64>, cur: &DVector<f64>) -> DVector<f64> {
        let (w0, w1) = self.pairing_weights;
        if w0 == 0.0 {
            self.b.tr_mul(cur) * w1
        } else {
            self.b.tr_mul(&(prev * w0 + cur * w1))
        }
    }

    fn pairing_matrix(&self, prev: Option<&DMatrix<f64>>, cur: &DMatrix<f64>) -> DMatrix<f64> {
        let (w0, w1) = self.pairing_weights;
        let mut f = cur * w1;
        if let Some(p) = prev {
            if w0 != 0.0 {
                f += p * w0;
            }
        }
        self.b.tr_mul(&f)
    }

    fn field(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(0, self.field_len).into_owned()
    }

    fn coupling(&self, marcher: &Marcher) -> DMatrix<f64> {
        let mut rhs = DMatrix::zeros(marcher.dim(), self.n_mult());
        rhs.view_mut((0, 0), (self.field_len, self.n_mult())).copy_from(&(&self.b * self.coupling_scale));
        marcher.solve_matrix(&rhs)
    }

    fn finish(
        &self,
        states: Vec<DVector<f64>>,
        multiplier: Vec<DVector<f64>>,
        log: Vec<IterationRecord>,
        converged: bool,
        iterations: usize,
        start: Instant,
    ) -> ContactSolution {
        let field: Vec<DVector<f64>> = states.iter().map(|x| self.field(x)).collect();
        let report = self.report(&field, &multiplier);
        ContactSolution { field, states, multiplier, log, converged, iterations, report, elapsed: start.elapsed() }
    }

    /// Complementarity diagnostics of a field/multiplier history.
    pub fn report(&self, field: &[DVector<f64>], multiplier: &[DVector<f64>]) -> ComplementarityReport {
        let mut pairing = 0.0;
        let (mut pp, mut yy) = (0.0, 0.0);
        let mut min_multiplier = f64::INFINITY;
        let mut min_field = f64::INFINITY;
        for n in 1..field.len() {
            let p = self.pairing(&field[n - 1], &field[n]);
            let y = &multiplier[n];
            pairing += y.dot(&p);
            pp += p.norm_squared();
            yy += y.norm_squared();
            min_multiplier = min_multiplier.min(y.min());
            min_field = min_field.min((&self.nodal * &field[n]).min());
        }
        let scaled_pairing = pairing.abs() / ((pp * yy).sqrt() + f64::EPSILON);
        ComplementarityReport { pairing, scaled_pairing, min_multiplier, min_field }
    }
}

/// Contact problem `𝒮u − λ = g` on the contact area G of `mesh`.
pub fn contact_system(
    mesh: &SurfaceMesh,
    coupled: &CoupledSeries,
    rhs: &RhsTrace,
    multiplier: SpatialBasis,
) -> Result<ConstrainedSystem> {
    check_rhs(coupled, rhs)?;
    let dt = coupled.grid.dt();
    let field = BasisSet::linear(coupled.trace_vertices.clone());
    let mult = BasisSet::contact_multipliers(mesh, multiplier);
    let b = mass_matrix(mesh, &field, &mult);
    let nc = coupled.n_trace;
    let mut load = vec![DVector::zeros(coupled.dim())];
    for n in 1..=rhs.n_steps() {
        let mut v = DVector::zeros(coupled.dim());
        v.rows_mut(0, nc).copy_from(&trace_load(&coupled.trace_mass, rhs, n, dt));
        load.push(v);
    }
    let nodal = nodal_map(mesh, &field.entities, &mult);
    Ok(ConstrainedSystem {
        series: coupled.series.clone(),
        dt,
        field_len: nc,
        b,
        coupling_scale: dt * TRACE_LOAD_SCALE,
        load,
        nodal,
        pairing_weights: (0.5 * dt, 0.5 * dt),
    })
}

/// Punch problem `Vu − λ = g` with the density on the vertices of `mesh`
/// (the contact area), piecewise constant in time. `v` holds the
/// [`OperatorKind::SingleLayerConstant`] blocks over all vertices; the
/// equations are collocated at the time nodes, `Vu(t_n) = g(t_n) + λ^n`.
pub fn punch_system(
    mesh: &SurfaceMesh,
    grid: &TimeGrid,
    v: BlockSeries,
    rhs: &RhsTrace,
    multiplier: SpatialBasis,
) -> Result<ConstrainedSystem> {
    let nv = mesh.n_vertices();
    if v.label != OperatorKind::SingleLayerConstant.short_name() {
        return Err(Error::InvalidArgument(format!(
            "punch needs piecewise constant single layer blocks, got '{}'",
            v.label
        )));
    }
    if v.nrows() != nv || v.ncols() != nv {
        return Err(Error::Dimension(format!("V blocks are {}×{}, mesh has {nv} vertices", v.nrows(), v.ncols())));
    }
    if rhs.vertices.len() != nv || rhs.vertices.iter().enumerate().any(|(k, &i)| k != i) {
        return Err(Error::Dimension("punch data must be given at every vertex of the contact mesh".into()));
    }
    let field = BasisSet::all(mesh, SpatialBasis::Linear);
    let mult = BasisSet::all(mesh, multiplier);
    let b = mass_matrix(mesh, &field, &mult);
    let mass = mass_matrix(mesh, &field, &field);
    let mut load = vec![DVector::zeros(nv)];
    for n in 1..=rhs.n_steps() {
        load.push(&mass * &rhs.values[n]);
    }
    let nodal = nodal_map(mesh, &field.entities, &mult);
    Ok(ConstrainedSystem {
        series: cumulative_single_layer(v),
        dt: grid.dt(),
        field_len: nv,
        b,
        coupling_scale: 1.0,
        load,
        nodal,
        pairing_weights: (0.0, grid.dt()),
    })
}

/// Values of a linear field (on `field_vertices`) at the multiplier nodes:
/// vertices for linear multipliers, centroids for constant ones.
fn nodal_map(mesh: &SurfaceMesh, field_vertices: &[usize], mult: &BasisSet) -> DMatrix<f64> {
    let mut local = vec![None; mesh.n_vertices()];
    for (k, &v) in field_vertices.iter().enumerate() {
        local[v] = Some(k);
    }
    let mut out = DMatrix::zeros(mult.len(), field_vertices.len());
    for (r, &e) in mult.entities.iter().enumerate() {
        match mult.basis {
            SpatialBasis::Linear => {
                if let Some(c) = local[e] {
                    out[(r, c)] = 1.0;
                }
            }
            SpatialBasis::Constant => {
                for &v in &mesh.triangles()[e] {
                    if let Some(c) = local[v] {
                        out[(r, c)] += 1.0 / 3.0;
                    }
                }
            }
        }
    }
    out
}

/// Tracks consecutive residual increases.
struct Divergence {
    last: f64,
    streak: usize,
}

impl Divergence {
    fn new() -> Self {
        Divergence { last: f64::INFINITY, streak: 0 }
    }

    fn update(&mut self, residual: f64, step: Option<usize>) -> Result<()> {
        if residual > self.last {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.last = residual;
        if self.streak >= DIVERGENCE_STREAK || !residual.is_finite() {
            return Err(Error::Divergence { streak: self.streak, step });
        }
        Ok(())
    }
}

fn stop(cfg: &UzawaConfig, diff: &DVector<f64>, y: &DVector<f64>) -> bool {
    let d2 = diff.norm();
    d2 <= cfg.tol_rel * y.norm() || diff.amax() < cfg.tol_inf
}

/// Time-step Uzawa: per step, iterate `y ← max{0, y − ρ(p0 + J y)}` with the
/// lag-0 response `J` of the pairing to the multiplier.
pub fn uzawa_time_step(sys: &ConstrainedSystem, cfg: &UzawaConfig) -> Result<ContactSolution> {
    cfg.validate()?;
    let start = Instant::now();
    let marcher = Marcher::new(&sys.series)?;
    let z = sys.coupling(&marcher);
    let zf = z.rows(0, sys.field_len).into_owned();
    let j = sys.pairing_matrix(None, &zf);
    let m = sys.n_mult();
    let mut states = vec![DVector::zeros(marcher.dim())];
    let mut ys = vec![DVector::zeros(m)];
    let mut log = Vec::new();
    let mut converged = true;
    let mut total = 0;
    let s = cfg.sign() * cfg.rho;
    for n in 1..=sys.n_steps() {
        let rhs = &sys.load[n] - marcher.history(&states, n);
        let x0 = marcher.solve(&rhs);
        check_finite(&x0, n)?;
        let prev = sys.field(&states[n - 1]);
        let p0 = sys.pairing(&prev, &sys.field(&x0));
        let mut y = ys[n - 1].clone();
        let mut guard = Divergence::new();
        let mut done = false;
        for k in 1..=cfg.max_iter {
            let p = &p0 + &j * &y;
            let y_new = project_nonneg(&(&y + &p * s));
            let diff = &y_new - &y;
            let residual = diff.norm();
            let active = y_new.iter().filter(|&&v| v > 0.0).count();
            log.push(IterationRecord { step: Some(n), iterate: k, residual, active_set: active });
            total += 1;
            guard.update(residual, Some(n))?;
            y = y_new;
            if stop(cfg, &diff, &y) {
                done = true;
                break;
            }
        }
        converged &= done;
        let x = x0 + &z * &y;
        check_finite(&x, n)?;
        states.push(x);
        ys.push(y);
    }
    Ok(sys.finish(states, ys, log, converged, total, start))
}

/// Space-time Uzawa: every iterate solves the whole march for a fixed
/// multiplier history and then projects `y − ρ p` for all steps at once.
///
/// The march is linear in `y`, so it is done once for `y = 0` and once for
/// unit multipliers; each iterate then only applies the causal convolution of
/// the resulting pairing responses.
pub fn uzawa_space_time(sys: &ConstrainedSystem, cfg: &UzawaConfig) -> Result<ContactSolution> {
    cfg.validate()?;
    let start = Instant::now();
    let marcher = Marcher::new(&sys.series)?;
    let nt = sys.n_steps();
    let m = sys.n_mult();

    let free = marcher.march(nt, |n| sys.load[n].clone())?;
    let free_p: Vec<DVector<f64>> =
        (1..=nt).map(|n| sys.pairing(&sys.field(&free[n - 1]), &sys.field(&free[n]))).collect();

    // Pairing responses P^ℓ to a unit multiplier applied ℓ steps earlier.
    let z = sys.coupling(&marcher);
    let mut xs: Vec<DMatrix<f64>> = vec![DMatrix::zeros(marcher.dim(), m), z];
    let mut resp: Vec<DMatrix<f64>> = Vec::with_capacity(nt);
    let field_of = |x: &DMatrix<f64>| x.rows(0, sys.field_len).into_owned();
    resp.push(sys.pairing_matrix(None, &field_of(&xs[1])));
    for n in 2..=nt {
        let x = marcher.solve_matrix(&(-marcher.history_matrix(&xs, n)));
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Instability { step: n });
        }
        resp.push(sys.pairing_matrix(Some(&field_of(&xs[n - 1])), &field_of(&x)));
        xs.push(x);
    }
    drop(xs);

    let s = cfg.sign() * cfg.rho;
    let mut y: Vec<DVector<f64>> = vec![DVector::zeros(m); nt];
    let mut log = Vec::new();
    let mut guard = Divergence::new();
    let mut converged = false;
    let mut iterations = 0;
    for k in 1..=cfg.max_iter {
        let mut y_new = Vec::with_capacity(nt);
        let mut diff2 = 0.0;
        let mut diff_inf: f64 = 0.0;
        let mut norm2 = 0.0;
        let mut active = 0;
        for n in 0..nt {
            let mut p = free_p[n].clone();
            for mm in 0..=n {
                p += &resp[n - mm] * &y[mm];
            }
            let yn = project_nonneg(&(&y[n] + p * s));
            let d = &yn - &y[n];
            diff2 += d.norm_squared();
            diff_inf = diff_inf.max(d.amax());
            norm2 += yn.norm_squared();
            active += yn.iter().filter(|&&v| v > 0.0).count();
            y_new.push(yn);
        }
        y = y_new;
        let residual = diff2.sqrt();
        log.push(IterationRecord { step: None, iterate: k, residual, active_set: active });
        iterations = k;
        guard.update(residual, None)?;
        if residual <= cfg.tol_rel * norm2.sqrt() || diff_inf < cfg.tol_inf {
            converged = true;
            break;
        }
    }

    let mut ys = vec![DVector::zeros(m)];
    ys.extend(y);
    let mut coupling = DVector::zeros(marcher.dim());
    let states = marcher.march(nt, |n| {
        coupling.rows_mut(0, sys.field_len).copy_from(&(&sys.b * &ys[n] * sys.coupling_scale));
        &sys.load[n] + &coupling
    })?;
    Ok(sys.finish(states, ys, log, converged, iterations, start))
}

/// Runs the chosen variant.
pub fn solve_constrained(sys: &ConstrainedSystem, cfg: &UzawaConfig, variant: UzawaVariant) -> Result<ContactSolution> {
    match variant {
        UzawaVariant::SpaceTime => uzawa_space_time(sys, cfg),
        UzawaVariant::TimeStep => uzawa_time_step(sys, cfg),
    }
}

/// Punch solve on the contact area of `mesh`: single layer blocks of the
/// contact sub-mesh, density on all of its vertices.
pub fn punch_uzawa(
    mesh: &SurfaceMesh,
    grid: &TimeGrid,
    v: BlockSeries,
    rhs: &RhsTrace,
    cfg: &UzawaConfig,
    variant: UzawaVariant,
    multiplier: SpatialBasis,
) -> Result<ContactSolution> {
    let sys = punch_system(mesh, grid, v, rhs, multiplier)?;
    solve_constrained(&sys, cfg, variant)
}

/// Complementarity report of a finished solve.
pub fn complementarity_report(sys: &ConstrainedSystem, sol: &ContactSolution) -> ComplementarityReport {
    sys.report(&sol.field, &sol.multiplier)
}

/// Largest eigenvalue of the symmetric part of the lag-0 pairing response;
/// the projected iteration contracts for `0 < ρ < 2/λ_max` when the
/// response is symmetric positive definite.
pub fn lag0_response_bound(sys: &ConstrainedSystem) -> Result<f64> {
    let marcher = Marcher::new(&sys.series)?;
    let z = sys.coupling(&marcher);
    let j = sys.pairing_matrix(None, &z.rows(0, sys.field_len).into_owned());
    let sym = (&j + j.transpose()) * 0.5;
    Ok(sym.symmetric_eigenvalues().max())
}
