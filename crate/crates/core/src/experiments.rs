//! Experiment configurations, single runs and refinement studies.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    convergence_rate, energy_norm_collocated, l2_gamma_history, l2_spacetime, l2_spacetime_error,
    l2_spacetime_error_analytic, prolong, sphere_exact_h, sphere_exact_u, BuiltinForcing, StudyRow,
};
use crate::assembly::{OperatorKind, QuadratureConfig};
use crate::cache::{coupled_cached, series_cached, BlockCache};
use crate::error::{Error, Result};
use crate::mesh::{gen_cube, gen_icosphere, gen_screen, mesh_stats, parse_face_set, read_mesh, Point, SurfaceMesh};
use crate::mot::{mot_solve_equality, project_rhs, project_rhs_l2, MotState, RhsTrace};
use crate::timebasis::{build_time_grid, SpatialBasis, TimeGrid};
use crate::vi_solvers::{
    contact_system, lag0_response_bound, punch_system, solve_constrained, ComplementarityReport, ContactSolution,
    UzawaConfig,
    UzawaVariant,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    DtnEquality,
    Contact,
    Punch,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dtn-equality" | "dtn_equality" => Ok(ExperimentKind::DtnEquality),
            "contact" => Ok(ExperimentKind::Contact),
            "punch" => Ok(ExperimentKind::Punch),
            _ => Err(Error::InvalidArgument(format!("unknown experiment '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::DtnEquality => "dtn-equality",
            ExperimentKind::Contact => "contact",
            ExperimentKind::Punch => "punch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Geometry {
    Icosphere { level: usize },
    Screen { half_width: f64, n: usize, contact: f64 },
    Cube { half_width: f64, n: usize, contact: String },
    File { path: PathBuf },
}

impl Geometry {
    pub fn build(&self) -> Result<SurfaceMesh> {
        match self {
            Geometry::Icosphere { level } => gen_icosphere(*level),
            Geometry::Screen { half_width, n, contact } => gen_screen(*half_width, *n, *contact),
            Geometry::Cube { half_width, n, contact } => gen_cube(*half_width, *n, &parse_face_set(contact)?),
            Geometry::File { path } => read_mesh(path),
        }
    }

    /// The same geometry at refinement `level` (icosphere level, or cells
    /// per side for screens and cubes).
    pub fn at_level(&self, level: usize) -> Result<Geometry> {
        let mut g = self.clone();
        match &mut g {
            Geometry::Icosphere { level: l } => *l = level,
            Geometry::Screen { n, .. } | Geometry::Cube { n, .. } => *n = level,
            Geometry::File { .. } => {
                return Err(Error::InvalidArgument("a mesh file has no refinement levels".into()));
            }
        }
        Ok(g)
    }

    pub fn is_sphere(&self) -> bool {
        matches!(self, Geometry::Icosphere { .. })
    }

    pub fn is_cube(&self) -> bool {
        matches!(self, Geometry::Cube { .. })
    }
}

/// How forcings become trace coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadKind {
    /// `L²(Γ)` projection.
    #[default]
    L2,
    /// Nodal interpolation.
    Nodal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub geometry: Geometry,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub cfl: Option<f64>,
    pub horizon: f64,
    #[serde(default = "default_variant")]
    pub variant: UzawaVariant,
    #[serde(default)]
    pub uzawa: UzawaConfig,
    /// Take `ρ = 1/λ_max` of the lag-0 pairing response instead of `uzawa.rho`.
    #[serde(default)]
    pub auto_rho: bool,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Built-in forcing name, or "sphere" for the sphere benchmark.
    #[serde(default)]
    pub forcing: Option<String>,
    #[serde(default)]
    pub load: LoadKind,
    #[serde(default = "default_multiplier")]
    pub multiplier: SpatialBasis,
    /// Contact only: also run the other Uzawa variant and compare.
    #[serde(default)]
    pub compare_variants: bool,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Study levels (icosphere levels or cells per side).
    #[serde(default)]
    pub levels: Vec<usize>,
    /// Level of the reference run for contact and punch studies.
    #[serde(default)]
    pub reference_level: Option<usize>,
}

fn default_variant() -> UzawaVariant {
    UzawaVariant::TimeStep
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_multiplier() -> SpatialBasis {
    SpatialBasis::Linear
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind, geometry: Geometry, horizon: f64) -> Self {
        ExperimentConfig {
            experiment,
            geometry,
            dt: None,
            cfl: None,
            horizon,
            variant: default_variant(),
            uzawa: UzawaConfig::default(),
            auto_rho: false,
            quadrature: QuadratureConfig::default(),
            output_dir: default_output(),
            forcing: None,
            load: LoadKind::default(),
            multiplier: default_multiplier(),
            compare_variants: false,
            cache_dir: None,
            levels: Vec::new(),
            reference_level: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.dt, self.cfl) {
            (Some(_), Some(_)) => return Err(Error::InvalidArgument("give either dt or cfl, not both".into())),
            (None, None) => return Err(Error::InvalidArgument("one of dt or cfl is required".into())),
            _ => {}
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {}", self.horizon)));
        }
        if let Geometry::File { path } = &self.geometry {
            if !path.exists() {
                return Err(Error::InvalidArgument(format!("mesh file {} does not exist", path.display())));
            }
        }
        if !self.auto_rho {
            self.uzawa.validate()?;
        }
        self.quadrature.validate()?;
        self.forcing_kind()?;
        Ok(())
    }

    pub fn time_grid(&self, mesh: &SurfaceMesh) -> Result<TimeGrid> {
        match (self.dt, self.cfl) {
            (Some(dt), None) => build_time_grid(self.horizon, dt),
            (None, Some(cfl)) => TimeGrid::from_cfl(self.horizon, cfl, mesh_stats(mesh).h_max),
            _ => Err(Error::InvalidArgument("exactly one of dt or cfl must be given".into())),
        }
    }

    pub fn forcing_kind(&self) -> Result<Forcing> {
        if let Some(name) = &self.forcing {
            if name == "sphere" {
                return Ok(Forcing::Sphere);
            }
            return BuiltinForcing::parse(name).map(Forcing::Builtin);
        }
        let cube = self.geometry.is_cube();
        Ok(match self.experiment {
            ExperimentKind::DtnEquality if self.geometry.is_sphere() => Forcing::Sphere,
            ExperimentKind::DtnEquality | ExperimentKind::Contact if cube => Forcing::Builtin(BuiltinForcing::ContactCube),
            ExperimentKind::DtnEquality | ExperimentKind::Contact => Forcing::Builtin(BuiltinForcing::ContactScreen),
            ExperimentKind::Punch if cube => Forcing::Builtin(BuiltinForcing::PunchCube),
            ExperimentKind::Punch => Forcing::Builtin(BuiltinForcing::PunchScreen),
        })
    }

    fn cache(&self) -> Result<Option<BlockCache>> {
        self.cache_dir.as_ref().map(BlockCache::new).transpose()
    }
}

/// Right-hand side of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Forcing {
    /// `g = −h` of the sphere benchmark, exact trace known.
    Sphere,
    Builtin(BuiltinForcing),
}

impl Forcing {
    pub fn eval(self, t: f64, x: &Point) -> f64 {
        match self {
            Forcing::Sphere => -sphere_exact_h(t),
            Forcing::Builtin(f) => f.eval(t, x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Forcing::Sphere => "sphere",
            Forcing::Builtin(f) => f.name(),
        }
    }
}

/// Result of one experiment run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub experiment: ExperimentKind,
    /// Mesh carrying `history` (the contact area for punch runs).
    pub mesh: SurfaceMesh,
    pub grid: TimeGrid,
    /// Nodal values at all vertices of `mesh`: the trace for the
    /// Dirichlet-to-Neumann runs, the density for punch runs.
    pub history: Vec<DVector<f64>>,
    pub state: Option<MotState>,
    pub solution: Option<ContactSolution>,
    /// Space-time unknowns: lag-0 system size times steps.
    pub dof: usize,
    pub energy: Option<f64>,
    /// Absolute and relative space-time error against the exact sphere trace.
    pub exact_error: Option<(f64, f64)>,
    /// Per-step relative `L²(Γ)` difference to the other Uzawa variant.
    pub variant_difference: Option<Vec<f64>>,
    pub other_elapsed: Option<Duration>,
    pub rho: Option<f64>,
    pub elapsed: Duration,
}

impl RunOutput {
    pub fn step_norms(&self) -> Result<Vec<f64>> {
        l2_gamma_history(&self.history, &self.mesh)
    }

    pub fn converged(&self) -> bool {
        self.solution.as_ref().is_none_or(|s| s.converged)
    }
}

fn load_trace(cfg: &ExperimentConfig, f: Forcing, mesh: &SurfaceMesh, grid: &TimeGrid, vertices: &[usize]) -> Result<RhsTrace> {
    let eval = move |t: f64, x: &Point| f.eval(t, x);
    match cfg.load {
        LoadKind::L2 => project_rhs_l2(eval, mesh, grid, vertices),
        LoadKind::Nodal => project_rhs(eval, mesh, grid, vertices),
    }
}

fn uzawa_for(cfg: &ExperimentConfig, bound: impl FnOnce() -> Result<f64>) -> Result<UzawaConfig> {
    let mut uz = cfg.uzawa.clone();
    if cfg.auto_rho {
        uz.rho = 1.0 / bound()?;
    }
    uz.validate()?;
    Ok(uz)
}

fn other(v: UzawaVariant) -> UzawaVariant {
    match v {
        UzawaVariant::SpaceTime => UzawaVariant::TimeStep,
        UzawaVariant::TimeStep => UzawaVariant::SpaceTime,
    }
}

/// Runs one experiment on `mesh`.
pub fn run_on(cfg: &ExperimentConfig, mesh: &SurfaceMesh) -> Result<RunOutput> {
    let start = Instant::now();
    let grid = cfg.time_grid(mesh)?;
    let forcing = cfg.forcing_kind()?;
    let cache = cfg.cache()?;
    match cfg.experiment {
        ExperimentKind::DtnEquality | ExperimentKind::Contact => {
            let coupled = coupled_cached(cache.as_ref(), mesh, &grid, &cfg.quadrature)?;
            let rhs = load_trace(cfg, forcing, mesh, &grid, &coupled.trace_vertices)?;
            let dof = coupled.dim() * grid.n_steps();
            let mut out = RunOutput {
                experiment: cfg.experiment,
                mesh: mesh.clone(),
                grid,
                history: Vec::new(),
                state: None,
                solution: None,
                dof,
                energy: None,
                exact_error: None,
                variant_difference: None,
                other_elapsed: None,
                rho: None,
                elapsed: Duration::ZERO,
            };
            let state = if cfg.experiment == ExperimentKind::DtnEquality {
                mot_solve_equality(&coupled, &rhs)?
            } else {
                let sys = contact_system(mesh, &coupled, &rhs, cfg.multiplier)?;
                let uz = uzawa_for(cfg, || lag0_response_bound(&sys))?;
                let sol = solve_constrained(&sys, &uz, cfg.variant)?;
                if cfg.compare_variants {
                    let alt = solve_constrained(&sys, &uz, other(cfg.variant))?;
                    out.variant_difference = Some(
                        (0..=grid.n_steps())
                            .map(|n| {
                                let d = l2_rel(&sol.field[n], &alt.field[n], &coupled.trace_mass);
                                d.unwrap_or(0.0)
                            })
                            .collect(),
                    );
                    out.other_elapsed = Some(alt.elapsed);
                }
                out.rho = Some(uz.rho);
                let st = sol.to_mot_state(&coupled);
                out.solution = Some(sol);
                st
            };
            out.history = (0..=state.n_steps()).map(|n| state.nodal_trace(n)).collect();
            if forcing == Forcing::Sphere && cfg.experiment == ExperimentKind::DtnEquality {
                let (err, norm) =
                    l2_spacetime_error_analytic(&out.history, mesh, &grid, |t, _| sphere_exact_u(t), &[4.0])?;
                out.exact_error = Some((err, if norm > 0.0 { err / norm } else { err }));
            }
            out.state = Some(state);
            out.elapsed = start.elapsed();
            Ok(out)
        }
        ExperimentKind::Punch => {
            let (sub, _) = mesh.contact_submesh()?;
            let v = series_cached(cache.as_ref(), &sub, &grid, OperatorKind::SingleLayerConstant, &cfg.quadrature)?;
            let all: Vec<usize> = (0..sub.n_vertices()).collect();
            let rhs = load_trace(cfg, forcing, &sub, &grid, &all)?;
            let sys = punch_system(&sub, &grid, v, &rhs, cfg.multiplier)?;
            let uz = uzawa_for(cfg, || lag0_response_bound(&sys))?;
            let sol = solve_constrained(&sys, &uz, cfg.variant)?;
            let energy = energy_norm_collocated(&sol.field, &sys.series)?;
            Ok(RunOutput {
                experiment: cfg.experiment,
                history: sol.field.clone(),
                mesh: sub,
                grid,
                state: None,
                solution: Some(sol),
                dof: all.len() * grid.n_steps(),
                energy: Some(energy),
                exact_error: None,
                variant_difference: None,
                other_elapsed: None,
                rho: Some(uz.rho),
                elapsed: start.elapsed(),
            })
        }
    }
}

/// `‖a − b‖_M / ‖b‖_M`, `None` when `b` vanishes.
fn l2_rel(a: &DVector<f64>, b: &DVector<f64>, m: &nalgebra::DMatrix<f64>) -> Option<f64> {
    let d = a - b;
    let num = d.dot(&(m * &d)).max(0.0).sqrt();
    let den = b.dot(&(m * b)).max(0.0).sqrt();
    (den > 0.0).then(|| num / den)
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    run_on(cfg, &cfg.geometry.build()?)
}

/// Solver facts of one study run.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub level: usize,
    pub converged: bool,
    pub report: Option<ComplementarityReport>,
    /// Smallest multiplier entry over all steps.
    pub min_multiplier: Option<f64>,
    pub energy: Option<f64>,
    pub elapsed: Duration,
}

impl RunRecord {
    fn of(level: usize, out: &RunOutput) -> Self {
        let sol = out.solution.as_ref();
        RunRecord {
            level,
            converged: out.converged(),
            report: sol.map(|s| s.report),
            min_multiplier: sol.map(|s| s.multiplier.iter().flat_map(|y| y.iter().copied()).fold(f64::INFINITY, f64::min)),
            energy: out.energy,
            elapsed: out.elapsed,
        }
    }
}

/// Rows of a study, plus the error that stopped it early.
#[derive(Debug)]
pub struct StudyOutcome {
    pub rows: Vec<StudyRow>,
    pub failure: Option<Error>,
    /// Reference energy or norm used for relative errors.
    pub reference_value: Option<f64>,
    pub reference: Option<RunRecord>,
    pub runs: Vec<RunRecord>,
}

impl StudyOutcome {
    pub fn final_rate(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.alpha_vs_prev)
    }
}

/// Refinement study over `cfg.levels`. Dirichlet-to-Neumann runs on the
/// sphere are compared with the exact trace; contact runs with the
/// prolonged-to reference level in `L²([0,T]×Γ)`; punch runs by relative
/// energy error against the reference level.
pub fn run_study(cfg: &ExperimentConfig) -> Result<StudyOutcome> {
    cfg.validate()?;
    if cfg.levels.is_empty() {
        return Err(Error::InvalidArgument("a study needs at least one level".into()));
    }
    let exact = cfg.experiment == ExperimentKind::DtnEquality && cfg.forcing_kind()? == Forcing::Sphere;
    let reference = if exact {
        None
    } else {
        let level = cfg
            .reference_level
            .ok_or_else(|| Error::InvalidArgument("this study needs a reference level".into()))?;
        Some((level, run_on(cfg, &cfg.geometry.at_level(level)?.build()?)?))
    };
    let reference_record = reference.as_ref().map(|(level, r)| RunRecord::of(*level, r));
    let reference = reference.map(|(_, r)| r);
    let mut runs = Vec::new();
    let reference_value = match &reference {
        Some(r) if cfg.experiment == ExperimentKind::Punch => r.energy,
        Some(r) => Some(l2_spacetime(&r.history, &r.mesh, &r.grid)?),
        None => None,
    };
    let mut rows: Vec<StudyRow> = Vec::new();
    for &level in &cfg.levels {
        let mut step = || -> Result<StudyRow> {
            let mesh = cfg.geometry.at_level(level)?.build()?;
            let out = run_on(cfg, &mesh)?;
            runs.push(RunRecord::of(level, &out));
            if !out.converged() {
                return Err(Error::NotConverged(format!("Uzawa iteration at level {level}")));
            }
            let error = match (&reference, reference_value) {
                (None, _) => out.exact_error.map(|e| e.1).unwrap_or(f64::NAN),
                (Some(_), Some(e_ref)) if cfg.experiment == ExperimentKind::Punch => {
                    (out.energy.unwrap_or(0.0) - e_ref).abs() / e_ref
                }
                (Some(r), Some(norm)) => {
                    let p = prolong(&out.history, &out.mesh, &out.grid, &r.mesh, &r.grid)?;
                    let e = l2_spacetime_error(&p, &r.history, &r.mesh, &r.grid)?;
                    if norm > 0.0 { e / norm } else { e }
                }
                (Some(_), None) => f64::NAN,
            };
            Ok(StudyRow {
                level,
                n_triangles: mesh.n_triangles(),
                dof: out.dof,
                dt: out.grid.dt(),
                cfl: out.grid.dt() / mesh_stats(&mesh).h_max,
                error,
                alpha_vs_prev: None,
            })
        };
        match step() {
            Ok(mut row) => {
                if let Some(prev) = rows.last() {
                    row.alpha_vs_prev = convergence_rate(prev.error, prev.dof as f64, row.error, row.dof as f64).ok();
                }
                rows.push(row);
            }
            Err(e) => {
                return Ok(StudyOutcome { rows, failure: Some(e), reference_value, reference: reference_record, runs });
            }
        }
    }
    Ok(StudyOutcome { rows, failure: None, reference_value, reference: reference_record, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn screen_cfg(kind: ExperimentKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(kind, Geometry::Screen { half_width: 1.0, n: 4, contact: 0.5 }, 1.0);
        cfg.dt = Some(0.5);
        cfg.auto_rho = true;
        cfg
    }

    #[test]
    fn config_needs_exactly_one_of_dt_and_cfl() {
        let mut cfg = screen_cfg(ExperimentKind::Contact);
        assert!(cfg.validate().is_ok());
        cfg.cfl = Some(0.6);
        assert!(cfg.validate().is_err());
        cfg.dt = None;
        assert!(cfg.validate().is_ok());
        cfg.cfl = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_mesh_file_is_rejected() {
        let mut cfg = screen_cfg(ExperimentKind::Contact);
        cfg.geometry = Geometry::File { path: "/nonexistent/mesh.txt".into() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_forcings_follow_the_geometry() {
        let cfg = screen_cfg(ExperimentKind::Punch);
        assert_eq!(cfg.forcing_kind().unwrap(), Forcing::Builtin(BuiltinForcing::PunchScreen));
        let mut cfg = ExperimentConfig::new(ExperimentKind::DtnEquality, Geometry::Icosphere { level: 1 }, 5.0);
        assert_eq!(cfg.forcing_kind().unwrap(), Forcing::Sphere);
        cfg.forcing = Some("bogus".into());
        assert!(cfg.forcing_kind().is_err());
    }

    #[test]
    fn levels_replace_the_resolution() {
        let g = Geometry::Cube { half_width: 2.0, n: 2, contact: "all".into() };
        assert_eq!(g.at_level(5).unwrap(), Geometry::Cube { half_width: 2.0, n: 5, contact: "all".into() });
        assert!(Geometry::File { path: "m".into() }.at_level(1).is_err());
    }

    #[test]
    fn contact_run_reports_variant_difference() {
        let mut cfg = screen_cfg(ExperimentKind::Contact);
        cfg.horizon = 1.5;
        cfg.compare_variants = true;
        let out = run(&cfg).unwrap();
        let diff = out.variant_difference.clone().unwrap();
        assert_eq!(diff.len(), 4);
        assert!(diff.iter().all(|&d| d < 1e-4));
        assert!(out.converged());
        assert_eq!(out.history.len(), 4);
    }

    #[test]
    fn single_level_study_has_no_rate() {
        let mut cfg = ExperimentConfig::new(ExperimentKind::DtnEquality, Geometry::Icosphere { level: 0 }, 5.0);
        cfg.cfl = Some(0.6);
        cfg.levels = vec![0];
        let outcome = run_study(&cfg).unwrap();
        assert!(outcome.failure.is_none());
        assert_eq!(outcome.rows.len(), 1);
        assert!(outcome.rows[0].alpha_vs_prev.is_none());
        assert!(outcome.rows[0].error > 0.0 && outcome.rows[0].error < 1.0);
    }
}
