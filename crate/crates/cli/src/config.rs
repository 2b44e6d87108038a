use std::path::PathBuf;

use clap::Args;
use tdbem::experiments::{ExperimentConfig, ExperimentKind, Geometry, LoadKind};
use tdbem::timebasis::SpatialBasis;
use tdbem::vi_solvers::UzawaVariant;

use crate::{Failure, Shape};

/// Flags shared by `solve` and `study`; they override values from `--config`.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// dtn-equality, contact or punch.
    #[arg(long)]
    pub experiment: Option<String>,
    #[arg(long, value_enum)]
    pub shape: Option<Shape>,
    /// Read the surface from a mesh file instead of generating it.
    #[arg(long, conflicts_with = "shape")]
    pub mesh: Option<PathBuf>,
    #[arg(long)]
    pub half_width: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub contact: Option<String>,
    #[arg(long)]
    pub level: Option<usize>,
    #[arg(long, conflicts_with = "cfl")]
    pub dt: Option<f64>,
    #[arg(long)]
    pub cfl: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    /// space-time or time-step.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, conflicts_with = "auto_rho")]
    pub rho: Option<f64>,
    /// Use rho = 1/λ_max of the lag-0 pairing response.
    #[arg(long)]
    pub auto_rho: bool,
    #[arg(long)]
    pub tol_rel: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Built-in forcing name or "sphere".
    #[arg(long)]
    pub forcing: Option<String>,
    /// l2 or nodal.
    #[arg(long)]
    pub load: Option<String>,
    /// Multiplier basis: linear or constant.
    #[arg(long)]
    pub multiplier: Option<String>,
    /// Contact: also run the other Uzawa variant and write the difference.
    #[arg(long)]
    pub compare_variants: bool,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Omit timestamps and timings so outputs are byte-reproducible.
    #[arg(long)]
    pub deterministic: bool,
}

fn read_config(path: &PathBuf) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))
}

impl RunArgs {
    fn geometry(&self, base: Option<Geometry>) -> Result<Geometry, Failure> {
        if let Some(path) = &self.mesh {
            return Ok(Geometry::File { path: path.clone() });
        }
        let mut g = match (self.shape, base) {
            (Some(Shape::Screen), _) => Geometry::Screen { half_width: 2.0, n: 4, contact: 1.0 },
            (Some(Shape::Cube), _) => Geometry::Cube { half_width: 2.0, n: 2, contact: "all".into() },
            (Some(Shape::Icosphere), _) => Geometry::Icosphere { level: 1 },
            (None, Some(g)) => g,
            (None, None) => return Err(Failure::usage("give --config, --shape or --mesh")),
        };
        match &mut g {
            Geometry::Screen { half_width, n, contact } => {
                if let Some(h) = self.half_width {
                    *half_width = h;
                }
                if let Some(k) = self.n {
                    *n = k;
                }
                if let Some(c) = &self.contact {
                    *contact = c.parse().map_err(|_| Failure::usage(format!("screen contact must be a number, got '{c}'")))?;
                }
            }
            Geometry::Cube { half_width, n, contact } => {
                if let Some(h) = self.half_width {
                    *half_width = h;
                }
                if let Some(k) = self.n {
                    *n = k;
                }
                if let Some(c) = &self.contact {
                    *contact = c.clone();
                }
            }
            Geometry::Icosphere { level } => {
                if let Some(l) = self.level {
                    *level = l;
                }
            }
            Geometry::File { .. } => {}
        }
        Ok(g)
    }

    /// Configuration from the file (if any) with the flags applied.
    pub fn build(&self) -> Result<ExperimentConfig, Failure> {
        let base = self.config.as_ref().map(read_config).transpose()?;
        let geometry = self.geometry(base.as_ref().map(|c| c.geometry.clone()))?;
        let mut cfg = match base {
            Some(mut c) => {
                c.geometry = geometry;
                c
            }
            None => {
                let kind = self.experiment.as_deref().ok_or_else(|| Failure::usage("--experiment is required without --config"))?;
                let horizon = self.horizon.ok_or_else(|| Failure::usage("--horizon is required without --config"))?;
                ExperimentConfig::new(ExperimentKind::parse(kind)?, geometry, horizon)
            }
        };
        if let Some(k) = &self.experiment {
            cfg.experiment = ExperimentKind::parse(k)?;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if self.dt.is_some() {
            cfg.dt = self.dt;
            cfg.cfl = None;
        }
        if self.cfl.is_some() {
            cfg.cfl = self.cfl;
            cfg.dt = None;
        }
        if let Some(v) = &self.variant {
            cfg.variant = UzawaVariant::parse(v)?;
        }
        if let Some(r) = self.rho {
            cfg.uzawa.rho = r;
            cfg.auto_rho = false;
        }
        if self.auto_rho {
            cfg.auto_rho = true;
        }
        if let Some(t) = self.tol_rel {
            cfg.uzawa.tol_rel = t;
        }
        if let Some(m) = self.max_iter {
            cfg.uzawa.max_iter = m;
        }
        if self.forcing.is_some() {
            cfg.forcing = self.forcing.clone();
        }
        if let Some(l) = &self.load {
            cfg.load = match l.as_str() {
                "l2" => LoadKind::L2,
                "nodal" => LoadKind::Nodal,
                _ => return Err(Failure::usage(format!("unknown load '{l}', expected l2 or nodal"))),
            };
        }
        if let Some(m) = &self.multiplier {
            cfg.multiplier = SpatialBasis::parse(m)?;
        }
        if self.compare_variants {
            cfg.compare_variants = true;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if self.cache_dir.is_some() {
            cfg.cache_dir = self.cache_dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"experiment": "contact", "geometry": {"shape": "screen", "half_width": 2.0, "n": 8, "contact": 1.0},
                "cfl": 1.06, "horizon": 3.0, "uzawa": {"rho": 0.5}}"#,
        )
        .unwrap();
        let args = RunArgs { config: Some(path.clone()), n: Some(16), dt: Some(0.25), ..Default::default() };
        let cfg = args.build().unwrap();
        assert_eq!(cfg.geometry, Geometry::Screen { half_width: 2.0, n: 16, contact: 1.0 });
        assert_eq!((cfg.dt, cfg.cfl), (Some(0.25), None));
        assert_eq!(cfg.uzawa.rho, 0.5);
        assert_eq!(cfg.uzawa.max_iter, 100_000);
        assert_eq!(cfg.variant, UzawaVariant::TimeStep);
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"experiment": "punch", "geometry": {"shape": "icosphere", "level": 1}, "dt": 0.1, "horizon": 1, "colour": 3}"#)
            .unwrap();
        let args = RunArgs { config: Some(path), ..Default::default() };
        assert!(args.build().is_err());
    }

    #[test]
    fn both_dt_and_cfl_in_file_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"experiment": "punch", "geometry": {"shape": "icosphere", "level": 1}, "dt": 0.1, "cfl": 0.6, "horizon": 1}"#)
            .unwrap();
        let err = RunArgs { config: Some(path), ..Default::default() }.build().err().unwrap();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn flags_alone_need_experiment_and_horizon() {
        let args = RunArgs { shape: Some(Shape::Icosphere), cfl: Some(0.6), ..Default::default() };
        assert!(args.build().is_err());
        let args = RunArgs { experiment: Some("dtn-equality".into()), horizon: Some(5.0), ..args };
        let cfg = args.build().unwrap();
        assert_eq!(cfg.geometry, Geometry::Icosphere { level: 1 });
    }
}
