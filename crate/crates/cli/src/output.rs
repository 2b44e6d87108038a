use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use tdbem::analysis::write_study_csv;
use tdbem::experiments::{ExperimentConfig, ExperimentKind, RunOutput, StudyOutcome};
use tdbem::mesh::mesh_stats;
use tdbem::mot::write_history_csv;
use tdbem::vi_solvers::ComplementarityReport;

use crate::Failure;

/// Opens `dir/name`, writing the timestamp comment line unless deterministic.
fn create(dir: &Path, name: &str, deterministic: bool) -> Result<BufWriter<File>, Failure> {
    let mut w = BufWriter::new(File::create(dir.join(name))?);
    if !deterministic {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        writeln!(w, "# generated unix_time={secs}")?;
    }
    Ok(w)
}

fn csv_failure(e: csv::Error) -> Failure {
    Failure { code: 1, message: e.to_string() }
}

#[derive(Serialize)]
struct Summary<'a> {
    experiment: &'a str,
    forcing: &'a str,
    triangles: usize,
    vertices: usize,
    h_max: f64,
    dt: f64,
    n_steps: usize,
    cfl: f64,
    dof: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    complementarity: Option<ComplementarityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    energy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spacetime_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    relative_spacetime_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_variant_difference: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    elapsed_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    other_variant_elapsed_s: Option<f64>,
}

fn summary<'a>(cfg: &'a ExperimentConfig, out: &RunOutput, deterministic: bool) -> Summary<'a> {
    let stats = mesh_stats(&out.mesh);
    let sol = out.solution.as_ref();
    Summary {
        experiment: cfg.experiment.name(),
        forcing: cfg.forcing_kind().map(|f| f.name()).unwrap_or("?"),
        triangles: stats.n_triangles,
        vertices: stats.n_vertices,
        h_max: stats.h_max,
        dt: out.grid.dt(),
        n_steps: out.grid.n_steps(),
        cfl: out.grid.dt() / stats.h_max,
        dof: out.dof,
        converged: sol.map(|s| s.converged),
        iterations: sol.map(|s| s.iterations),
        rho: out.rho,
        complementarity: sol.map(|s| s.report),
        energy: out.energy,
        spacetime_error: out.exact_error.map(|e| e.0),
        relative_spacetime_error: out.exact_error.map(|e| e.1),
        max_variant_difference: out.variant_difference.as_ref().map(|d| d.iter().copied().fold(0.0, f64::max)),
        elapsed_s: (!deterministic).then(|| out.elapsed.as_secs_f64()),
        other_variant_elapsed_s: out.other_elapsed.filter(|_| !deterministic).map(|d| d.as_secs_f64()),
    }
}

/// Writes `summary.json`, `history.csv`, `norms.csv` and, for constrained
/// runs, `multiplier.csv`, `iterations.csv` and `variant_difference.csv`.
pub fn write_run(cfg: &ExperimentConfig, out: &RunOutput, deterministic: bool) -> Result<(), Failure> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    let s = summary(cfg, out, deterministic);
    let mut w = BufWriter::new(File::create(dir.join("summary.json"))?);
    serde_json::to_writer_pretty(&mut w, &s).map_err(|e| Failure { code: 1, message: e.to_string() })?;
    writeln!(w)?;
    w.flush()?;

    let grid = out.grid;
    let mut w = create(dir, "history.csv", deterministic)?;
    match (&out.state, cfg.experiment) {
        (Some(state), _) => write_history_csv(state, &mut w)?,
        (None, ExperimentKind::Punch) => {
            let mut c = csv::Writer::from_writer(&mut w);
            c.write_record(["step", "time", "dof_index", "d"]).map_err(csv_failure)?;
            for (n, d) in out.history.iter().enumerate() {
                for (i, v) in d.iter().enumerate() {
                    c.write_record(&[n.to_string(), format!("{}", grid.time(n)), i.to_string(), format!("{v:e}")])
                        .map_err(csv_failure)?;
                }
            }
            c.flush()?;
        }
        (None, _) => {}
    }
    w.flush()?;

    let mut w = create(dir, "norms.csv", deterministic)?;
    let mut c = csv::Writer::from_writer(&mut w);
    c.write_record(["step", "time", "l2_gamma"]).map_err(csv_failure)?;
    for (n, v) in out.step_norms()?.iter().enumerate() {
        c.write_record(&[n.to_string(), format!("{}", grid.time(n)), format!("{v:e}")]).map_err(csv_failure)?;
    }
    c.flush()?;
    drop(c);
    w.flush()?;

    if let Some(sol) = &out.solution {
        let mut w = create(dir, "iterations.csv", deterministic)?;
        sol.write_log_csv(&mut w)?;
        w.flush()?;
        let mut w = create(dir, "multiplier.csv", deterministic)?;
        let mut c = csv::Writer::from_writer(&mut w);
        c.write_record(["step", "time", "index", "y"]).map_err(csv_failure)?;
        for (n, y) in sol.multiplier.iter().enumerate().skip(1) {
            for (i, v) in y.iter().enumerate() {
                c.write_record(&[n.to_string(), format!("{}", grid.time(n)), i.to_string(), format!("{v:e}")])
                    .map_err(csv_failure)?;
            }
        }
        c.flush()?;
        drop(c);
        w.flush()?;
    }
    if let Some(diff) = &out.variant_difference {
        let mut w = create(dir, "variant_difference.csv", deterministic)?;
        let mut c = csv::Writer::from_writer(&mut w);
        c.write_record(["step", "time", "relative_l2_difference"]).map_err(csv_failure)?;
        for (n, d) in diff.iter().enumerate() {
            c.write_record(&[n.to_string(), format!("{}", grid.time(n)), format!("{d:e}")]).map_err(csv_failure)?;
        }
        c.flush()?;
        drop(c);
        w.flush()?;
    }
    Ok(())
}

pub fn print_run(cfg: &ExperimentConfig, out: &RunOutput) {
    let stats = mesh_stats(&out.mesh);
    println!(
        "{} on {} triangles, dt {:.6}, {} steps, {} space-time unknowns",
        cfg.experiment.name(),
        stats.n_triangles,
        out.grid.dt(),
        out.grid.n_steps(),
        out.dof
    );
    if let Some((abs, rel)) = out.exact_error {
        println!("space-time L2 error {abs:.6e} (relative {rel:.6e})");
    }
    if let Some(sol) = &out.solution {
        println!(
            "Uzawa: converged {} after {} iterates, rho {:.4e}, pairing {:.3e} (scaled {:.3e}), min multiplier {:.3e}",
            sol.converged,
            sol.iterations,
            out.rho.unwrap_or(f64::NAN),
            sol.report.pairing,
            sol.report.scaled_pairing,
            sol.report.min_multiplier
        );
    }
    if let Some(e) = out.energy {
        println!("energy {e:.6e}");
    }
    if let Some(d) = &out.variant_difference {
        println!("max relative difference between Uzawa variants {:.3e}", d.iter().copied().fold(0.0, f64::max));
    }
    println!("outputs in {}", cfg.output_dir.display());
}

pub fn write_study(cfg: &ExperimentConfig, outcome: &StudyOutcome, deterministic: bool) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut w = create(&cfg.output_dir, "study.csv", deterministic)?;
    write_study_csv(&outcome.rows, &mut w)?;
    w.flush()?;
    Ok(cfg.output_dir.join("study.csv"))
}

pub fn print_study(outcome: &StudyOutcome) {
    println!("{:>6} {:>10} {:>10} {:>10} {:>8} {:>12} {:>8}", "level", "triangles", "dof", "dt", "cfl", "error", "alpha");
    for r in &outcome.rows {
        println!(
            "{:>6} {:>10} {:>10} {:>10.5} {:>8.4} {:>12.5e} {:>8}",
            r.level,
            r.n_triangles,
            r.dof,
            r.dt,
            r.cfl,
            r.error,
            r.alpha_vs_prev.map(|a| format!("{a:.4}")).unwrap_or_default()
        );
    }
}
