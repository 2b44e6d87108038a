mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tdbem::cache::BlockCache;
use tdbem::experiments::{run, run_study};
use tdbem::mesh::{gen_cube, gen_icosphere, gen_screen, mesh_stats, parse_face_set, write_mesh};
use tdbem::Error;

use config::RunArgs;

#[derive(Parser)]
#[command(name = "tdbem", version, about = "Time-domain Galerkin boundary elements for wave contact problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a mesh file.
    Mesh(MeshArgs),
    /// Run one experiment and write its outputs.
    Solve(RunArgs),
    /// Run a refinement study and write a convergence table.
    Study(StudyArgs),
    /// Inspect or clear a block cache directory.
    Cache(CacheArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Shape {
    Screen,
    Cube,
    Icosphere,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long, value_enum)]
    shape: Shape,
    #[arg(long, default_value_t = 2.0)]
    half_width: f64,
    /// Cells per side (screen, cube faces).
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Contact half width for screens, a face list such as "top,front,right" or "all" for cubes.
    #[arg(long)]
    contact: Option<String>,
    /// Subdivision level of the icosphere.
    #[arg(long, default_value_t = 1)]
    level: usize,
    #[arg(long, short, default_value = "mesh.txt")]
    out: PathBuf,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma separated refinement levels.
    #[arg(long, value_delimiter = ',')]
    levels: Vec<usize>,
    #[arg(long)]
    reference_level: Option<usize>,
}

#[derive(Args)]
struct CacheArgs {
    #[arg(value_enum)]
    action: CacheAction,
    #[arg(long)]
    dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CacheAction {
    List,
    Clear,
}

/// Process exit status with a message.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    pub fn not_converged(message: impl Into<String>) -> Self {
        Failure { code: 3, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_)
            | Error::Parse { .. }
            | Error::InvalidMesh(_)
            | Error::EmptyMesh
            | Error::Dimension(_)
            | Error::Geometry(_) => 2,
            Error::Divergence { .. } | Error::NotConverged(_) => 3,
            Error::SingularSystem | Error::Instability { .. } | Error::NonFiniteForcing { .. } => 4,
            Error::Cache(_) | Error::Io(_) => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 1, message: e.to_string() }
    }
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("TDBEM_THREADS") {
        let n: usize = v.parse().map_err(|_| Failure::usage(format!("TDBEM_THREADS must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(Failure::usage("TDBEM_THREADS must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure { code: 1, message: e.to_string() })?;
    }
    Ok(())
}

fn cmd_mesh(a: &MeshArgs) -> Result<(), Failure> {
    let mesh = match a.shape {
        Shape::Screen => {
            let contact = match &a.contact {
                Some(s) => s.parse().map_err(|_| Failure::usage(format!("screen contact must be a half width, got '{s}'")))?,
                None => a.half_width,
            };
            gen_screen(a.half_width, a.n, contact)?
        }
        Shape::Cube => gen_cube(a.half_width, a.n, &parse_face_set(a.contact.as_deref().unwrap_or("all"))?)?,
        Shape::Icosphere => gen_icosphere(a.level)?,
    };
    write_mesh(&mesh, &a.out)?;
    let s = mesh_stats(&mesh);
    println!(
        "wrote {}: {} triangles, {} vertices, {} contact triangles, h_max {:.6}, h_min {:.6}",
        a.out.display(),
        s.n_triangles,
        s.n_vertices,
        mesh.contact_triangles().len(),
        s.h_max,
        s.h_min
    );
    Ok(())
}

fn cmd_solve(a: &RunArgs) -> Result<(), Failure> {
    let cfg = a.build()?;
    let out = run(&cfg)?;
    output::write_run(&cfg, &out, a.deterministic)?;
    output::print_run(&cfg, &out);
    if !out.converged() {
        return Err(Failure::not_converged("Uzawa iteration reached max_iter without meeting the tolerances"));
    }
    Ok(())
}

fn cmd_study(a: &StudyArgs) -> Result<(), Failure> {
    let mut cfg = a.run.build()?;
    if !a.levels.is_empty() {
        cfg.levels = a.levels.clone();
    }
    if a.reference_level.is_some() {
        cfg.reference_level = a.reference_level;
    }
    let outcome = run_study(&cfg)?;
    let path = output::write_study(&cfg, &outcome, a.run.deterministic)?;
    output::print_study(&outcome);
    println!("wrote {}", path.display());
    if let Some(e) = outcome.failure {
        return Err(e.into());
    }
    if !tdbem::analysis::is_monotone(&outcome.rows) {
        return Err(Failure::not_converged("errors do not decrease monotonically across levels"));
    }
    Ok(())
}

fn cmd_cache(a: &CacheArgs) -> Result<(), Failure> {
    if !a.dir.is_dir() {
        return Err(Failure::usage(format!("{} is not a directory", a.dir.display())));
    }
    let cache = BlockCache::new(&a.dir)?;
    match a.action {
        CacheAction::List => {
            let entries = cache.entries()?;
            for (key, size) in &entries {
                println!("{key}\t{size}");
            }
            let total: u64 = entries.iter().map(|e| e.1).sum();
            println!("{} entries, {total} bytes", entries.len());
        }
        CacheAction::Clear => println!("removed {} entries", cache.clear()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match &cli.command {
        Command::Mesh(a) => cmd_mesh(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Study(a) => cmd_study(a),
        Command::Cache(a) => cmd_cache(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
