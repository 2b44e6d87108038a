use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("empty mesh")]
    EmptyMesh,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("M^0 is singular to working precision; reduce the CFL ratio dt/h")]
    SingularSystem,
    #[error("non-finite solution at time step {step}: the marching scheme is unstable")]
    Instability { step: usize },
    #[error("non-finite forcing value at t = {t}, x = ({x}, {y}, {z})")]
    NonFiniteForcing { t: f64, x: f64, y: f64, z: f64 },
    #[error("Uzawa residual grew for {streak} consecutive iterates{}; choose a smaller rho", at_step(.step))]
    Divergence { streak: usize, step: Option<usize> },
    #[error("not converged: {0}")]
    NotConverged(String),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("block cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn at_step(step: &Option<usize>) -> String {
    match step {
        Some(n) => format!(" at time step {n}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
