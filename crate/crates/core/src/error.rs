use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported velocity model `{0}`")]
    UnsupportedModel(String),

    #[error("inadmissible velocity grid: {0}")]
    Admissibility(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("exit time: {0}")]
    ExitTime(String),

    #[error("kernel construction failed: {0}")]
    Kernel(String),

    #[error("Fredholm solvability violated at cell {cell}: rank of L is {rank}, expected {expected}")]
    FredholmRank { cell: usize, rank: usize, expected: usize },

    #[error("solver failure at cell {cell}: residual {residual:e} exceeds {tolerance:e}")]
    CellSolve { cell: usize, residual: f64, tolerance: f64 },

    #[error("iterative solve did not converge in {iterations} iterations (final residual {final_residual:e}); history: {history:?}")]
    NoConvergence {
        iterations: usize,
        final_residual: f64,
        history: Vec<f64>,
    },

    #[error("bound violated: {0}")]
    BoundViolation(String),

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("invalid initial data: {0}")]
    InitialData(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
