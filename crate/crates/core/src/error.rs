use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch between fields")]
    GridMismatch,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("eigensolver did not converge: residual {residual:.3e} exceeds {tolerance:.3e}")]
    EigenConvergence { residual: f64, tolerance: f64 },

    #[error("degenerate eigenvalues within {gap:.3e} at indices {pairs:?}")]
    Degenerate { pairs: Vec<(usize, usize)>, gap: f64 },

    #[error("occupancy diverges: z^-1 exp(beta mu) = {argument} is not above 1")]
    OccupancyDivergence { argument: f64 },

    #[error("temperature above condensation range for truncation J = {excited}: {detail}")]
    ThermoRange { excited: usize, detail: String },

    #[error("singular expansion system: {0}")]
    SingularSystem(String),

    #[error("gradient flow diverged: {0}")]
    StepSize(String),

    #[error("fast scale under-resolved: h = {spacing:.4e} exceeds epsilon/16 = {limit:.4e}")]
    UnderResolved { spacing: f64, limit: f64 },

    #[error("coupling is not strictly positive: min g = {0:.4e}")]
    NonPositiveCoupling(f64),

    #[error("{what} did not converge after {iterations} iterations (last change {last_change:.3e})")]
    Divergence { what: String, iterations: usize, last_change: f64, history: Vec<f64> },

    #[error("residual check failed: {0}")]
    Residual(String),

    #[error("linear solver failed: {0}")]
    LinearSolver(String),

    #[error("instability: {0}")]
    Instability(String),

    #[error("missing expansion slice: {0}")]
    MissingSlice(String),
}

impl Error {
    /// Stable snake-case name of the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Self::InvalidGrid(_) => "invalid_grid",
            Self::GridMismatch => "grid_mismatch",
            Self::InvalidArgument(_) => "invalid_argument",
            Self::EigenConvergence { .. } => "eigen_convergence",
            Self::Degenerate { .. } => "degenerate",
            Self::OccupancyDivergence { .. } => "occupancy_divergence",
            Self::ThermoRange { .. } => "thermo_range",
            Self::SingularSystem(_) => "singular_system",
            Self::StepSize(_) => "step_size",
            Self::UnderResolved { .. } => "under_resolved",
            Self::NonPositiveCoupling(_) => "non_positive_coupling",
            Self::Divergence { .. } => "divergence",
            Self::Residual(_) => "residual",
            Self::LinearSolver(_) => "linear_solver",
            Self::Instability(_) => "instability",
            Self::MissingSlice(_) => "missing_slice",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
