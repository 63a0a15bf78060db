use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("dimension mismatch: expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("oracle scale exceeded: {sites} sites (limit {limit})")]
    ScaleExceeded { sites: usize, limit: usize },

    #[error("quadrature did not converge after {nodes} nodes per site (last change {change:e})")]
    QuadratureNonConvergence { nodes: usize, change: f64 },

    #[error("singular kernel: {0}")]
    SingularKernel(String),

    #[error("flow breakdown at k = {k:e}: {detail}")]
    FlowBreakdown { k: f64, detail: String },

    #[error("step control failed to converge near k = {k:e}")]
    StepControl { k: f64 },

    #[error("field value {value} outside grid range [{lo}, {hi}]")]
    OutsideGrid { value: f64, lo: f64, hi: f64 },

    #[error("maximization did not converge at argument {at}")]
    MaximizationNonConvergence { at: f64 },

    #[error("sampler acceptance rate {0:.4} below 0.05")]
    LowAcceptance(f64),

    #[error("k-grid does not match the flow trajectory: {0}")]
    GridMismatch(String),

    #[error("momentum mode {mode} off the dual lattice (N = {n})")]
    OffLattice { mode: usize, n: usize },

    #[error("empty sample batch")]
    EmptyBatch,

    #[error("table is not convex: second difference {value:e} at index {index}")]
    NonConvex { index: usize, value: f64 },

    #[error("finite-difference step underflow")]
    StepUnderflow,

    #[error("vanishing propagator on leg {0}")]
    VanishingPropagator(usize),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("state outside the Fock basis: {0}")]
    StateOutsideBasis(String),

    #[error("audit link `{link}` failed: residual {residual:e} > tolerance {tolerance:e}")]
    LinkFailed {
        link: String,
        residual: f64,
        tolerance: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors that signal an oracle being asked to work beyond desk scale.
    pub fn is_scale_exceeded(&self) -> bool {
        matches!(self, Error::ScaleExceeded { .. })
    }

    /// Errors that signal a numerical breakdown rather than bad input.
    pub fn is_numerical_breakdown(&self) -> bool {
        matches!(
            self,
            Error::FlowBreakdown { .. }
                | Error::StepControl { .. }
                | Error::QuadratureNonConvergence { .. }
                | Error::MaximizationNonConvergence { .. }
                | Error::SingularKernel(_)
                | Error::LowAcceptance(_)
                | Error::StepUnderflow
                | Error::VanishingPropagator(_)
                | Error::DegenerateFit(_)
                | Error::LinkFailed { .. }
        )
    }
}
