//! Error type shared by every stage of the pipeline.

use thiserror::Error;

/// Failures raised by the numerical stages.
///
/// The display strings are stable: the CLI prints them verbatim and tests
/// match on them.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("order deficit: {0}")]
    OrderDeficit(String),
    #[error("degenerate maximum: {0}")]
    DegenerateMaximum(String),
    #[error("non-hyperbolic: {0}")]
    NonHyperbolic(String),
    #[error("square-root branch failure: {0}")]
    SquareRootBranch(String),
    #[error("level-curve stall: {0}")]
    LevelCurveStall(String),
    #[error("non-solvable: mean obstruction ({0})")]
    MeanObstruction(String),
    #[error("small divisor underflow: {0}")]
    SmallDivisor(String),
    #[error("quadrature non-convergence: {0}")]
    Quadrature(String),
    #[error("residual mean in angular components: {0}")]
    ResidualMean(String),
    #[error("k0 not minimal: {0}")]
    NotMinimal(String),
    #[error("higher-multiplicity resonance: {0}")]
    Resonance(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("normal form out of range: {0}")]
    NormalFormRange(String),
    #[error("not in B^(-,1): {0}")]
    NotMinusClass(String),
    #[error("step rejected: {0}")]
    StepRejected(String),
    #[error("twist degeneracy: {0}")]
    TwistDegeneracy(String),
    #[error("iteration diverged: {0}")]
    Diverged(String),
    #[error("base map fold: {0}")]
    Fold(String),
    #[error("exactness violation: {0}")]
    Exactness(String),
    #[error("transport check failed: {0}")]
    TransportCheck(String),
    #[error("constant obstruction: {0}")]
    ConstantObstruction(String),
    #[error("flow-box failed: {0}")]
    FlowBox(String),
    #[error("not in flow-box frame: {0}")]
    NotFlowBox(String),
    #[error("no critical points found: {0}")]
    NoCriticalPoints(String),
    #[error("tail truncation: {0}")]
    Tail(String),
    #[error("window exceeds domain: {0}")]
    Window(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
