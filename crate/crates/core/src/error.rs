use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
///
/// `HypothesisViolated` is reserved for model data that break a structural
/// hypothesis of the method (no critical point can exist); everything else is
/// either bad input or a numerical failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at byte {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("unknown identifier `{name}` at byte {position}")]
    UnknownIdentifier { name: String, position: usize },

    #[error("evaluation of `{source_text}` failed at (z={z}, a={age}): {kind}")]
    Eval {
        source_text: String,
        z: f64,
        age: f64,
        kind: EvalErrorKind,
    },

    #[error("coefficient `{name}` failed at node {node}, age {age}: {source}")]
    Coefficient {
        name: &'static str,
        node: usize,
        age: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(
        "mesh-Peclet guard violated at node {node}, age {age}: |d|*h_x/(2D) = {value} >= 1; \
         refine the spatial grid or reduce the drift"
    )]
    PecletViolation { node: usize, age: f64, value: f64 },

    #[error("step matrix lost the M-matrix property at age {age} (diagonal {diag} <= 0); \
             lambda*h_a is too large for this mode, refine the age mesh")]
    StepMatrixNotM { age: f64, diag: f64 },

    #[error("eigen-iteration did not converge after {iterations} iterations (residual {residual})")]
    EigenNonConvergence { iterations: usize, residual: f64 },

    #[error("eigenvector has a negative component {value} beyond tolerance; wrong eigenpair")]
    EigenNotPositive { value: f64 },

    #[error("zero birth kernel: b(0,a) vanishes on all quadrature nodes")]
    ZeroBirthKernel,

    #[error("power iteration stagnated after {iterations} iterations including restarts")]
    PowerIterationStagnation { iterations: usize },

    #[error(
        "hypothesis violated: net reproduction at zero mortality r(Q_0) = {r0} \
         must be {expected} 1 in this mortality regime; no critical intensity exists"
    )]
    HypothesisViolated { r0: f64, expected: &'static str },

    #[error("no bracket for r(Q_lambda) = 1 found below lambda = {lambda_max}")]
    BracketNotFound { lambda_max: f64 },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("Newton corrector diverged after {iterations} iterations (residual {residual})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalErrorKind {
    DivisionByZero,
    NonFinite,
}

impl std::fmt::Display for EvalErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalErrorKind::DivisionByZero => write!(f, "division by zero"),
            EvalErrorKind::NonFinite => write!(f, "non-finite result"),
        }
    }
}

impl Error {
    /// True when the failure means the model violates a structural hypothesis
    /// rather than the numerics breaking down. The CLI maps this to exit code 2.
    pub fn is_hypothesis_violation(&self) -> bool {
        matches!(self, Error::HypothesisViolated { .. })
    }
}
