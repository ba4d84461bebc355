use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what} component {index} = {value} lies outside [{lo}, {hi}]")]
    DomainViolation {
        what: &'static str,
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("evaluation budget of {budget} exhausted")]
    BudgetExhausted { budget: u64 },
    #[error("plant produced a non-finite output component {index}")]
    NonFiniteOutput { index: usize },
    #[error("invalid plant: {0}")]
    InvalidPlant(String),
    #[error("direction sampler drew a zero vector {attempts} times in a row")]
    ZeroVectorDraw { attempts: usize },
    #[error("origin lies outside the input domain (component {index})")]
    OriginOutsideDomain { index: usize },
    #[error("best control leaves the output box (loss {loss})")]
    NoAcceptableControl { loss: f64 },
    #[error("origin output is not inside the output box under the given control")]
    OriginNotAcceptable,
    #[error("insufficient regression samples: have {have}, need {need}")]
    InsufficientSamples { have: usize, need: usize },
    #[error("cutoff directions are degenerate; normal equations not solvable")]
    DegenerateDirections,
    #[error("region intersection is empty ({attempts} sampling attempts)")]
    EmptyIntersection { attempts: usize },
    #[error("all {count} origins failed")]
    AllOriginsFailed { count: usize },
    #[error("waypoint {index} infeasible: {reason}")]
    WaypointInfeasible { index: usize, reason: String },
    #[error("state-feedback mode needs n_out == n_in (n_in = {n_in}, n_out = {n_out})")]
    StateFeedbackDimMismatch { n_in: usize, n_out: usize },
    #[error("grid audit supports at most 3 input dimensions, got {n_in}")]
    DimensionTooHigh { n_in: usize },
    #[error("library format version {found} is not supported (expected {expected})")]
    FormatVersionMismatch { found: u64, expected: u32 },
    #[error("corrupt library file: {0}")]
    CorruptFile(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {}", .0.join("; "))]
    ConfigInvalid(Vec<String>),
    #[error("file unreadable: {path}: {source}")]
    FileUnreadable {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Module that owns the error, used for machine-readable CLI error lines.
    pub fn module(&self) -> &'static str {
        use Error::*;
        match self {
            DimensionMismatch { .. }
            | DomainViolation { .. }
            | BudgetExhausted { .. }
            | NonFiniteOutput { .. }
            | InvalidPlant(_) => "plant",
            ZeroVectorDraw { .. } | OriginOutsideDomain { .. } => "spaces",
            NoAcceptableControl { .. } | OriginNotAcceptable => "search",
            InsufficientSamples { .. } | DegenerateDirections => "boundary",
            EmptyIntersection { .. }
            | AllOriginsFailed { .. }
            | WaypointInfeasible { .. }
            | StateFeedbackDimMismatch { .. }
            | FormatVersionMismatch { .. }
            | CorruptFile(_) => "librarybuild",
            DimensionTooHigh { .. } => "oracle",
            InvalidArgument(_) => "core",
            ConfigInvalid(_) | FileUnreadable { .. } => "cli",
            Io(_) | Json(_) => "io",
        }
    }

    pub fn kind(&self) -> &'static str {
        use Error::*;
        match self {
            DimensionMismatch { .. } => "DimensionMismatch",
            DomainViolation { .. } => "DomainViolation",
            BudgetExhausted { .. } => "BudgetExhausted",
            NonFiniteOutput { .. } => "NonFiniteOutput",
            InvalidPlant(_) => "InvalidPlant",
            ZeroVectorDraw { .. } => "ZeroVectorDraw",
            OriginOutsideDomain { .. } => "OriginOutsideDomain",
            NoAcceptableControl { .. } => "NoAcceptableControl",
            OriginNotAcceptable => "OriginNotAcceptable",
            InsufficientSamples { .. } => "InsufficientSamples",
            DegenerateDirections => "DegenerateDirections",
            EmptyIntersection { .. } => "EmptyIntersection",
            AllOriginsFailed { .. } => "AllOriginsFailed",
            WaypointInfeasible { .. } => "WaypointInfeasible",
            StateFeedbackDimMismatch { .. } => "StateFeedbackDimMismatch",
            DimensionTooHigh { .. } => "DimensionTooHigh",
            FormatVersionMismatch { .. } => "FormatVersionMismatch",
            CorruptFile(_) => "CorruptFile",
            InvalidArgument(_) => "InvalidArgument",
            ConfigInvalid(_) => "ConfigInvalid",
            FileUnreadable { .. } => "FileUnreadable",
            Io(_) => "Io",
            Json(_) => "Json",
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
