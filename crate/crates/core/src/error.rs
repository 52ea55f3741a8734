use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit can report.
///
/// Variants are grouped by the process exit code they map to, see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    // configuration
    #[error("config: {0}")]
    Config(String),
    #[error("invalid epsilon for gradient check: {0}")]
    InvalidEpsilon(f64),
    #[error("unknown target: {0}")]
    UnknownTarget(String),

    // data / format
    #[error("store i/o at {path}: {source}")]
    StoreIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {context}: {detail}")]
    Format { context: String, detail: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("bag ids disagree between bags and manifest: {0}")]
    IdMismatch(String),
    #[error("bag {0} carries no planted ground truth")]
    MissingTruth(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target sets differ between reports: {0}")]
    TargetMismatch(String),

    // infeasible
    #[error("empty cohort")]
    EmptyCohort,
    #[error("development set is empty")]
    EmptyDev,
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    #[error("infeasible fold roles: {0}")]
    InfeasibleRoles(String),
    #[error("no evaluable target on the selection fold {0}")]
    SelectionInfeasible(usize),
    #[error("synthetic generation failed: {0}")]
    Generation(String),
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    // numeric
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("all labels are missing, nothing to supervise")]
    NoSupervision,
    #[error("degenerate prevalence {0}, class weights undefined")]
    DegeneratePrevalence(f64),
    #[error("AUC undefined: need at least one positive and one negative")]
    UndefinedAuc,
    #[error("bootstrap gave up after {0} draws without both classes")]
    DegenerateBootstrap(usize),
    #[error("zero variance in {0}")]
    ZeroVariance(String),
    #[error("too few observations: need {need}, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("all paired differences are zero")]
    AllZero,
}

impl Error {
    pub(crate) fn format(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::StoreIo {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data/format, 4 infeasible, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            Config(_) | InvalidEpsilon(_) | UnknownTarget(_) => 2,
            StoreIo { .. } | Format { .. } | Validation(_) | IdMismatch(_) | MissingTruth(_)
            | Shape(_) | TargetMismatch(_) => 3,
            EmptyCohort | EmptyDev | InfeasibleSplit(_) | InfeasibleRoles(_)
            | SelectionInfeasible(_) | Generation(_) | DegenerateSplit(_) => 4,
            Numeric(_) | NoSupervision | DegeneratePrevalence(_) | UndefinedAuc
            | DegenerateBootstrap(_) | ZeroVariance(_) | TooFew { .. } | AllZero => 5,
        }
    }

    /// Stable machine-readable identifier, used in CLI error lines.
    pub fn code(&self) -> &'static str {
        use Error::*;
        match self {
            Config(_) => "CONFIG",
            InvalidEpsilon(_) => "INVALID_EPSILON",
            UnknownTarget(_) => "UNKNOWN_TARGET",
            StoreIo { .. } => "STORE_IO",
            Format { .. } => "FORMAT",
            Validation(_) => "VALIDATION",
            IdMismatch(_) => "ID_MISMATCH",
            MissingTruth(_) => "MISSING_TRUTH",
            Shape(_) => "SHAPE",
            TargetMismatch(_) => "TARGET_MISMATCH",
            EmptyCohort => "EMPTY_COHORT",
            EmptyDev => "EMPTY_DEV",
            InfeasibleSplit(_) => "INFEASIBLE_SPLIT",
            InfeasibleRoles(_) => "INFEASIBLE_ROLES",
            SelectionInfeasible(_) => "SELECTION_INFEASIBLE",
            Generation(_) => "GENERATION",
            DegenerateSplit(_) => "DEGENERATE_SPLIT",
            Numeric(_) => "NUMERIC",
            NoSupervision => "NO_SUPERVISION",
            DegeneratePrevalence(_) => "DEGENERATE_PREVALENCE",
            UndefinedAuc => "UNDEFINED_AUC",
            DegenerateBootstrap(_) => "DEGENERATE_BOOTSTRAP",
            ZeroVariance(_) => "ZERO_VARIANCE",
            TooFew { .. } => "TOO_FEW",
            AllZero => "ALL_ZERO",
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::format("csv", e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::format("json", e.to_string())
    }
}
