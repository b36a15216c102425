use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not skew-symmetric (symmetric part {0:.3e})")]
    NotSkewSymmetric(f64),
    #[error("rotation angle {0} is outside the principal logarithm domain")]
    LogOutOfDomain(f64),
    #[error("vector norm {0} is not 1")]
    NotUnit(f64),
    #[error("undefined rotation between antipodal unit vectors")]
    Antipodal,

    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("invalid kinematic chain: {0}")]
    InvalidChain(String),
    #[error("joint state does not match chain: {0}")]
    JointStateMismatch(String),

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("invalid time step {0} s")]
    InvalidTimeStep(f64),
    #[error("timestamp {current} s does not follow {previous} s")]
    NonMonotoneTime { previous: f64, current: f64 },
    #[error("link {0} is not in contact")]
    NotInContact(usize),
    #[error("center of pressure undefined: all forces are zero")]
    NoLoad,

    #[error("infeasible gait: {0}")]
    InfeasibleGait(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("line {line}: {message}")]
    Schema { line: u64, message: String },
    #[error("metrics: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
