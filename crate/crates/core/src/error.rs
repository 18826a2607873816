use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not a proper orthonormal matrix (deviation {0:e})")]
    InvalidRotation(f64),
    #[error("point cloud must contain at least one finite point")]
    InvalidCloud,
    #[error("requested {count} samples from {available} points")]
    CountExceedsPoints { count: usize, available: usize },
    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("sinusoidal embedding needs an even channel count, got {0}")]
    OddChannels(usize),
    #[error("neighborhood size {k} exceeds {centers} centers")]
    KExceedsCenters { k: usize, centers: usize },
    #[error("function evaluation was not finite at coordinate {0}")]
    NonFiniteEvaluation(usize),
    #[error("score matrix already carries a slack row and column")]
    AlreadySlacked,
    #[error("score matrix has no slack row and column")]
    NoSlack,
    #[error("non-finite value in transport input")]
    NonFiniteInput,
    #[error("loss is not finite: positive weight on a zero plan entry")]
    NonFiniteLoss,
    #[error("at least {required} correspondences are required, got {got}")]
    TooFewPoints { required: usize, got: usize },
    #[error("degenerate point configuration")]
    DegenerateConfiguration,
    #[error("no consensus: best hypothesis has {0} inliers")]
    NoConsensus(usize),
    #[error("empty input list")]
    EmptyList,
    #[error("scene generation gave up after {0} attempts")]
    RetryExhausted(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
