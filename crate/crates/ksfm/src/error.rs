use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SfmError {
    #[error("malformed subset: {0}")]
    MalformedSubset(String),
    #[error("malformed instance: {0}")]
    MalformedInstance(String),
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("step-size guard violated at t={t}: eta*|h|_inf = {value}")]
    StepSize { t: usize, value: f64 },
    #[error("inconsistent state: {0}")]
    InconsistentState(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, SfmError>;

impl SfmError {
    /// True for errors caused by bad input rather than by solver logic.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            SfmError::MalformedSubset(_)
                | SfmError::MalformedInstance(_)
                | SfmError::SizeLimit(_)
                | SfmError::Domain(_)
                | SfmError::Parameter(_)
                | SfmError::Config(_)
                | SfmError::Io(_)
        )
    }
}
