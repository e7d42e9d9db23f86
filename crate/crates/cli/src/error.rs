use kflow::analysis::AnalysisError;
use kflow::cfm::CfmError;
use kflow::checkpoint::CheckpointError;
use kflow::datasets::DataError;
use kflow::koopman::KoopmanError;
use kflow::linalg::LinalgError;
use kflow::sampler::SamplerError;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Data(_) => 3,
            Self::Numerical(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::Data(format!("{}: {e}", path.display()))
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::UnknownDistribution(_) | DataError::BatchTooLarge(_) => {
                Self::Usage(e.to_string())
            }
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        Self::Numerical(e.to_string())
    }
}

impl From<CfmError> for CliError {
    fn from(e: CfmError) -> Self {
        match e {
            CfmError::TimeOutOfRange(_) | CfmError::ZeroCount(_) => Self::Usage(e.to_string()),
            CfmError::Data(d) => d.into(),
            CfmError::Io(_) | CfmError::Format(_) => Self::Data(e.to_string()),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

impl From<KoopmanError> for CliError {
    fn from(e: KoopmanError) -> Self {
        match e {
            KoopmanError::Config(_) => Self::Usage(e.to_string()),
            KoopmanError::Cfm(c) => c.into(),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::BadTimes(_) | SamplerError::Empty => Self::Usage(e.to_string()),
            SamplerError::Io(_) => Self::Data(e.to_string()),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Io(_) | AnalysisError::TooFewPoints { .. } | AnalysisError::NotPlanar(..) => {
                Self::Data(e.to_string())
            }
            AnalysisError::BadBandwidth(_) | AnalysisError::ModeCount { .. } => {
                Self::Usage(e.to_string())
            }
            AnalysisError::Sampler(s) => s.into(),
            AnalysisError::Cfm(c) => c.into(),
            _ => Self::Numerical(e.to_string()),
        }
    }
}
