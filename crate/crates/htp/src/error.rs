use std::io;
use std::path::{Path, PathBuf};

use htp_core::patternlm::LmError;
use htp_core::metrics::MetricsError;
use htp_core::nn::NnError;
use htp_core::roadnet::RoadError;
use htp_core::rqvae::RqError;
use htp_core::tokens::TokenError;
use htp_core::traj::TrajError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HtpError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl HtpError {
    /// 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            HtpError::Usage(_) => 1,
            HtpError::Io { .. } | HtpError::Parse { .. } | HtpError::Data(_) => 2,
            HtpError::Numeric(_) => 3,
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        HtpError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        HtpError::Data(msg.into())
    }
}

pub type Result<T, E = HtpError> = std::result::Result<T, E>;

impl From<RqError> for HtpError {
    fn from(e: RqError) -> Self {
        match e {
            RqError::NonFinite { .. } => HtpError::Numeric(e.to_string()),
            other => HtpError::Data(other.to_string()),
        }
    }
}

impl From<LmError> for HtpError {
    fn from(e: LmError) -> Self {
        match e {
            LmError::NonFinite { .. } => HtpError::Numeric(e.to_string()),
            other => HtpError::Data(other.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for HtpError {
            fn from(e: $t) -> Self {
                HtpError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(TokenError, TrajError, RoadError, MetricsError, NnError);
