//! Error taxonomy for the pose estimation pipeline.
//!
//! Every failure is classified into one of three families so that the CLI
//! can map it to a stable process exit code:
//!
//! * configuration and usage errors (`Config`, `Usage`) exit with code 1,
//! * data, image, and I/O errors (`Data`, `Image`, `Io`) exit with code 2,
//! * numeric and contract errors (`Numeric`, `Contract`) exit with code 3.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failures surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value or combination (e.g. an unknown override
    /// key, or an end-to-end regime requested without heatmap concatenation).
    #[error("config error: {0}")]
    Config(String),

    /// Semantically invalid command-line usage not caught by argument parsing.
    #[error("usage error: {0}")]
    Usage(String),

    /// Filesystem failure, tagged with the path that produced it.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or out-of-domain input data (manifest fields, labels,
    /// unsupported format variants).
    #[error("data error: {0}")]
    Data(String),

    /// Image decode or encode failure.
    #[error("image error: {0}")]
    Image(String),

    /// Non-finite value produced where a finite one is required
    /// (e.g. a NaN loss during training).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Internal contract violation such as a shape mismatch between
    /// components that must agree.
    #[error("contract violation: {0}")]
    Contract(String),
}

impl Error {
    /// Stable process exit code for this error family.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 1,
            Error::Io { .. } | Error::Data(_) | Error::Image(_) => 2,
            Error::Numeric(_) | Error::Contract(_) => 3,
        }
    }

    /// Convenience constructor for `Io` that captures the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_family_mapping() {
        assert_eq!(Error::Config("x".into()).exit_code(), 1);
        assert_eq!(Error::Usage("x".into()).exit_code(), 1);
        assert_eq!(
            Error::io("/tmp/f", std::io::Error::new(std::io::ErrorKind::NotFound, "gone"))
                .exit_code(),
            2
        );
        assert_eq!(Error::Data("x".into()).exit_code(), 2);
        assert_eq!(Error::Image("x".into()).exit_code(), 2);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 3);
        assert_eq!(Error::Contract("x".into()).exit_code(), 3);
    }
}
