use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Usage,
    Validation,
    Data,
}

/// A failure reported as one JSON line on standard error.
#[derive(Debug, Serialize)]
pub struct CliError {
    #[serde(rename = "error")]
    pub kind: Kind,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
            path: None,
            key: None,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Kind::Usage, message)
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(Kind::Validation, message)
    }

    pub fn data(path: &Path, message: impl Into<String>) -> Self {
        CliError {
            path: Some(path.to_path_buf()),
            ..Self::new(Kind::Data, message)
        }
    }

    /// Attaches `path` unless the error already names one.
    pub fn at(mut self, path: &Path) -> Self {
        if self.path.is_none() {
            self.path = Some(path.to_path_buf());
        }
        self
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Usage | Kind::Validation => 1,
            Kind::Data => 2,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<lidarpan::Error> for CliError {
    fn from(e: lidarpan::Error) -> Self {
        let kind = if e.is_data_error() {
            Kind::Data
        } else {
            Kind::Validation
        };
        let path = match &e {
            lidarpan::Error::Io { path, .. } => Some(path.clone()),
            _ => None,
        };
        CliError {
            path,
            ..Self::new(kind, e.to_string())
        }
    }
}

/// Shorthand for attaching a file path to core results.
pub trait AtPath<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T> AtPath<T> for lidarpan::Result<T> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| CliError::from(e).at(path))
    }
}
