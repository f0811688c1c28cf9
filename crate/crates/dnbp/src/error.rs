//! Crate-wide error type, mapped onto process exit codes by the CLI.

use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum DnbpError {
    /// Bad flags, unknown config keys, malformed config lines.
    Usage(String),
    /// Missing or malformed files, dataset/checkpoint mismatches.
    Data(String),
    /// Non-finite values, rejected optimizer steps.
    Numeric(String),
    /// Layer-level shape violation inside a network forward pass.
    Shape { network: String, layer: usize, detail: String },
    Io { path: String, source: std::io::Error },
}

impl DnbpError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DnbpError::Io { path: path.display().to_string(), source }
    }

    /// Process exit code: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            DnbpError::Usage(_) => 2,
            DnbpError::Data(_) | DnbpError::Io { .. } => 3,
            DnbpError::Numeric(_) | DnbpError::Shape { .. } => 4,
        }
    }
}

impl fmt::Display for DnbpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DnbpError::Usage(msg) => write!(f, "usage error: {msg}"),
            DnbpError::Data(msg) => write!(f, "data error: {msg}"),
            DnbpError::Numeric(msg) => write!(f, "numeric error: {msg}"),
            DnbpError::Shape { network, layer, detail } => {
                write!(f, "shape error in network {network:?} at layer {layer}: {detail}")
            }
            DnbpError::Io { path, source } => write!(f, "io error on {path}: {source}"),
        }
    }
}

impl std::error::Error for DnbpError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DnbpError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
