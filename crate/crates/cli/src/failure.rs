use std::fmt;

use kkl_core::KklError;

/// Process exit codes.
pub mod code {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const MISSING: i32 = 4;
}

/// An input artifact a subcommand depends on does not exist.
#[derive(Debug)]
pub struct MissingPrerequisite(pub String);

impl fmt::Display for MissingPrerequisite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing {}", self.0)
    }
}

impl std::error::Error for MissingPrerequisite {}

/// The run configuration is malformed or inconsistent.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Exit code for an error chain; the first classifiable cause wins.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<MissingPrerequisite>() {
            return code::MISSING;
        }
        if cause.is::<ConfigError>() {
            return code::CONFIG;
        }
        if let Some(k) = cause.downcast_ref::<KklError>() {
            return match k {
                KklError::NonFinite(_)
                | KklError::Divergence(_)
                | KklError::Escape { .. }
                | KklError::StepSizeUnderflow { .. } => code::NUMERICAL,
                KklError::Format { .. } => code::OTHER,
                _ => code::CONFIG,
            };
        }
    }
    code::OTHER
}
