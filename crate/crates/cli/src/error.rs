use std::fmt;
use std::process::ExitCode;

/// A failure carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const CONFIG: u8 = 2;
    pub const NUMERIC: u8 = 3;
    pub const CHECKPOINT: u8 = 4;
    pub const DATA: u8 = 5;

    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Self::CONFIG, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Self::DATA, message)
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<rehit::error::Error> for CliError {
    fn from(e: rehit::error::Error) -> Self {
        use rehit::error::Error as E;
        let code = match &e {
            E::InvalidArgument { .. } => Self::CONFIG,
            E::NonFinite { .. } => Self::NUMERIC,
            E::Checkpoint(_) => Self::CHECKPOINT,
            E::Shape { .. } | E::Image { .. } | E::Data(_) | E::Io { .. } => Self::DATA,
        };
        Self::new(code, e.to_string())
    }
}

/// Re-tags any error raised while reading a checkpoint.
pub fn as_checkpoint(e: rehit::error::Error) -> CliError {
    CliError::new(CliError::CHECKPOINT, e.to_string())
}

pub type CliResult<T = ()> = Result<T, CliError>;
