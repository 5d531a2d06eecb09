use std::fmt;

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub mod exit {
    pub const CONFIG: u8 = 2;
    pub const ACCOUNTANT: u8 = 3;
    pub const DATA: u8 = 4;
    pub const INFEASIBLE: u8 = 5;
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(exit::CONFIG, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(exit::DATA, message)
    }

    /// Maps a library error raised in a given stage. Infeasible calibration
    /// and invalid parameters keep their own codes regardless of stage.
    pub fn from_lib(stage: u8, err: tokenwalk::Error) -> Self {
        use tokenwalk::Error as E;
        let code = match &err {
            E::Infeasible { .. } => exit::INFEASIBLE,
            E::InvalidParameter(_) => exit::CONFIG,
            _ => stage,
        };
        let message = match &err {
            E::Infeasible { min_achievable, .. } => {
                format!("{err}; minimal feasible epsilon is {min_achievable}")
            }
            _ => err.to_string(),
        };
        Self::new(code, message)
    }

    pub fn io(err: impl fmt::Display) -> Self {
        Self::new(1, format!("i/o error: {err}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Library errors in graph construction and configuration stages.
pub fn cfg(err: tokenwalk::Error) -> CliError {
    CliError::from_lib(exit::CONFIG, err)
}

/// Library errors in accounting stages.
pub fn acct(err: tokenwalk::Error) -> CliError {
    CliError::from_lib(exit::ACCOUNTANT, err)
}

/// Library errors while loading data.
pub fn data(err: tokenwalk::Error) -> CliError {
    CliError::from_lib(exit::DATA, err)
}
