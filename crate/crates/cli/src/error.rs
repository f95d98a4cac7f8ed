use std::fmt;

use serde::Serialize;

/// Failure classes, each with its own process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Flag,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Flag => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn flag(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Flag, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Data, message: message.into() }
    }

    /// Prefixes the message with the file or flag it concerns.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: ErrorKind,
            code: i32,
            message: &'a str,
        }
        serde_json::to_string(&Line { error: self.kind, code: self.kind.exit_code(), message: &self.message })
            .expect("error line serializes")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<cona::Error> for CliError {
    fn from(e: cona::Error) -> Self {
        use cona::Error::*;
        let kind = match &e {
            BadTemperature(_) | BadStep(_) | MeaninglessCombination { .. } | UnknownRecipe(_) | InvalidConfig(_)
            | BadParts { .. } | StepOutOfRange { .. } => ErrorKind::Flag,
            NonFiniteValue(_) | ZeroRow { .. } | NotNormalized { .. } => ErrorKind::Numeric,
            ShapeMismatch { .. } | IncompatibleShapes(_) | DuplicateId(_) | EmptyIndex | UnknownGroundTruthId(_)
            | Format(_) | Io(_) | Json(_) => ErrorKind::Data,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}
