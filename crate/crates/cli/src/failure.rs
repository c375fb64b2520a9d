use std::fmt;

use cbamnet::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    /// The gradient check ran but the error bound was not met.
    pub const CHECK_FAILED: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERICAL: u8 = 4;
    pub const DEGENERATE_FOLD: u8 = 5;
}

/// A failed command: which stage broke, the exit code, and a message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub stage: &'static str,
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            stage: "config",
            code: exit::CONFIG,
            message: message.into(),
        }
    }

    pub fn at(stage: &'static str) -> impl Fn(Error) -> Failure {
        move |e| Failure {
            stage,
            code: code_for(&e),
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error [{}]: {}", self.stage, self.message)
    }
}

pub fn code_for(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::ShapeMismatch { .. } | Error::InvalidLabel { .. } | Error::NoTrainableParameters => {
            exit::CONFIG
        }
        Error::Io { .. } | Error::Format { .. } | Error::UnsupportedFormat { .. } | Error::EmptyClass(_) => exit::DATA,
        Error::Numerical { .. } | Error::TrainingDiverged { .. } | Error::Graph(_) => exit::NUMERICAL,
        Error::DegenerateFold { .. } => exit::DEGENERATE_FOLD,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_error_kind_has_its_code() {
        let io = Error::Io {
            path: "x".into(),
            source: std::io::Error::other("gone"),
        };
        assert_eq!(code_for(&io), exit::DATA);
        assert_eq!(code_for(&Error::InvalidConfig("k".into())), exit::CONFIG);
        assert_eq!(code_for(&Error::Numerical { op: "exp" }), exit::NUMERICAL);
        assert_eq!(code_for(&Error::DegenerateFold { fold: 1, missing: "Others" }), exit::DEGENERATE_FOLD);
        let f = Failure::at("train")(Error::Numerical { op: "sigmoid" });
        assert_eq!(f.to_string(), "error [train]: non-finite value produced by sigmoid");
    }
}
