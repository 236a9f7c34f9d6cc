use std::fmt;

use csm_core::Error as CoreError;

/// Exit status 1: the input, flags or files were wrong.
pub const EXIT_USER: u8 = 1;
/// Exit status 2: the computation itself failed.
pub const EXIT_INTERNAL: u8 = 2;

/// Failure of a command, printed as `error[CODE]: message` on one line.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: &'static str,
    pub exit: u8,
    pub message: String,
}

impl CliError {
    fn new(code: &'static str, exit: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            exit,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("E_USAGE", EXIT_USER, message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new("E_CONFIG", EXIT_USER, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new("E_IO", EXIT_USER, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new("E_DATA", EXIT_USER, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new("E_INTERNAL", EXIT_INTERNAL, message)
    }

    /// The single line written to stderr.
    pub fn line(&self) -> String {
        let flat: Vec<&str> = self.message.split_whitespace().collect();
        format!("error[{}]: {}", self.code, flat.join(" "))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let message = e.to_string();
        match e {
            CoreError::UnknownNode(_) | CoreError::InvalidIntervention(_) => Self::usage(message),
            CoreError::InvalidConfig(_) | CoreError::SimplificationCollapse { .. } => Self::config(message),
            CoreError::Io(_) => Self::io(message),
            CoreError::Checkpoint(_) | CoreError::Json(_) => Self::new("E_CHECKPOINT", EXIT_USER, message),
            CoreError::Divergence { .. } => Self::new("E_DIVERGENCE", EXIT_INTERNAL, message),
            CoreError::Parse { .. }
            | CoreError::Csv(_)
            | CoreError::IndexOutOfRange { .. }
            | CoreError::DegenerateFace { .. }
            | CoreError::InvalidTopology(_)
            | CoreError::TopologyMismatch(_)
            | CoreError::Domain(_)
            | CoreError::EmptyInput(_)
            | CoreError::ZeroVariance
            | CoreError::DegenerateAlignment => Self::data(message),
            CoreError::DimensionMismatch(_) | CoreError::NonFinite(_) => Self::internal(message),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn messages_collapse_to_one_line() {
        let e = CliError::usage("bad\nflag   value");
        assert_eq!(e.line(), "error[E_USAGE]: bad flag value");
    }

    #[test]
    fn core_errors_map_to_exit_classes() {
        let e: CliError = CoreError::UnknownNode("q".into()).into();
        assert_eq!((e.code, e.exit), ("E_USAGE", EXIT_USER));
        let e: CliError = CoreError::Divergence { epoch: 3, term: "kl".into() }.into();
        assert_eq!((e.code, e.exit), ("E_DIVERGENCE", EXIT_INTERNAL));
        let e: CliError = CoreError::NonFinite("x".into()).into();
        assert_eq!(e.exit, EXIT_INTERNAL);
    }
}
