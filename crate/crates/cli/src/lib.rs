//! Command-line front end: run configuration, run directories and the
//! train / eval / cluster / visualize / nn commands.

pub mod commands;
pub mod config;

use picie_core::ErrorKind;

pub use config::{resolve, ConfigError, RunConfig};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Exit status for a failed command: 1 usage, 2 data, 3 numerical.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<picie_core::Error>() {
            return match e.kind() {
                ErrorKind::Usage => EXIT_USAGE,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numerical => EXIT_NUMERICAL,
            };
        }
    }
    EXIT_DATA
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let usage: anyhow::Error = ConfigError("bad".into()).into();
        assert_eq!(exit_code(&usage), 1);
        let data: anyhow::Error = picie_core::Error::Format("x".into()).into();
        assert_eq!(exit_code(&data), 2);
        let num: anyhow::Error = picie_core::Error::NonFinite { context: "loss".into(), ids: vec![] }.into();
        assert_eq!(exit_code(&num.context("training")), 3);
        let io: anyhow::Error = std::io::Error::other("disk").into();
        assert_eq!(exit_code(&io), 2);
    }
}
