use std::fmt::Display;

/// Exit code for runtime failures (I/O, corrupt files, numerical errors).
pub const RUNTIME: u8 = 1;
/// Exit code for invalid flags, configs or incompatible inputs.
pub const USAGE: u8 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub fn usage(message: impl Display) -> CliError {
    CliError { code: USAGE, message: message.to_string() }
}

pub fn runtime(message: impl Display) -> CliError {
    CliError { code: RUNTIME, message: message.to_string() }
}

impl From<vidpred_core::Error> for CliError {
    fn from(e: vidpred_core::Error) -> Self {
        use vidpred_core::Error::*;
        match e {
            Config(_) | InvalidArgument(_) => usage(e),
            _ => runtime(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        runtime(e)
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        runtime(e)
    }
}

impl From<candle_core::Error> for CliError {
    fn from(e: candle_core::Error) -> Self {
        runtime(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        runtime(e)
    }
}
