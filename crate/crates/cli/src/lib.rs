//! Library side of the `featinv` command: run configuration, run execution and
//! persistence, sweeps, and the smaller encode / analyze / train commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;
pub mod sweep;

pub use error::{CliError, CliResult};

/// Scalar type used by every command.
pub type S = f32;

/// Environment variable selecting the compute device.
pub const DEVICE_ENV: &str = "FEATINV_DEVICE";

/// Only the CPU is supported; anything else is a configuration error.
pub fn check_device() -> CliResult<()> {
    match std::env::var(DEVICE_ENV) {
        Ok(v) if !v.eq_ignore_ascii_case("cpu") => {
            Err(CliError::Config(format!("{DEVICE_ENV}={v}: only \"cpu\" is available")))
        }
        _ => Ok(()),
    }
}
