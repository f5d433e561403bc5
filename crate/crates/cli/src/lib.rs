//! Command-line surface: dataset generation, training, generation,
//! evaluation and verification over one flat run config.

pub mod commands;
pub mod config;
pub mod verify;

pub use commands::VerificationFailed;
pub use config::RunConfig;

/// Exit status for a failed command: 2 for verification failures, 1 for
/// everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        2
    } else {
        1
    }
}
