//! File formats, configuration and the experiment pipeline around
//! `bridgegen-core`.

pub mod checkpoint;
pub mod config;
pub mod formats;
pub mod pipeline;
pub mod plot;

/// Process exit code for a failed command: 2 for configuration errors, 3 for
/// numeric divergence, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<config::ConfigError>().is_some() {
            return 2;
        }
        if let Some(bridgegen_core::Error::Diverged { .. }) = cause.downcast_ref::<bridgegen_core::Error>() {
            return 3;
        }
    }
    1
}
