//! Command-line driver: dataset generation, training, evaluation, gradient
//! verification, ablations, sweeps and run reports.

pub mod commands;
pub mod config;
pub mod manifest;

use egoprompt_core::Error;

pub use commands::{run, Cli, Command};

/// Invalid invocation; maps to exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// 2 for usage and configuration errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Usage(_) | Error::Config { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

/// Caps the global worker pool at `EGOPROMPT_THREADS` when set.
pub fn configure_threads() -> anyhow::Result<Option<usize>> {
    let Ok(raw) = std::env::var("EGOPROMPT_THREADS") else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("EGOPROMPT_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(Some(n))
}
