//! Everything around the restoration math: configuration, synthetic data,
//! dataset loading, checkpoint persistence, experiment orchestration over
//! the SNR grid, and report emission. The `commin` binary is a thin CLI
//! over this library.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod report;
pub mod synth;

pub use config::Config;
pub use error::{HarnessError, Result};

/// Serializes tests that touch the process environment or shared
/// directories against each other.
#[cfg(test)]
pub(crate) fn env_lock() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}
