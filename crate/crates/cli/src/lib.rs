//! Command implementations behind the `lots` and `sketchy` binaries.

pub mod dataset;
pub mod evaluate;
pub mod generate;
pub mod train;

/// `info` unless `RUST_LOG` says otherwise.
pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
}
