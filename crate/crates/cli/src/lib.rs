//! `labctl` internals: run specs, run directories, sweeps, fits, evaluation
//! and report emission.
//!
//! Every run owns one directory holding its resolved spec (`run.json`), a
//! manifest, the loss trace as JSONL and CSV, and the latest checkpoint.
//! Everything the reports need is read back from those files, so a run
//! directory can be reported on by itself.

pub mod error;
pub mod evaluate;
pub mod fit;
pub mod report;
pub mod run;
pub mod spec;
pub mod store;
pub mod sweep;

pub use error::LabError;
pub use spec::RunSpec;

/// Environment variable naming the root under which run directories are created.
pub const OUTPUT_ROOT_ENV: &str = "LABCTL_OUT";

/// Output root from [`OUTPUT_ROOT_ENV`], defaulting to `runs`.
pub fn output_root() -> std::path::PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(Into::into)
        .unwrap_or_else(|| "runs".into())
}
