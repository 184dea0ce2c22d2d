//! Command-line orchestration: configuration, fingerprinted stage outputs,
//! and reports.
//!
//! Each stage writes its artifact into the output directory and appends a
//! line to `manifest.txt`. Downstream stages refuse to read an artifact whose
//! manifest key no longer matches the current configuration and inputs.

mod config;
mod manifest;
mod report;
mod stages;

pub use config::{
    DataConfig, ExperimentConfig, NetworkConfig, ProposalConfig, SegmentationConfig, SurrogateConfig, SweepConfig,
    TransferConfig, CONFIG_REFERENCE, DATA_ROOT_ENV,
};
pub use manifest::{key_of, sha256_file, write_atomic, Manifest, ManifestEntry, MANIFEST_FILE};
pub use report::{
    experiment_csv, experiment_table, ExperimentRow, ProposalStats, RunReport, TransferReport, FULL_SCALE_TARGETS,
};
pub use stages::{
    ExtractOutcome, Pipeline, ProposalOutcome, SurrogateOutcome, SvmOutcome, Target, TrainOutcome, TransferOutcome,
    EXPERIMENT_CSV, EXPERIMENT_TABLE, PROPOSALS_FILE,
};

use crate::error::Error;

/// Process exit code for an error: 2 configuration, 4 numeric divergence,
/// 3 anything else a stage can hit (IO, format, staleness, contract).
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } | Error::Numeric(_) => 4,
        Error::Io { .. } | Error::Format { .. } | Error::Contract(_) | Error::Stale { .. } => 3,
    }
}
