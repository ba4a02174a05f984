//! Experiment orchestration: build the zoo, optimize suffix sets, run
//! verification, robustness sweeps and the perplexity baseline, and render
//! reports. The CLI is a thin wrapper over this module; the acceptance
//! suite drives it directly.

mod commands;
mod rundir;
mod zoo_build;

pub use commands::{
    baseline_ppl, optimize_suffixes, sweep, verify_suffixes, BaselineOutput, DensityExport,
    OptimizeOpts, OverlayData, SuffixSet, SweepConfig, SweepRow, SweepTable, SystemPrompt,
    SystemPromptSet,
};
pub use rundir::{render_report, reports_by_n, write_summary_csv, ReportInputs, RunDir};
pub use zoo_build::{
    build_zoo, LoadedZoo, ZooBuildConfig, ZooBuildOutput, CONFUSER_BETA_ID, REFERENCE_ID,
    RULE_BASED_ID, SIBLING_SEED_ID, SIBLING_WIDE_ID,
};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum ExpError {
    #[error("zoo build: {0}")]
    ZooBuild(String),
    #[error("run directory {0:?} already exists and is not empty")]
    RunDirExists(std::path::PathBuf),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error(transparent)]
    Zoo(#[from] crate::zoo::ZooError),
    #[error(transparent)]
    Gcg(#[from] crate::gcg::GcgError),
    #[error(transparent)]
    Verify(#[from] crate::verify::VerifyError),
    #[error(transparent)]
    Ppl(#[from] crate::ppl::PplError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(String),
}
