//! Leakage analysis over execution traces.
//!
//! Traces come from the built-in MiniVM tracer or from any external tracer
//! writing the raw trace format. They are preprocessed into layout-independent
//! form and scored with trace comparison, whole-trace mutual information and
//! single-instruction mutual information.

pub mod analysis;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod testcase;
pub mod trace;
pub mod vm;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] trace::FormatError),
    #[error(transparent)]
    Asm(#[from] vm::AsmError),
    #[error(transparent)]
    Vm(#[from] vm::VmError),
    #[error(transparent)]
    Gen(#[from] testcase::GenError),
    #[error(transparent)]
    Preprocess(#[from] preprocess::PreprocessError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
    #[error(transparent)]
    Symbol(#[from] report::SymbolError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("stage {stage} failed: {source}")]
    Stage { stage: &'static str, source: Box<Error> },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }

    /// True for errors caused by invalid user input rather than a failing stage.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
