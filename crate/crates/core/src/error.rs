use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Every variant maps to a stable machine-parseable
/// code via [`Error::code`], which the CLI prints on failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("missing feature file for video '{video_id}'")]
    MissingFeatures { video_id: String },

    #[error("feature dimension mismatch: corpus has D={expected}, video '{video_id}' has D={found}")]
    DimMismatch {
        video_id: String,
        expected: usize,
        found: usize,
    },

    #[error("feature file for '{video_id}' has {found} bytes, header implies {expected}")]
    FeatureSize {
        video_id: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid record '{video_id}': {}", violations.join("; "))]
    InvalidRecord {
        video_id: String,
        violations: Vec<String>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid generator spec: {0}")]
    GenSpec(String),

    #[error("cannot pack {n_instances} instances into {t} snippets with min_gap={min_gap} (video index {video_index})")]
    InfeasiblePacking {
        video_index: usize,
        n_instances: usize,
        t: usize,
        min_gap: usize,
    },

    #[error("class {class} has no point annotations in the corpus")]
    ClassWithoutPoints { class: usize },

    #[error("prototype memory used before initialization")]
    MemoryUninitialized,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate span [{start}, {end})")]
    DegenerateSpan { start: f64, end: f64 },

    #[error("training diverged (non-finite loss) in {stage} at step {step}")]
    Diverged { stage: &'static str, step: usize },

    #[error("no reliable proposals found anywhere in the corpus; cannot train instance stage")]
    NoReliableProposals,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Stable short code for machine consumption (one per variant).
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Json { .. } => "E_JSON",
            Error::MissingFeatures { .. } => "E_MISSING_FEATURES",
            Error::DimMismatch { .. } => "E_DIM_MISMATCH",
            Error::FeatureSize { .. } => "E_FEATURE_SIZE",
            Error::InvalidRecord { .. } => "E_INVALID_RECORD",
            Error::Config(_) => "E_CONFIG",
            Error::GenSpec(_) => "E_GEN_SPEC",
            Error::InfeasiblePacking { .. } => "E_INFEASIBLE_PACKING",
            Error::ClassWithoutPoints { .. } => "E_CLASS_WITHOUT_POINTS",
            Error::MemoryUninitialized => "E_MEMORY_UNINITIALIZED",
            Error::Shape(_) => "E_SHAPE",
            Error::DegenerateSpan { .. } => "E_DEGENERATE_SPAN",
            Error::Diverged { .. } => "E_DIVERGED",
            Error::NoReliableProposals => "E_NO_RELIABLE_PROPOSALS",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::Stage { .. } => "E_STAGE",
        }
    }

    pub fn stage(stage: &'static str, source: Error) -> Error {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
