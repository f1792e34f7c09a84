use std::io;
use std::path::{Path, PathBuf};

/// Crate-wide error type. Variants are grouped roughly by pipeline stage;
/// `exit_code` maps them onto the process exit codes documented for the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("unknown variant label {label:?}")]
    UnknownVariant { label: String },

    #[error("unknown dataset {name:?}")]
    UnknownDataset { name: String },

    #[error("unknown backend {backend_id:?}")]
    UnknownBackend { backend_id: String },

    #[error("invalid combo: {message}")]
    ComboInvalid { message: String },

    #[error("{what} is empty but must contain at least one sample")]
    EmptyInput { what: String },

    #[error("invalid split fractions {fractions:?}: {reason}")]
    InvalidFractions { fractions: [f64; 3], reason: String },

    #[error("split would leave the {part} part empty ({total} samples available)")]
    EmptySplitPart { part: &'static str, total: usize },

    #[error(
        "cannot balance {category}: {machine} machine samples but only {human} human samples"
    )]
    HumanDeficit {
        category: String,
        machine: usize,
        human: usize,
    },

    #[error("text for sample {sample_id} is empty")]
    EmptyText { sample_id: String },

    #[error("backend {backend_id} produced zero token states for sample {sample_id}")]
    ZeroTokens {
        backend_id: String,
        sample_id: String,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("backend {backend_id} unavailable: {message}")]
    BackendUnavailable {
        backend_id: String,
        message: String,
    },

    #[error("duplicate cache key ({sample_id}, {backend_id})")]
    DuplicateKey {
        sample_id: String,
        backend_id: String,
    },

    #[error("corrupt record in {path} at offset {offset}: {detail}")]
    CorruptRecord {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("missing embeddings for {} key(s), e.g. {}", keys.len(), keys.iter().take(3).cloned().collect::<Vec<_>>().join(", "))]
    MissingEmbeddings { keys: Vec<String> },

    #[error("invalid classifier architecture: {message}")]
    ArchInvalid { message: String },

    #[error("checkpoint fingerprint {actual:#018x} does not match expected {expected:#018x}")]
    FingerprintMismatch { expected: u64, actual: u64 },

    #[error("{what} contains a single class; both classes are required")]
    SingleClass { what: String },

    #[error("invalid training configuration: {message}")]
    InvalidTrainConfig { message: String },

    #[error("metric {metric} is undefined: {reason}")]
    UndefinedMetric {
        metric: &'static str,
        reason: String,
    },

    #[error("length mismatch: {left} labels vs {right} predictions")]
    LengthMismatch { left: usize, right: usize },

    #[error("labels must be 0 or 1, got {value}")]
    InvalidLabel { value: u8 },

    #[error("invalid manifest: {message}")]
    ManifestInvalid { message: String },

    #[error("results cannot be combined: {message}")]
    MixedResults { message: String },

    #[error("results file {path} already has rows; pass --resume to continue it")]
    ResultsExist { path: PathBuf },

    #[error("{failed} of {attempted} matrix cell(s) failed; see the failure records")]
    CellsFailed { failed: usize, attempted: usize },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn parse(path: impl AsRef<Path>, line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().to_path_buf(),
            line,
            message: message.into(),
        }
    }

    /// Process exit code used by the CLI: 3 missing input, 4 malformed
    /// data or configuration, 5 backend failure, 6 pipeline failure,
    /// 7 integrity violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => 3,
            Error::Io { .. } => 6,
            Error::Parse { .. }
            | Error::UnknownVariant { .. }
            | Error::UnknownDataset { .. }
            | Error::UnknownBackend { .. }
            | Error::ComboInvalid { .. }
            | Error::InvalidFractions { .. }
            | Error::InvalidTrainConfig { .. }
            | Error::ArchInvalid { .. }
            | Error::InvalidLabel { .. }
            | Error::LengthMismatch { .. }
            | Error::ManifestInvalid { .. } => 4,
            Error::BackendUnavailable { .. } => 5,
            Error::EmptyInput { .. }
            | Error::EmptySplitPart { .. }
            | Error::HumanDeficit { .. }
            | Error::EmptyText { .. }
            | Error::ZeroTokens { .. }
            | Error::DimensionMismatch { .. }
            | Error::NonFinite { .. }
            | Error::MissingEmbeddings { .. }
            | Error::SingleClass { .. }
            | Error::UndefinedMetric { .. }
            | Error::ResultsExist { .. }
            | Error::CellsFailed { .. } => 6,
            Error::DuplicateKey { .. }
            | Error::CorruptRecord { .. }
            | Error::FingerprintMismatch { .. }
            | Error::MixedResults { .. } => 7,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
