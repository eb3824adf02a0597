use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("corpus layout: class directory `{dir}` not found under {root}")]
    MissingClassDir { root: PathBuf, dir: String },

    #[error("class `{class}` has no images")]
    EmptyClass { class: String },

    #[error("cannot stratify: class `{class}` has {count} record(s), need at least 2")]
    Stratification { class: String, count: usize },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("augmentation must run on unit-range images before normalisation")]
    Ordering,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("synthetic data policy violation: {0}")]
    PolicyViolation(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("parameter schema mismatch: {0}")]
    Schema(SchemaDiff),

    #[error("malformed archive {path}: {message}")]
    Archive { path: PathBuf, message: String },

    #[error("layer probe error: {0}")]
    Probe(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("missing prerequisite {path}: run `{step}` first")]
    MissingPrerequisite { path: PathBuf, step: String },

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Parameter-name differences between an archive and the schema it was
/// expected to satisfy.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct SchemaDiff {
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
    /// `(name, expected shape, found shape)`
    pub shape_mismatch: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl SchemaDiff {
    pub fn is_empty(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.shape_mismatch.is_empty()
    }
}

impl std::fmt::Display for SchemaDiff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if !self.missing.is_empty() {
            parts.push(format!("missing [{}]", self.missing.join(", ")));
        }
        if !self.unexpected.is_empty() {
            parts.push(format!("unexpected [{}]", self.unexpected.join(", ")));
        }
        for (name, want, got) in &self.shape_mismatch {
            parts.push(format!("`{name}` expected {want:?} found {got:?}"));
        }
        write!(f, "{}", parts.join("; "))
    }
}
