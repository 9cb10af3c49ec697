use std::path::PathBuf;

use crate::discriminant::Diagnosis;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix has non-finite entries")]
    NonFinite,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("alignment is degenerate: eye points coincide")]
    DegenerateAlignment,

    #[error("eye point {0:?} lies outside the source image")]
    EyeOutsideImage((f64, f64)),

    #[error(
        "within-class scatter is singular after regularization{}",
        .diagnosis.as_ref().map(|d| format!(" ({d})")).unwrap_or_default()
    )]
    SingularScatter { diagnosis: Option<Box<Diagnosis>> },

    #[error("client {0} is degenerate: projected client and impostor means coincide")]
    DegenerateClient(String),

    #[error("no pixels selected for the colour feature")]
    EmptyFeature,

    #[error("histogram binning mismatch")]
    BinningMismatch,

    #[error("no samples for client {0}")]
    NoClientSamples(String),

    #[error("no impostor samples for client {0}")]
    NoImpostorSamples(String),

    #[error("unknown client {0}")]
    UnknownClient(String),

    #[error("bad manifest: {0}")]
    Manifest(String),

    #[error("missing role {role} ({context})")]
    MissingRole { role: &'static str, context: String },

    #[error("geometry mismatch: model expects {expected:?}, got {found:?}")]
    GeometryMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: (usize, usize), found: (usize, usize)) -> Self {
        Error::ShapeMismatch { expected, found }
    }
}
