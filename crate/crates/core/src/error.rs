use std::path::PathBuf;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate histogram: image is empty or has a single intensity")]
    DegenerateHistogram,

    #[error("cannot estimate character height: page has no foreground components")]
    CannotEstimateCharHeight,

    #[error("invalid patch geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("strategy unsatisfiable on page '{page}': {strategy} found no pair in {attempts} attempts")]
    StrategyUnsatisfiable {
        page: String,
        strategy: String,
        attempts: usize,
    },

    #[error("page {page_h}x{page_w} is not larger than patch {patch_h}x{patch_w}")]
    PageTooSmall {
        page_h: usize,
        page_w: usize,
        patch_h: usize,
        patch_w: usize,
    },

    #[error("patch {height}x{width} too small: layer '{layer}' leaves an empty spatial map")]
    PatchTooSmall {
        layer: String,
        height: usize,
        width: usize,
    },

    #[error("degenerate label distribution: training pairs must contain both similar and different labels")]
    DegenerateLabels,

    #[error("training diverged at epoch {epoch}: loss became {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("size mismatch{}: expected {expected:?}, got {actual:?}", index.map(|i| format!(" at index {i}")).unwrap_or_default())]
    SizeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
        index: Option<usize>,
    },

    #[error("no blob lines detected")]
    NoBlobLines,

    #[error("no labels available")]
    NoLabels,

    #[error("empty blob {0}")]
    EmptyBlob(usize),

    #[error("component {0} is unassigned")]
    Unassigned(usize),

    #[error("malformed data in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}
