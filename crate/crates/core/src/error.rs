use std::path::PathBuf;

/// Errors raised anywhere in the re-ranking toolkit. Messages are prefixed
/// with the module that produced them.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("boxgeom: invalid box: {0}")]
    InvalidBox(String),

    #[error("boxgeom: invalid detection set: {0}")]
    InvalidDetectionSet(String),

    #[error("clustering: only {eligible} boxes above the confidence floor, fewer than k = {k}")]
    FewerBoxesThanClusters { eligible: usize, k: usize },

    #[error("oracle: degenerate training batch: {0}")]
    DegenerateBatch(String),

    #[error("oracle: bridge protocol error: {0}")]
    BridgeProtocol(String),

    #[error("oracle: replay script error: {0}")]
    Replay(String),

    #[error("rerank: no cluster has mean confidence above h = {h}")]
    NoSeedClusters { h: f64 },

    #[error("rerank: no fully negative cluster left to promote")]
    NegativesExhausted,

    #[error("config: {0}")]
    InvalidConfig(String),

    #[error("metrics: ground truth has no non-ignored boxes")]
    EmptyGroundTruth,

    #[error("synth: could not place box {index} of class {class} after {attempts} attempts")]
    InfeasiblePlacement {
        class: usize,
        index: usize,
        attempts: usize,
    },

    #[error("synth: invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("dataio: line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("dataio: schema error: {0}")]
    Schema(String),

    #[error("dataio: corrupt run state: {0}")]
    CorruptState(String),

    #[error("dataio: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            line,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
