use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("undefined efficiency: total count is zero")]
    UndefinedEfficiency,

    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("no matches")]
    NoMatches,

    #[error("duplicate match_id {0}")]
    DuplicateMatchId(u32),

    #[error("unknown team: {0}")]
    UnknownTeam(String),

    #[error("need at least two teams, found {0}")]
    TooFewTeams(usize),

    #[error("illegal set pair {0}-{1}")]
    IllegalSets(u32, u32),

    #[error("scoring intensity overflow (log-intensity {0})")]
    IntensityOverflow(f64),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("degenerate trace: {0}")]
    DegenerateTrace(String),

    #[error("invalid season data: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("chain {chain}, iteration {iteration}: {source}")]
    Sampler {
        chain: usize,
        iteration: usize,
        source: Box<Error>,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
