use thiserror::Error;

/// Crate-wide error, mostly a sum of the per-module errors.
///
/// `exit_code` groups errors the way the CLI reports them: 2 for bad
/// configuration, 3 for data problems, 4 for numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Shape(#[from] crate::tensor::ShapeError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Graph(#[from] crate::graphs::GraphError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error(transparent)]
    Backbone(#[from] crate::backbone::BackboneError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Backtest(#[from] crate::backtest::BacktestError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Train(e) => e.exit_code(),
            Error::Shape(_) | Error::Data(_) | Error::Graph(_) | Error::Checkpoint(_) => 3,
            Error::Io(_) | Error::Backbone(_) => 3,
            Error::Backtest(e) => e.exit_code(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
