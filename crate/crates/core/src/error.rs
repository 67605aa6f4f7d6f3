use crate::caption::CaptionError;
use crate::numcore::checkpoint::CheckpointError;
use crate::numcore::ShapeError;
use crate::trajectory::TrajectoryError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("vocabulary mismatch: model {model}, data {data}")]
    VocabMismatch { model: String, data: String },
    #[error("checkpoint layout: {0}")]
    Layout(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
