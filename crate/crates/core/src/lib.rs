//! Siamese region-proposal person tracking with an auxiliary keypoint head,
//! and a static background patch attack against it.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: boxes, IoU/mIoU, anchors and box deltas.
//! * [`model`]: backbone, cross-correlation RPN head, keypoint head, checkpoints.
//! * [`losses`]: anchor targets and the tracking / keypoint objectives.
//! * [`tracking`]: context cropping, sequential inference, differentiable rollout.
//! * [`attack`]: patch compositing, gradient-ascent texture optimisation.
//! * [`data`]: COCO-style keypoint stills, frame sequences, synthetic sprites.
//! * [`train`]: STL / MTL / keypoint-pretraining loops and λ_K sweeps.
//! * [`config`] and [`report`]: experiment files, results tables and charts.

pub mod attack;
pub mod config;
pub mod data;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod model;
pub mod report;
pub mod tracking;
pub mod train;

pub use skelevision_autograd as autograd;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Autograd(#[from] skelevision_autograd::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
