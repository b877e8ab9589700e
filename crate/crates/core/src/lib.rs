//! Music-sensed 3D human pose estimation: acoustic feature extraction, a
//! B-format room simulator, a reverse-mode autodiff engine, the pose network
//! with its losses, training and evaluation.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod signal;
pub mod sim;
pub mod study;
pub mod train;

pub use autodiff::{ParamStore, Tape, Tensor, Var};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::MetricReport;
pub use model::{Model, ModelConfig};
pub use pipeline::{FeatureConfig, FeatureSet, Window};
pub use signal::{BFormatClip, MonoSignal, StereoClip};
pub use sim::{DatasetConfig, Manifest, PoseSequence};
pub use train::{Checkpoint, TrainConfig, TrainSet};
