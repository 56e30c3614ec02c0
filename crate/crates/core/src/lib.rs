//! Class-generic object detection over a discretized bounding-box space.
//!
//! A convolutional trunk produces a feature vector; a dense head turns it into
//! either class logits or a softmax over every cell of a 4-D (x, y, scale,
//! aspect) box grid. Detection heads are trained against Gaussian-smoothed
//! cell targets and decoded with non-max suppression over the distribution.

pub mod bbox;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod layers;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use bbox::{iou, BBox, BBoxGrid, CellDistribution};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use detector::{Detection, NmsParams};
pub use error::{Error, ErrorKind, Result};
pub use model::{head_swap, HeadKind, HeadSpec, Model, NetworkConfig};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainLog};
