//! CPU engine for lesion segmentation with a dilated nested U-shaped
//! encoder, parallel-path attention, multi-scale supervised decoding and a
//! BCE + soft Dice + total variation objective.

pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod norm;
pub mod objective;
pub mod params;
pub mod pcam;
pub mod resample;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use conv::ConvSpec;
pub use data::{LesionClass, SegmentationSample};
pub use encoder::NetworkConfig;
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use model::Model;
pub use norm::Mode;
pub use objective::{LossConfig, LossWeights};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use trainer::TrainConfig;
