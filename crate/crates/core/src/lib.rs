//! Tensor engine, model and training objective for multi-frame LiDAR, image
//! and language 3D visual grounding.

pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pointnet;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{attention, concat_cols, concat_rows, Gradients, Mode, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
