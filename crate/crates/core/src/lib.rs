//! Range-image LiDAR panoptic segmentation toolkit: scan projection,
//! range-aware convolution operators with analytic gradients, panoptic
//! fusion, evaluation metrics and pseudo-label regularization.

pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod heads;
pub mod io;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod projection;
pub mod pseudo;
pub mod range_ops;
pub mod scalar;
pub mod snapshot;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::{Param, ParamId, ParamStore, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
