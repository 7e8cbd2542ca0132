pub mod clf;
pub mod error;
pub mod mae;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod pu;
pub mod raster;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod xai;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
