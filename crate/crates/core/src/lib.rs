pub mod analysis;
pub mod data;
pub mod engine;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod transport;

pub use scalar::{DType, Scalar};
pub use tensor::{Tensor, TensorData};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
