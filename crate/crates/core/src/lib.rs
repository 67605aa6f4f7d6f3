pub mod caption;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod inference;
pub mod model;
pub mod numcore;
pub mod scalar;
pub mod synthcorpus;
pub mod trainer;
pub mod trajectory;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numcore::Tensor<f32>;
pub type Tensor64 = numcore::Tensor<f64>;
pub type ParamStore32 = numcore::ParamStore<f32>;
pub type ParamStore64 = numcore::ParamStore<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
