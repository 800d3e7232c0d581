pub mod autodiff;
pub mod error;
pub mod evalio;
pub mod fsam;
pub mod gscm;
pub mod init;
pub mod numerics;
pub mod pipeline;
pub mod softgate;
pub mod training;

pub use error::{Error, Result};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type ModelParams64 = pipeline::ModelParams<f64>;
pub type ModelParams32 = pipeline::ModelParams<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
