//! Hyperspectral reconstruction from RGB.
//!
//! The crate covers the whole pipeline: camera spectral sensitivity
//! calibration from a monochromator sweep ([`calibration`]), RGB simulation
//! from hyperspectral datacubes ([`forward_model`]), the parallel-transposed
//! reconstruction network ([`ptnet`]) running on a small autodiff engine
//! ([`tensor`]), training ([`training`]) and quality metrics ([`metrics`]).
//!
//! The numeric core is generic over [`Scalar`]; `f32` is used for training
//! and `f64` for gradient checking. Aliases for both are exported below.

pub mod calibration;
pub mod datacube;
pub mod error;
pub mod forward_model;
pub mod gradcheck;
pub mod metrics;
pub mod ptnet;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result, SweepError};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;

pub type PtnetModel32 = ptnet::PtnetModel<f32>;
pub type PtnetModel64 = ptnet::PtnetModel<f64>;
pub type TrainState32 = training::TrainState<f32>;
pub type TrainState64 = training::TrainState<f64>;
