pub mod archive;
pub mod autograd;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod morphing;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ModelBundle32 = model::ModelBundle<f32>;
pub type ModelBundle64 = model::ModelBundle<f64>;
pub type TrainState32 = training::TrainState<f32>;
pub type TrainState64 = training::TrainState<f64>;
pub type Batch32 = data::Batch<f32>;
pub type Batch64 = data::Batch<f64>;
pub type MorphSequence32 = morphing::MorphSequence<f32>;
pub type MorphSequence64 = morphing::MorphSequence<f64>;
