pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod composition;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod miner;
pub mod model;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
