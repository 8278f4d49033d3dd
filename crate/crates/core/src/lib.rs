pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod fusion;
pub mod gradcheck;
pub mod inspect;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
