pub mod bpe;
pub mod corpus;
pub mod error;
pub mod masking;
pub mod model;
pub mod optim;
pub mod packing;
pub mod rng;
pub mod synthetic;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
