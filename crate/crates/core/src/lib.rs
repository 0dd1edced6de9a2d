pub mod data;
pub mod encoder;
pub mod error;
pub mod fewshot;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod stage1;
pub mod superpixel;
pub mod tensor;

pub use error::{Error, Result};
