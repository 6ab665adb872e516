pub mod av_data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod sync_model;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
