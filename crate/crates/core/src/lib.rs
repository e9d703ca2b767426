pub mod checkpoint;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod masking;
pub mod nn;
pub mod phantom;
pub mod pose;
pub mod pretrain;
pub mod world_model;

pub use error::{Error, Result};
