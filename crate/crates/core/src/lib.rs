pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod features;
pub mod kb;
pub mod model;
pub mod pipeline;
pub mod reasoning;
pub mod scoring;
pub mod tensor;
pub mod text;
pub mod topic;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
