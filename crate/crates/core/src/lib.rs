pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck_suite;
pub mod head;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod plot;
pub mod tensor;
pub mod window;

pub use error::{Error, Result};
