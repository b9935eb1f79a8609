pub mod autograd;
pub mod dataio;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod rank_search;
pub mod selection;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
