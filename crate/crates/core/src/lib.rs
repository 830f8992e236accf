pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod mask;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prompting;
pub mod removal;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
