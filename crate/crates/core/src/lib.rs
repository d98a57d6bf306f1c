pub mod audiofeat;
pub mod augment;
pub mod checkpoint;
pub mod corpus;
pub mod crnn;
pub mod error;
pub mod params;
pub mod pipeline;
pub mod runner;
pub mod sedeval;
pub mod ssl;
pub mod synthgen;
pub mod tensor;

pub use error::{Result, SedError};
