pub mod analysis;
pub mod corpus;
pub mod error;
pub mod nn;
pub mod numkernel;
pub mod pretrain;
pub mod probe;
pub mod similarity;

pub use error::{Error, Result};
pub use numkernel::RealMatrix;
