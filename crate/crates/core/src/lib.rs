pub mod attention;
pub mod backbone;
pub mod config;
pub mod error;
pub mod eval;
pub mod heads;
pub mod pipeline;
pub mod rpn;
pub mod synthdata;
pub mod tensor;

pub use error::{Result, WsdlError};
