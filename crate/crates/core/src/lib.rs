pub mod causal;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod extraction;
pub mod harvest;
pub mod knockout;
pub mod patch;
pub mod report;
pub mod runtime;
pub mod seed;

pub use error::{Error, Result};
