//! Fall-recovery learning for quadrupeds of varying morphology.

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod mcp;
pub mod morphology;
pub mod nn;
pub mod observation;
pub mod plot;
pub mod policy;
pub mod replay;
pub mod rewards;
pub mod sim;
pub mod terrain;
pub mod trainer;

pub use error::{Error, Result};
