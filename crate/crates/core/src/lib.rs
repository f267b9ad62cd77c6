pub mod config;
pub mod data;
pub mod encoding;
pub mod error;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod pipeline;

pub use error::{Error, Result};
