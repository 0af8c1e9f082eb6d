pub mod archive;
pub mod binio;
pub mod cfm;
pub mod coarsegrain;
pub mod dataset;
pub mod dem;
pub mod error;
pub mod field;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod report;
pub mod sampler;
pub mod vec3;

pub use error::{Error, Result};
