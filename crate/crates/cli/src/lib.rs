//! Pipeline driver for the lesionflow toolkit: configuration profiles,
//! content-addressed stage artifacts, and the seven evaluation settings.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod stages;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
pub use pipeline::{Arch, Pipeline};
