//! Current-stress-optimal triple phase shift modulation for the
//! dual-active-bridge DC-DC converter.

pub mod closed_loop;
pub mod compare;
pub mod converter;
pub mod dataset;
pub mod error;
pub mod fis;
pub mod pipeline;
pub mod pso;
pub mod surrogate;
pub mod textio;

pub use converter::{ConverterParams, ConverterSpec, ModulationTriple};
pub use error::{Error, Result};

/// Version recorded in artifact provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
