pub mod adapters;
pub mod data_ingest;
pub mod error;
pub mod inversion;
pub mod metrics;
pub mod nn;
pub mod probes;
pub mod soft_histogram;
pub mod tensor;
pub mod toy_face;

pub use error::{Error, Result};
