pub mod error;
pub mod kspace;

pub use error::{Error, Result};
pub mod hankel;
pub mod io;
pub mod masks;
pub mod metrics;
pub mod phantom;
pub mod sampler;
pub mod score;
pub mod weighting;
