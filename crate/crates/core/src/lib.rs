pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod netgraph;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
