//! Readers for the feeder, fleet and baseline files.

mod baseline;
mod feeder;
mod fleet;

pub use baseline::{parse_baseline, read_baseline};
pub use feeder::{parse_feeder, read_feeder};
pub use fleet::{generate, parse_fleet, read_fleet, GeneratorSpec};
pub(crate) use fleet::toml_error;
